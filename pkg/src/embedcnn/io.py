"""Checkpoint formats: graph JSON plus an ``ENF1`` weights sidecar.

Weights file layout (all little-endian)::

    b"ENF1"  u32 n_tensors
    per tensor: u32 name_len, name bytes (utf-8), u32 rank, rank x u32 dims, u64 byte_offset
    tensor data as float32, each tensor at its absolute ``byte_offset``
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from embedcnn.graph import (
    Add,
    BatchNorm,
    Concat,
    Conv,
    Edge,
    Graph,
    Head,
    Input,
    ReLU,
    Task,
    TensorShape,
    TransposedConv,
)

MAGIC = b"ENF1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def write_weights(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors)
    header = bytearray(MAGIC + struct.pack("<I", len(names)))
    arrays = [np.ascontiguousarray(tensors[n], dtype="<f4") for n in names]
    header_len = len(header)
    for n, a in zip(names, arrays):
        header_len += 4 + len(n.encode()) + 4 + 4 * a.ndim + 8
    offset = header_len
    for n, a in zip(names, arrays):
        raw = n.encode()
        header += struct.pack("<I", len(raw)) + raw
        header += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        header += struct.pack("<Q", offset)
        offset += a.nbytes
    with open(path, "wb") as f:
        f.write(bytes(header))
        for a in arrays:
            f.write(a.tobytes())


def read_weights(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        n = int(np.prod(dims)) if rank else 1
        if offset + 4 * n > len(buf):
            raise FormatError(f"{path}: tensor {name!r} runs past end of file")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(dims).astype(np.float32)
    return out


def graph_to_dict(graph: Graph) -> dict:
    nodes = []
    for nid, node in graph.nodes.items():
        entry: dict = {"id": nid, "kind": node.kind}
        if isinstance(node, Input):
            entry["shape"] = list(node.shape.as_tuple())
        elif isinstance(node, (Conv, TransposedConv)):
            entry.update(in_ch=node.in_ch, out_ch=node.out_ch, kernel=node.kernel, stride=node.stride, padding=node.padding)
        elif isinstance(node, BatchNorm):
            entry.update(channels=node.channels, eps=node.eps)
        elif isinstance(node, Head):
            entry["task"] = node.task.value
        if node.params:
            entry["weights"] = {slot: f"{nid}.{slot}" for slot in node.params}
        nodes.append(entry)
    return {
        "format": "embedcnn-graph",
        "version": FORMAT_VERSION,
        "nodes": nodes,
        "edges": [{"src": e.src, "dst": e.dst, "slot": e.slot} for e in graph.edges],
        "inputs": list(graph.inputs),
        "heads": list(graph.heads),
    }


def graph_from_dict(doc: dict, weights: dict[str, np.ndarray]) -> Graph:
    nodes = {}
    for entry in doc["nodes"]:
        kind = entry["kind"]
        nid = entry["id"]
        w = {slot: weights[key] for slot, key in entry.get("weights", {}).items()}
        if kind == "input":
            node = Input(TensorShape(*entry["shape"]))
        elif kind == "conv":
            node = Conv(entry["in_ch"], entry["out_ch"], entry["kernel"], entry["stride"], entry["padding"], w["weight"], w["bias"])
        elif kind == "tconv":
            node = TransposedConv(
                entry["in_ch"], entry["out_ch"], entry["kernel"], entry["stride"], w["weight"], w["bias"], entry.get("padding", 0)
            )
        elif kind == "batchnorm":
            node = BatchNorm(w["gamma"], w["beta"], w["running_mean"], w["running_var"], entry.get("eps", 1e-5))
        elif kind == "relu":
            node = ReLU()
        elif kind == "concat":
            node = Concat()
        elif kind == "add":
            node = Add()
        elif kind == "head":
            node = Head(Task(entry["task"]))
        else:
            raise FormatError(f"unknown node kind {kind!r}")
        nodes[nid] = node
    edges = [Edge(e["src"], e["dst"], e.get("slot", 0)) for e in doc["edges"]]
    return Graph(nodes, edges, doc.get("inputs"), doc.get("heads"))


def save_graph(graph: Graph, json_path: str | Path, weights_path: str | Path | None = None) -> None:
    json_path = Path(json_path)
    weights_path = Path(weights_path) if weights_path else json_path.with_suffix(".bin")
    doc = graph_to_dict(graph)
    doc["weights_file"] = weights_path.name
    json_path.write_text(json.dumps(doc, indent=1) + "\n")
    write_weights(weights_path, graph.params())


def load_graph(json_path: str | Path, weights_path: str | Path | None = None) -> Graph:
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    if weights_path is None:
        weights_path = json_path.parent / doc.get("weights_file", json_path.with_suffix(".bin").name)
    return graph_from_dict(doc, read_weights(weights_path))
