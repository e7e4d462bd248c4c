"""Power-of-two fixed-point quantization and its integer reference execution.

Every tensor gets a signed Qm.n format (``QSpec``): the integer code ``q``
stands for ``q * 2**-frac_bits``.  Scales are chosen from the max-abs value
seen on a calibration set so that rescaling between formats is a plain
arithmetic shift.  Weights are always 16 bit; feature maps are 16 bit unless
they are selected for 8-bit storage to cut DDR traffic, in which case the
core still computes on them after sign extension.

Integer products are accumulated in float64 BLAS calls.  All operands are
small integers and the partial sums stay far below 2**53, so the result is
the exact integer sum; a 48-bit accumulator is then emulated by saturation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from embedcnn.engine import ops
from embedcnn.engine.execute import run
from embedcnn.engine.train import batch_inputs
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
    TransposedConv,
)
from embedcnn.taskbench import Sample

ACC_BITS = 48
WEIGHT_BITS = 16
FM_BITS = 16


class QuantError(Exception):
    pass


class EmptyCalibSet(QuantError):
    pass


class TargetUnreachable(QuantError):
    """Raised when every candidate was flipped and a budget is still exceeded; ``best`` holds that result."""

    def __init__(self, message: str, best: "MixedPrecisionResult"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class QSpec:
    bits: int
    frac_bits: int

    def __post_init__(self):
        if self.bits not in (8, 16):
            raise ValueError(f"bits must be 8 or 16, got {self.bits}")
        if not 0 <= self.frac_bits <= self.bits - 1:
            raise ValueError(f"frac_bits {self.frac_bits} outside [0, {self.bits - 1}]")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def scale(self) -> float:
        return 2.0**-self.frac_bits


def frac_bits_for(max_abs: float, bits: int) -> int:
    """Largest fraction length whose range still covers ``max_abs`` (clipped to ``[0, bits-1]``)."""
    if not math.isfinite(max_abs):
        raise QuantError(f"non-finite calibration value {max_abs}")
    if max_abs <= 0:
        return bits - 1
    f = math.floor(math.log2(((1 << (bits - 1)) - 1) / max_abs))
    return int(min(max(f, 0), bits - 1))


def spec_for(max_abs: float, bits: int) -> QSpec:
    return QSpec(bits, frac_bits_for(max_abs, bits))


def quantize_value(x, qspec: QSpec) -> np.ndarray:
    """Round half to even onto the integer grid, saturating at the representable range."""
    q = np.rint(np.asarray(x, dtype=np.float64) * (1 << qspec.frac_bits))
    return np.clip(q, qspec.qmin, qspec.qmax).astype(np.int64)


def dequantize(q, qspec: QSpec) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * qspec.scale


def shift_round(acc: np.ndarray, shift: int) -> np.ndarray:
    """Arithmetic right shift with round-half-up (left shift when ``shift`` is negative)."""
    if shift > 0:
        return (acc + (np.int64(1) << np.int64(shift - 1))) >> np.int64(shift)
    if shift < 0:
        return acc << np.int64(-shift)
    return acc


# --------------------------------------------------------------------------
# assignment and calibration


@dataclass
class QAssignment:
    """Formats for parameter tensors (``"node.slot"``) and node outputs (node id)."""

    weights: dict[str, QSpec] = field(default_factory=dict)
    feature_maps: dict[str, QSpec] = field(default_factory=dict)

    def to_dict(self) -> dict:
        enc = lambda m: {k: {"bits": v.bits, "frac_bits": v.frac_bits} for k, v in sorted(m.items())}
        return {"weights": enc(self.weights), "feature_maps": enc(self.feature_maps)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: Mapping) -> "QAssignment":
        dec = lambda m: {k: QSpec(int(v["bits"]), int(v["frac_bits"])) for k, v in m.items()}
        return cls(dec(d.get("weights", {})), dec(d.get("feature_maps", {})))

    @classmethod
    def from_json(cls, text: str) -> "QAssignment":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "QAssignment":
        return cls.from_json(Path(path).read_text())

    def eight_bit(self) -> list[str]:
        return sorted(k for k, v in self.feature_maps.items() if v.bits == 8)


@dataclass
class CalibStats:
    """Max |x| per node output and per parameter tensor over the calibration set."""

    feature_maps: dict[str, float]
    weights: dict[str, float]
    n_samples: int

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "feature_maps": dict(sorted(self.feature_maps.items())), "weights": dict(sorted(self.weights.items()))}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibStats":
        return cls(dict(d["feature_maps"]), dict(d["weights"]), int(d["n_samples"]))


def _bn_affine(node: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    a = node.gamma.astype(np.float64) / np.sqrt(node.running_var.astype(np.float64) + node.eps)
    return a, node.beta.astype(np.float64) - node.running_mean.astype(np.float64) * a


def fold_batchnorm(graph: Graph) -> Graph:
    """Merge every BatchNorm that is the sole consumer of a conv into that conv's weight and bias.

    Consumers of the folded BatchNorm are rewired to the conv; BatchNorms
    after Add/Concat stay in place.
    """
    nodes = dict(graph.nodes)
    redirect: dict[str, str] = {}
    for nid, node in graph.nodes.items():
        if not isinstance(node, BatchNorm):
            continue
        (src,) = graph.predecessors(nid)
        conv = nodes[src]
        if not isinstance(conv, (Conv, TransposedConv)) or len(graph.consumers(src)) != 1:
            continue
        a, c = _bn_affine(node)
        w = conv.weight.astype(np.float64) * a[:, None, None, None]
        b = conv.bias.astype(np.float64) * a + c
        nodes[src] = replace(conv, weight=w, bias=b)
        del nodes[nid]
        redirect[nid] = src
    edges = []
    for e in graph.edges:
        if e.dst in redirect:
            continue
        edges.append(Edge(redirect.get(e.src, e.src), e.dst, e.slot))
    return Graph(nodes, edges, graph.inputs, graph.heads)


def _weight_tensors(graph: Graph) -> dict[str, np.ndarray]:
    out = {}
    for nid, node in graph.nodes.items():
        if isinstance(node, (Conv, TransposedConv)):
            out[f"{nid}.weight"] = node.weight
            out[f"{nid}.bias"] = node.bias
        elif isinstance(node, BatchNorm):
            a, c = _bn_affine(node)
            out[f"{nid}.scale"] = a
            out[f"{nid}.shift"] = c
    return out


def _stack(chunk) -> dict[str, np.ndarray]:
    if isinstance(chunk[0], Sample):
        return batch_inputs(chunk)
    return {k: np.stack([np.asarray(s[k]) for s in chunk]) for k in chunk[0]}


def calibrate(graph: Graph, samples: Sequence[Sample] | Sequence[Mapping[str, np.ndarray]], batch_size: int = 32) -> CalibStats:
    """Float eval-mode forward over ``samples`` recording max |x| for every tensor.

    Fold BatchNorm first (:func:`fold_batchnorm`) so the statistics describe
    the tensors the core actually produces.
    """
    if len(samples) == 0:
        raise EmptyCalibSet("calibration needs at least one sample")
    fm: dict[str, float] = {}
    for i in range(0, len(samples), batch_size):
        values = run(graph, _stack(samples[i : i + batch_size]), dtype=np.float64).values
        for nid, v in values.items():
            if isinstance(graph[nid], Head):
                continue
            m = float(np.max(np.abs(v))) if v.size else 0.0
            fm[nid] = max(fm.get(nid, 0.0), m)
    w = {k: float(np.max(np.abs(v))) if v.size else 0.0 for k, v in _weight_tensors(graph).items()}
    for k, v in {**fm, **w}.items():
        if not math.isfinite(v):
            raise QuantError(f"non-finite values in {k}")
    return CalibStats(fm, w, len(samples))


def assign(calib: CalibStats, fm_bits: int = FM_BITS, eight_bit: Sequence[str] = ()) -> QAssignment:
    """Formats from calibration: 16-bit weights, ``fm_bits`` feature maps, ``eight_bit`` forced to 8."""
    forced = set(eight_bit)
    weights = {k: spec_for(v, WEIGHT_BITS) for k, v in calib.weights.items()}
    fms = {k: spec_for(v, 8 if k in forced else fm_bits) for k, v in calib.feature_maps.items()}
    return QAssignment(weights, fms)


def with_bits(qa: QAssignment, calib: CalibStats, tensors: Sequence[str], bits: int) -> QAssignment:
    fms = dict(qa.feature_maps)
    for t in tensors:
        fms[t] = spec_for(calib.feature_maps[t], bits)
    return QAssignment(dict(qa.weights), fms)


# --------------------------------------------------------------------------
# integer execution


@dataclass
class SatStats:
    """Saturation counts per node: ``acc`` for the 48-bit accumulator, ``out`` for the output format."""

    acc: dict[str, int] = field(default_factory=dict)
    out: dict[str, int] = field(default_factory=dict)
    elements: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.acc.values()) + sum(self.out.values())

    def merge(self, other: "SatStats") -> None:
        for mine, theirs in ((self.acc, other.acc), (self.out, other.out), (self.elements, other.elements)):
            for k, v in theirs.items():
                mine[k] = mine.get(k, 0) + v

    def to_dict(self) -> dict:
        return {"total": self.total, "acc": dict(sorted(self.acc.items())), "out": dict(sorted(self.out.items()))}


def _saturate(x: np.ndarray, lo: int, hi: int) -> tuple[np.ndarray, int]:
    n = int(np.count_nonzero((x < lo) | (x > hi)))
    return np.clip(x, lo, hi), n


def _requant(x: np.ndarray, frac_in: int, spec: QSpec) -> tuple[np.ndarray, int]:
    return _saturate(shift_round(x, frac_in - spec.frac_bits), spec.qmin, spec.qmax)


def _align(q: np.ndarray, frac_in: int, frac_out: int) -> np.ndarray:
    return shift_round(q, frac_in - frac_out)


_ACC_MAX = (1 << (ACC_BITS - 1)) - 1


def quantized_run(graph: Graph, qa: QAssignment, inputs: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], SatStats]:
    """Integer forward over a batch; returns dequantized ``[N, C, H, W]`` head outputs and saturation counts."""
    codes: dict[str, np.ndarray] = {}
    fracs: dict[str, int] = {}
    stats = SatStats()
    heads: dict[str, np.ndarray] = {}
    for nid in graph.topo_order():
        node = graph[nid]
        preds = graph.predecessors(nid)
        if isinstance(node, Head):
            heads[nid] = codes[preds[0]].astype(np.float64) * 2.0 ** -fracs[preds[0]]
            continue
        spec = qa.feature_maps.get(nid)
        if spec is None:
            raise QuantError(f"no format for node {nid!r}")
        if isinstance(node, Input):
            x = np.asarray(inputs[nid], dtype=np.float64)
            if x.ndim == 3:
                x = x[None]
            q = np.rint(x * (1 << spec.frac_bits))
            q, n = _saturate(q, spec.qmin, spec.qmax)
            q = q.astype(np.int64)
            stats.out[nid] = n
        elif isinstance(node, (Conv, TransposedConv)):
            x, fx = codes[preds[0]], fracs[preds[0]]
            ws, bs = qa.weights[f"{nid}.weight"], qa.weights[f"{nid}.bias"]
            wq = quantize_value(node.weight, ws).astype(np.float64)
            bq = quantize_value(node.bias, bs)
            zero = np.zeros(node.out_ch)
            if isinstance(node, Conv):
                acc, _ = ops.conv2d_forward(x.astype(np.float64), wq, zero, node.stride, node.padding)
            else:
                acc, _ = ops.tconv2d_forward(x.astype(np.float64), wq, zero, node.stride, node.padding)
            acc = np.rint(acc).astype(np.int64)
            f_acc = fx + ws.frac_bits
            acc = acc + _align(bq, bs.frac_bits, f_acc).reshape(1, -1, 1, 1)
            acc, stats.acc[nid] = _saturate(acc, -_ACC_MAX - 1, _ACC_MAX)
            q, stats.out[nid] = _requant(acc, f_acc, spec)
        elif isinstance(node, BatchNorm):
            x, fx = codes[preds[0]], fracs[preds[0]]
            ss, cs = qa.weights[f"{nid}.scale"], qa.weights[f"{nid}.shift"]
            a, c = _bn_affine(node)
            aq = quantize_value(a, ss).reshape(1, -1, 1, 1)
            cq = quantize_value(c, cs).reshape(1, -1, 1, 1)
            f_acc = fx + ss.frac_bits
            acc = x * aq + _align(cq, cs.frac_bits, f_acc)
            acc, stats.acc[nid] = _saturate(acc, -_ACC_MAX - 1, _ACC_MAX)
            q, stats.out[nid] = _requant(acc, f_acc, spec)
        elif isinstance(node, ReLU):
            x, fx = codes[preds[0]], fracs[preds[0]]
            q, stats.out[nid] = _requant(np.maximum(x, 0), fx, spec)
        elif isinstance(node, Add):
            f_acc = max(fracs[p] for p in preds)
            acc = sum(_align(codes[p], fracs[p], f_acc) for p in preds)
            q, stats.out[nid] = _requant(acc, f_acc, spec)
        elif isinstance(node, Concat):
            parts, n = [], 0
            for p in preds:
                part, k = _requant(codes[p], fracs[p], spec)
                parts.append(part)
                n += k
            q = np.concatenate(parts, axis=1)
            stats.out[nid] = n
        else:  # pragma: no cover
            raise TypeError(type(node))
        codes[nid] = q
        fracs[nid] = spec.frac_bits
        stats.elements[nid] = int(q.size)
    return heads, stats


def quantized_forward(graph: Graph, qa: QAssignment, sample: Sample | Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Dequantized channel-last head outputs for one sample, keyed by head id."""
    inputs = sample.inputs() if isinstance(sample, Sample) else sample
    heads, _ = quantized_run(graph, qa, {k: np.asarray(v)[None] for k, v in inputs.items()})
    return {h: v[0].transpose(1, 2, 0) for h, v in heads.items()}


def quantized_predict(graph: Graph, qa: QAssignment, samples: Sequence[Sample], batch_size: int = 32) -> tuple[list[dict[str, np.ndarray]], SatStats]:
    """Channel-last outputs keyed by task name, in the format :func:`evaluate_outputs` takes."""
    tasks = {h: graph[h].task.value for h in graph.heads}
    out, stats = [], SatStats()
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        heads, s = quantized_run(graph, qa, batch_inputs(chunk))
        stats.merge(s)
        for k in range(len(chunk)):
            out.append({tasks[h]: heads[h][k].transpose(1, 2, 0) for h in graph.heads})
    return out, stats


def sqnr_db(reference: Sequence[np.ndarray], test: Sequence[np.ndarray]) -> float:
    """``10 log10(signal power / error power)`` over all given arrays together."""
    sig = sum(float(np.sum(np.asarray(r, dtype=np.float64) ** 2)) for r in reference)
    err = sum(float(np.sum((np.asarray(r, dtype=np.float64) - np.asarray(t, dtype=np.float64)) ** 2)) for r, t in zip(reference, test))
    if err == 0:
        return math.inf
    if sig == 0:
        return -math.inf
    return 10 * math.log10(sig / err)


def graph_sqnr(graph: Graph, qa: QAssignment, samples: Sequence[Sample] | Sequence[Mapping[str, np.ndarray]], batch_size: int = 32) -> float:
    ref, got = [], []
    for i in range(0, len(samples), batch_size):
        inputs = _stack(samples[i : i + batch_size])
        values = run(graph, inputs, dtype=np.float64).values
        heads, _ = quantized_run(graph, qa, inputs)
        for h in graph.heads:
            ref.append(values[h])
            got.append(heads[h])
    return sqnr_db(ref, got)


# --------------------------------------------------------------------------
# mixed precision


@dataclass(frozen=True)
class QuantTargets:
    bandwidth_gbps: float = 1.0
    footprint_mb: float = 14.0

    def met_by(self, report) -> bool:
        return report.bandwidth_gbps <= self.bandwidth_gbps and report.footprint_mb <= self.footprint_mb


@dataclass
class MixedPrecisionResult:
    assignment: QAssignment
    report: object  # socsim.SimReport
    flipped: list[str]
    ddr_trace: list[int]
    met: bool

    def summary(self) -> dict:
        return {
            "flipped": list(self.flipped),
            "met": self.met,
            "fps": self.report.fps,
            "bandwidth_gbps": self.report.bandwidth_gbps,
            "footprint_mb": self.report.footprint_mb,
            "ddr_trace": list(self.ddr_trace),
        }


def select_mixed_precision(
    graph: Graph,
    qa: QAssignment,
    calib: CalibStats,
    targets: QuantTargets,
    hw=None,
    mode: str = "chained",
    input_shapes=None,
    traffic: Mapping[str, int] | None = None,
) -> MixedPrecisionResult:
    """Flip feature maps to 8-bit storage, heaviest DDR traffic first, until both budgets hold.

    ``traffic`` defaults to the per-tensor DDR bytes of simulating ``qa``.
    Raises :class:`TargetUnreachable` (with the all-flipped result) when the
    candidates run out first.
    """
    from embedcnn import socsim

    hw = hw or socsim.HardwareConfig()
    report = socsim.run_sim(graph, hw, qa, mode, input_shapes)
    traffic = dict(report.tensor_ddr_bytes if traffic is None else traffic)
    order = sorted((t for t, b in traffic.items() if b > 0 and t in qa.feature_maps), key=lambda t: (-traffic[t], t))
    current, flipped, trace = qa, [], [report.ddr_bytes]
    if targets.met_by(report):
        return MixedPrecisionResult(current, report, flipped, trace, True)
    for t in order:
        if current.feature_maps[t].bits == 8:
            continue
        current = with_bits(current, calib, [t], 8)
        flipped.append(t)
        report = socsim.run_sim(graph, hw, current, mode, input_shapes)
        trace.append(report.ddr_bytes)
        if targets.met_by(report):
            return MixedPrecisionResult(current, report, flipped, trace, True)
    best = MixedPrecisionResult(current, report, flipped, trace, False)
    raise TargetUnreachable(
        f"budgets not met after flipping {len(flipped)} tensors: {report.bandwidth_gbps:.3f} GBps, {report.footprint_mb:.2f} MB",
        best,
    )
