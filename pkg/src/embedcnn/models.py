"""Toy multi-task architectures used by the demo pipeline and the tests.

The layout mirrors a compact surround-view network: separate Y and UV stems
merged by concatenation, a strided 5x5 encoder with one residual block, a
YOLO-style grid detection head, an FCN-style segmentation decoder with
transposed convolutions and skip concatenations, and a tiled soiling head on
a 4x4 grid.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from embedcnn.graph import BatchNorm, Conv, Graph, GraphBuilder, Task, TransposedConv


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    n_classes: int = 3  # segmentation classes incl. background
    n_soil_classes: int = 2
    grid: int = 8
    widths: tuple[int, ...] = (8, 16, 24, 32, 48)
    tasks: tuple[str, ...] = ("detection", "segmentation", "soiling")
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["tasks"] = list(self.tasks)
        return d


def build_multitask(cfg: ArchConfig = ArchConfig()) -> Graph:
    """Three-head network; ``image_size`` must be a multiple of 32 for the 8x8 grid default."""
    w0, w1, w2, w3, w4 = cfg.widths
    n = cfg.image_size
    b = GraphBuilder(cfg.seed)
    y = b.input("y", (1, n, n))
    uv = b.input("uv", (2, n // 2, n // 2))
    sy = b.conv_bn_relu("stem_y", y, w0, 5, 2)
    suv = b.conv_bn_relu("stem_uv", uv, w0, 5, 1)
    x = b.concat("cat0", [sy, suv])
    e1 = b.conv_bn_relu("enc1", x, w1, 5, 1)
    e2 = b.conv_bn_relu("enc2", e1, w2, 5, 2)
    e3 = b.conv("enc3", e2, w2, 5, 1)
    e3 = b.bn("enc3_bn", e3)
    r3 = b.relu("res3_relu", b.add("res3", [e2, e3]))
    e4 = b.conv_bn_relu("enc4", r3, w3, 5, 2)
    e5 = b.conv_bn_relu("enc5", e4, w4, 5, 1)
    e5 = _downsample_to_grid(b, e5, cfg.grid, w4)

    if "detection" in cfg.tasks:
        d = b.conv_bn_relu("det1", e5, w3, 3, 1)
        d = b.conv("det_out", d, 1 + (cfg.n_classes - 1) + 4, 1, 1)
        b.head("det_head", d, Task.DETECTION)
    if "soiling" in cfg.tasks:
        s = e5
        i = 0
        while b.shape(s).height > 4:
            s = b.conv_bn_relu(f"soil{i + 1}", s, w3, 3, 2)
            i += 1
        s = b.conv("soil_out", s, cfg.n_soil_classes, 1, 1)
        b.head("soil_head", s, Task.SOILING)
    if "segmentation" in cfg.tasks:
        u = _tconv_bn_relu(b, "up1", e5, w2)
        while b.shape(u).height < b.shape(r3).height:
            u = _tconv_bn_relu(b, f"up1_{b.shape(u).height}", u, w2)
        u = b.concat("cat1", [u, r3])
        u = b.conv_bn_relu("seg1", u, w2, 3, 1)
        u = _tconv_bn_relu(b, "up2", u, w1)
        u = b.concat("cat2", [u, e1])
        u = b.conv_bn_relu("seg2", u, w1, 3, 1)
        u = _tconv_bn_relu(b, "up3", u, w0)
        u = b.conv("seg_out", u, cfg.n_classes, 1, 1)
        b.head("seg_head", u, Task.SEGMENTATION)
    return b.build()


def _tconv_bn_relu(b: GraphBuilder, nid: str, src: str, out_ch: int) -> str:
    t = b.tconv(nid, src, out_ch, 2, 2)
    return b.relu(f"{nid}_relu", b.bn(f"{nid}_bn", t))


def _downsample_to_grid(b: GraphBuilder, src: str, grid: int, ch: int) -> str:
    i = 0
    while b.shape(src).height > grid:
        src = b.conv_bn_relu(f"enc_ds{i}", src, ch, 5, 2)
        i += 1
    return src


def deployment_shapes(graph: Graph, height: int, width: int) -> dict[str, tuple[int, int, int]]:
    """Input shapes for evaluating the same graph at a camera resolution (Y full-res, UV half-res)."""
    out = {}
    for nid in graph.inputs:
        c = graph[nid].shape.channels
        if nid == "uv":
            out[nid] = (c, height // 2, width // 2)
        else:
            out[nid] = (c, height, width)
    return out


def single_task(cfg: ArchConfig, task: str) -> Graph:
    return build_multitask(ArchConfig(**{**cfg.__dict__, "tasks": (task,)}))


def serial_chain(kernels: Sequence[int], strides: Sequence[int], channels: int = 4, size: int = 32, seed: int = 0) -> Graph:
    """Input -> Conv -> ... -> Conv -> Head chain, handy for receptive-field and simulator tests."""
    b = GraphBuilder(seed)
    x = b.input("x", (channels, size, size))
    for i, (k, s) in enumerate(zip(kernels, strides)):
        x = b.conv(f"c{i}", x, channels, k, s)
    b.head("out", x, Task.SEGMENTATION)
    return b.build()


def reinitialize(graph: Graph, seed: int = 0) -> Graph:
    """Same architecture with fresh He-normal conv weights and identity BatchNorms."""
    rng = np.random.default_rng(seed)
    updates: dict[str, np.ndarray] = {}
    for nid in graph.topo_order():
        node = graph[nid]
        if isinstance(node, (Conv, TransposedConv)):
            fan_in = node.in_ch * node.kernel**2
            updates[f"{nid}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), node.weight.shape)
            updates[f"{nid}.bias"] = np.zeros(node.out_ch)
        elif isinstance(node, BatchNorm):
            c = node.channels
            updates.update({f"{nid}.gamma": np.ones(c), f"{nid}.beta": np.zeros(c), f"{nid}.running_mean": np.zeros(c), f"{nid}.running_var": np.ones(c)})
    return graph.with_params(updates)
