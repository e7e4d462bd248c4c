"""Cost model of a fixed-function CNN core behind a three-level memory hierarchy.

The core convolves ``par_in`` input channels with ``par_out`` filters of up to
``kernel x kernel`` per clock for one output pixel.  Feature maps live in DDR
between layers unless a *vertical* chain keeps them in on-chip SDRAM: a row
band of the chain output is produced by pushing the matching (halo-extended)
input band through every chain layer before moving to the next band.

Everything is modeled, nothing is timed: :func:`simulate` is a pure function
of the schedule and the hardware description.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from embedcnn.graph import (
    Add,
    BatchNorm,
    Concat,
    Conv,
    Graph,
    Head,
    Input,
    ReLU,
    TensorShape,
    TransposedConv,
    infer_shapes,
)

WEIGHT_BYTES = 2
DEFAULT_FM_BITS = 16


class SimError(Exception):
    pass


class Infeasible(SimError):
    pass


# --------------------------------------------------------------------------
# hardware description


@dataclass(frozen=True)
class CoreConfig:
    kernel: int = 5
    par_in: int = 4
    par_out: int = 8
    clock_hz: float = 625e6

    @property
    def peak_ops(self) -> float:
        return 2 * self.kernel**2 * self.par_in * self.par_out * self.clock_hz


@dataclass(frozen=True)
class MemoryConfig:
    ddr_bandwidth: float = 1.6e9  # sustained link rate, bytes/s
    ddr_budget_bytes: int = 14 * 2**20
    sdram_bytes: int = 2 * 2**20
    local_bytes: int = 64 * 2**10


@dataclass(frozen=True)
class HardwareConfig:
    core: CoreConfig = CoreConfig()
    memory: MemoryConfig = MemoryConfig()
    cameras_per_frame: int = 4
    dma_setup_cycles: int = 500

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "HardwareConfig":
        return cls(
            core=CoreConfig(**d.get("core", {})),
            memory=MemoryConfig(**d.get("memory", {})),
            cameras_per_frame=d.get("cameras_per_frame", 4),
            dma_setup_cycles=d.get("dma_setup_cycles", 500),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "HardwareConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def core_cycles(layer: Conv | TransposedConv, out_shape: TensorShape, hw: HardwareConfig = HardwareConfig(), rows: int | None = None) -> int:
    """Cycles for one conv layer: one output pixel per clock per (input block, filter block) pair.

    Transposed convs are costed as a stride-1 conv over their output grid.
    ``rows`` restricts the count to a band of output rows.
    """
    if layer.kernel > hw.core.kernel:
        raise Infeasible(f"kernel {layer.kernel} exceeds the core window {hw.core.kernel}")
    h = out_shape.height if rows is None else rows
    return h * out_shape.width * _ceil(layer.in_ch, hw.core.par_in) * _ceil(layer.out_ch, hw.core.par_out)


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


# --------------------------------------------------------------------------
# lowering


@dataclass
class Unit:
    """One schedulable layer: a conv (with fused BatchNorm/ReLU) or an element-wise op."""

    name: str
    kind: str  # "conv" | "tconv" | "eltwise"
    nodes: list[str]
    inputs: list[str]  # physical tensors read (Concat expanded)
    output: str  # tensor id written (last fused node)
    out_shape: TensorShape
    in_shape: TensorShape
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_ch: int = 0
    out_ch: int = 0
    weight_bytes: int = 0

    def blocks(self, hw: HardwareConfig) -> int:
        if self.kind == "eltwise":
            return _ceil(self.out_shape.channels, hw.core.par_out)
        return _ceil(self.in_ch, hw.core.par_in) * _ceil(self.out_ch, hw.core.par_out)

    def cycles(self, hw: HardwareConfig, rows: int | None = None) -> int:
        h = self.out_shape.height if rows is None else rows
        return h * self.out_shape.width * self.blocks(hw)

    def input_rows(self, lo: int, hi: int) -> tuple[int, int]:
        """Input rows ``[a, b)`` needed for output rows ``[lo, hi)``."""
        h_in = self.in_shape.height
        if self.kind == "conv":
            a = lo * self.stride - self.padding
            b = (hi - 1) * self.stride - self.padding + self.kernel
        elif self.kind == "tconv":
            a = -((-(lo + self.padding - self.kernel + 1)) // self.stride)
            b = (hi - 1 + self.padding) // self.stride + 1
        else:
            a, b = lo, hi
        return max(a, 0), min(b, h_in)


@dataclass
class Tile:
    chain: list[str]
    start_row: int
    n_rows: int
    channel_blocks: int = 1


@dataclass(frozen=True)
class Transfer:
    src: str
    dst: str
    nbytes: int
    tensor: str


@dataclass
class ExecNode:
    mode: str  # "horizontal" | "vertical"
    chain: list[str]
    tiles: list[Tile]
    transfers: list[Transfer]
    cycles: int
    core_runs: int
    layer_cycles: dict[str, int] = field(default_factory=dict)
    layer_runs: dict[str, int] = field(default_factory=dict)

    @property
    def ddr_bytes(self) -> int:
        return sum(t.nbytes for t in self.transfers if "ddr" in (t.src, t.dst))


@dataclass
class Schedule:
    mode: str
    nodes: list[ExecNode]
    units: dict[str, Unit]
    weight_bytes: int
    input_bytes: int
    output_bytes: int
    tensor_bytes: dict[str, int]
    graph_inputs: list[str]
    graph_outputs: list[str]

    def covered(self) -> list[str]:
        return [n for e in self.nodes for u in e.chain for n in self.units[u].nodes]


def _fm_bits(qassign, tensor: str) -> int:
    if qassign is None:
        return DEFAULT_FM_BITS
    spec = qassign.feature_maps.get(tensor)
    return DEFAULT_FM_BITS if spec is None else spec.bits


def lower(graph: Graph, qassign=None, input_shapes=None) -> tuple[list[Unit], dict[str, int], dict[str, list[str]], list[str]]:
    """Group nodes into units; returns units, tensor byte sizes, alias map and head tensors."""
    shapes = infer_shapes(graph, input_shapes)
    alias: dict[str, list[str]] = {}
    fused_into: dict[str, str] = {}
    units: list[Unit] = []
    tensor_bytes: dict[str, int] = {}

    def physical(nid: str) -> list[str]:
        return alias[nid]

    for nid in graph.topo_order():
        if nid in fused_into:
            continue
        node = graph[nid]
        preds = graph.predecessors(nid)
        if isinstance(node, Input):
            alias[nid] = [nid]
            tensor_bytes[nid] = shapes[nid].numel * _fm_bits(qassign, nid) // 8
            continue
        if isinstance(node, Head):
            alias[nid] = physical(preds[0])
            continue
        if isinstance(node, Concat):
            alias[nid] = [t for p in preds for t in physical(p)]
            continue
        fused = [nid]
        cur = nid
        if isinstance(node, (Conv, TransposedConv, Add)):
            while True:
                cons = graph.consumers(cur)
                if len(cons) != 1:
                    break
                nxt = cons[0]
                if not isinstance(graph[nxt], (BatchNorm, ReLU)) or len(graph.predecessors(nxt)) != 1:
                    break
                if isinstance(node, Add) and isinstance(graph[nxt], BatchNorm):
                    break
                fused.append(nxt)
                cur = nxt
        for f in fused[1:]:
            fused_into[f] = nid
        out = fused[-1]
        ins = [t for p in preds for t in physical(p)]
        x_shape = shapes[preds[0]]
        if isinstance(node, (Conv, TransposedConv)):
            u = Unit(
                name=nid,
                kind="conv" if isinstance(node, Conv) else "tconv",
                nodes=fused,
                inputs=ins,
                output=out,
                out_shape=shapes[out],
                in_shape=x_shape,
                kernel=node.kernel,
                stride=node.stride,
                padding=node.padding,
                in_ch=node.in_ch,
                out_ch=node.out_ch,
                weight_bytes=(node.weight.size + node.bias.size) * WEIGHT_BYTES,
            )
        else:
            u = Unit(nid, "eltwise", fused, ins, out, shapes[out], x_shape, in_ch=shapes[out].channels, out_ch=shapes[out].channels)
        units.append(u)
        for f in fused:
            alias[f] = [out]
        tensor_bytes[out] = shapes[out].numel * _fm_bits(qassign, out) // 8
    head_tensors = []
    for h in graph.heads:
        for t in alias[h]:
            if t not in head_tensors:
                head_tensors.append(t)
    return units, tensor_bytes, alias, head_tensors


def _row_bytes(shape: TensorShape, bits: int) -> int:
    return shape.width * shape.channels * bits // 8


@dataclass
class _Segment:
    units: list[Unit]
    band: int
    tiles: list[list[tuple[int, int]]]  # per tile, output row range per unit
    in_rows: list[tuple[int, int]]  # per tile, rows of the segment input read
    ddr_bytes: int


def _band_plan(seg: list[Unit], band: int):
    last = seg[-1]
    h = last.out_shape.height
    tiles, in_rows = [], []
    for start in range(0, h, band):
        lo, hi = start, min(start + band, h)
        ranges = [None] * len(seg)
        for i in range(len(seg) - 1, -1, -1):
            ranges[i] = (lo, hi)
            lo, hi = seg[i].input_rows(lo, hi)
        tiles.append(ranges)
        in_rows.append((lo, hi))
    return tiles, in_rows


def _working_set(seg: list[Unit], tiles, in_rows, bits_of) -> int:
    wbytes = sum(u.weight_bytes for u in seg)
    worst = 0
    first = seg[0]
    in_tensor = first.inputs[0]
    for ranges, (a, b) in zip(tiles, in_rows):
        total = (b - a) * _row_bytes(first.in_shape, bits_of(in_tensor))
        for u, (lo, hi) in zip(seg, ranges):
            total += (hi - lo) * _row_bytes(u.out_shape, bits_of(u.output))
        worst = max(worst, total)
    return worst + wbytes


def _vertical(seg: list[Unit], hw: HardwareConfig, bits_of) -> _Segment | None:
    """Cheapest (in DDR bytes) row band whose working set fits SDRAM; None when no band fits.

    Ties go to the taller band.  Scanning every band height, rather than
    taking the tallest that fits, keeps the cost monotone in tensor sizes.
    """
    h = seg[-1].out_shape.height
    cap = hw.memory.sdram_bytes
    first, last = seg[0], seg[-1]
    in_row = _row_bytes(first.in_shape, bits_of(first.inputs[0]))
    wbytes = sum(u.weight_bytes for u in seg)
    out_bytes = h * _row_bytes(last.out_shape, bits_of(last.output))
    best = None
    for band in range(h, 0, -1):
        tiles, in_rows = _band_plan(seg, band)
        if _working_set(seg, tiles, in_rows, bits_of) > cap:
            continue
        ddr = sum((b - a) * in_row for a, b in in_rows) + len(tiles) * wbytes + out_bytes
        if best is None or ddr < best.ddr_bytes:
            best = _Segment(seg, band, tiles, in_rows, ddr)
    return best


def _horizontal_bytes(u: Unit, tensor_bytes: Mapping[str, int]) -> int:
    return sum(tensor_bytes[t] for t in u.inputs) + u.weight_bytes + tensor_bytes[u.output]


def _check_feasible(u: Unit, hw: HardwareConfig, bits_of) -> None:
    if u.kind in ("conv", "tconv") and u.kernel > hw.core.kernel:
        raise Infeasible(f"{u.name}: kernel {u.kernel} exceeds the core window")
    a, b = u.input_rows(0, 1)
    need = sum((b - a) * _row_bytes(u.in_shape if i == 0 else u.in_shape, bits_of(t)) for i, t in enumerate(u.inputs))
    need += _row_bytes(u.out_shape, bits_of(u.output)) + u.weight_bytes
    if need > hw.memory.sdram_bytes + hw.memory.local_bytes:
        raise Infeasible(f"{u.name}: one-row working set of {need} bytes exceeds on-chip memory")


def _horizontal_node(u: Unit, hw: HardwareConfig, tensor_bytes) -> ExecNode:
    transfers = [Transfer("ddr", "sdram", tensor_bytes[t], t) for t in u.inputs]
    if u.weight_bytes:
        transfers.append(Transfer("ddr", "sdram", u.weight_bytes, f"weights:{u.name}"))
    transfers.append(Transfer("sdram", "ddr", tensor_bytes[u.output], u.output))
    cyc = u.cycles(hw)
    runs = u.blocks(hw)
    return ExecNode(
        "horizontal",
        [u.name],
        [Tile([u.name], 0, u.out_shape.height)],
        transfers,
        cyc,
        runs,
        {u.name: cyc},
        {u.name: runs},
    )


def _vertical_node(seg: _Segment, hw: HardwareConfig, bits_of) -> ExecNode:
    units = seg.units
    names = [u.name for u in units]
    first, last = units[0], units[-1]
    in_row = _row_bytes(first.in_shape, bits_of(first.inputs[0]))
    out_row = _row_bytes(last.out_shape, bits_of(last.output))
    transfers, tiles = [], []
    layer_cycles = {n: 0 for n in names}
    layer_runs = {n: 0 for n in names}
    for ranges, (a, b) in zip(seg.tiles, seg.in_rows):
        transfers.append(Transfer("ddr", "sdram", (b - a) * in_row, first.inputs[0]))
        for u, (lo, hi) in zip(units, ranges):
            transfers.append(Transfer("ddr", "sdram", u.weight_bytes, f"weights:{u.name}"))
            layer_cycles[u.name] += u.cycles(hw, rows=hi - lo)
            layer_runs[u.name] += u.blocks(hw)
        lo, hi = ranges[-1]
        transfers.append(Transfer("sdram", "ddr", (hi - lo) * out_row, last.output))
        tiles.append(Tile(names, lo, hi - lo))
    return ExecNode(
        "vertical",
        names,
        tiles,
        transfers,
        sum(layer_cycles.values()),
        sum(layer_runs.values()),
        layer_cycles,
        layer_runs,
    )


def _linear_runs(units: list[Unit], head_tensors) -> list[list[Unit]]:
    """Maximal runs of conv units where each output feeds exactly the next unit and nothing else.

    Runs are returned in the topological position of their first unit, which
    keeps the emitted order a valid dataflow order.
    """
    consumers: dict[str, list[str]] = {}
    for u in units:
        for t in u.inputs:
            consumers.setdefault(t, []).append(u.name)
    by_name = {u.name: u for u in units}
    nxt: dict[str, str] = {}
    for u in units:
        cons = consumers.get(u.output, [])
        if u.kind not in ("conv", "tconv") or len(cons) != 1 or u.output in head_tensors:
            continue
        v = by_name[cons[0]]
        if v.kind in ("conv", "tconv") and v.inputs == [u.output]:
            nxt[u.name] = v.name
    has_prev = set(nxt.values())
    runs = []
    for u in units:
        if u.name in has_prev:
            continue
        run = [u]
        while run[-1].name in nxt:
            run.append(by_name[nxt[run[-1].name]])
        runs.append(run)
    return runs


def build_schedule(graph: Graph, hw: HardwareConfig = HardwareConfig(), qassign=None, mode: str = "chained", input_shapes=None) -> Schedule:
    """Lower ``graph`` into an ordered list of execution nodes.

    ``naive`` runs every unit horizontally with DDR round trips.  ``chained``
    splits each maximal single-consumer run of convs into segments by dynamic
    programming over DDR bytes; a segment of two or more units runs
    vertically with the largest row band whose working set fits SDRAM.
    """
    if mode not in ("naive", "chained"):
        raise ValueError(f"unknown schedule mode {mode!r}")
    units, tensor_bytes, alias, head_tensors = lower(graph, qassign, input_shapes)

    def bits_of(t):
        return _fm_bits(qassign, t)

    for u in units:
        _check_feasible(u, hw, bits_of)
    nodes: list[ExecNode] = []
    if mode == "naive":
        nodes = [_horizontal_node(u, hw, tensor_bytes) for u in units]
    else:
        for run in _linear_runs(units, head_tensors):
            nodes.extend(_partition(run, hw, tensor_bytes, bits_of))
    unit_map = {u.name: u for u in units}
    return Schedule(
        mode=mode,
        nodes=nodes,
        units=unit_map,
        weight_bytes=sum(u.weight_bytes for u in units),
        input_bytes=sum(tensor_bytes[i] for i in graph.inputs),
        output_bytes=sum(tensor_bytes[t] for t in head_tensors),
        tensor_bytes=tensor_bytes,
        graph_inputs=list(graph.inputs),
        graph_outputs=head_tensors,
    )


def _partition(run: list[Unit], hw: HardwareConfig, tensor_bytes, bits_of) -> list[ExecNode]:
    n = len(run)
    # best[i] = (ddr bytes, segments) for run[:i]
    best: list[tuple[int, int, list]] = [(0, 0, [])] + [None] * n  # type: ignore[list-item]
    for j in range(1, n + 1):
        for i in range(j - 1, -1, -1):
            if best[i] is None:
                continue
            if j - i == 1:
                cost, seg = _horizontal_bytes(run[i], tensor_bytes), ("h", run[i])
            else:
                v = _vertical(run[i:j], hw, bits_of)
                if v is None:
                    break  # longer segments starting earlier only grow
                cost, seg = v.ddr_bytes, ("v", v)
            cand = (best[i][0] + cost, best[i][1] + 1, best[i][2] + [seg])
            if best[j] is None or (cand[0], cand[1]) < (best[j][0], best[j][1]):
                best[j] = cand
    out = []
    for kind, seg in best[n][2]:
        out.append(_horizontal_node(seg, hw, tensor_bytes) if kind == "h" else _vertical_node(seg, hw, bits_of))
    return out


# --------------------------------------------------------------------------
# simulation


@dataclass
class LayerStats:
    name: str
    mode: str
    cycles: int
    core_runs: int
    ddr_bytes: int
    time_s: float


@dataclass
class SimReport:
    runtime_s: float
    fps: float
    ddr_bytes: int
    bandwidth_gbps: float
    peak_ddr_bytes: int
    footprint_mb: float
    utilization: float
    cycles: int
    core_runs: int
    per_layer: list[LayerStats]
    tensor_ddr_bytes: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "fps": self.fps,
            "bandwidth_gbps": self.bandwidth_gbps,
            "footprint_mb": self.footprint_mb,
            "runtime_s": self.runtime_s,
            "ddr_bytes": self.ddr_bytes,
            "peak_ddr_bytes": self.peak_ddr_bytes,
            "utilization": self.utilization,
            "cycles": self.cycles,
            "core_runs": self.core_runs,
            "per_layer": [asdict(p) for p in self.per_layer],
            "tensor_ddr_bytes": dict(self.tensor_ddr_bytes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def per_layer_csv(self, path: str | Path) -> None:
        lines = ["name,mode,cycles,core_runs,ddr_bytes,time_s"]
        lines += [f"{p.name},{p.mode},{p.cycles},{p.core_runs},{p.ddr_bytes},{p.time_s:.9g}" for p in self.per_layer]
        Path(path).write_text("\n".join(lines) + "\n")


def simulate(schedule: Schedule, hw: HardwareConfig = HardwareConfig()) -> SimReport:
    """Runtime, DDR traffic and DDR footprint of one frame (``cameras_per_frame`` images).

    Per execution node, compute and DMA overlap (double buffering), so its
    time is ``max(cycles / clock, ddr_bytes / bandwidth)`` plus a fixed setup
    cost per transfer.  Images of a frame run back to back.
    """
    clock = hw.core.clock_hz
    bw = hw.memory.ddr_bandwidth
    cams = hw.cameras_per_frame
    per_layer: list[LayerStats] = []
    t_image = 0.0
    bytes_image = 0
    cycles = 0
    runs = 0
    tensor_traffic: dict[str, int] = {}
    for node in schedule.nodes:
        nbytes = node.ddr_bytes
        n_dma = sum(1 for t in node.transfers if t.nbytes > 0)
        t = max(node.cycles / clock, nbytes / bw) + n_dma * hw.dma_setup_cycles / clock
        t_image += t
        bytes_image += nbytes
        cycles += node.cycles
        runs += node.core_runs
        for tr in node.transfers:
            if not tr.tensor.startswith("weights:"):
                tensor_traffic[tr.tensor] = tensor_traffic.get(tr.tensor, 0) + tr.nbytes
        share = {name: 0 for name in node.chain}
        for tr in node.transfers:
            if tr.tensor.startswith("weights:"):
                share[tr.tensor.split(":", 1)[1]] += tr.nbytes
            elif tr.src == "ddr":
                share[node.chain[0]] += tr.nbytes
            else:
                share[node.chain[-1]] += tr.nbytes
        total_c = max(node.cycles, 1)
        for name in node.chain:
            per_layer.append(
                LayerStats(name, node.mode, node.layer_cycles[name], node.layer_runs[name], share[name], t * node.layer_cycles[name] / total_c)
            )
    runtime = cams * t_image
    ddr = cams * bytes_image
    peak = _peak_ddr(schedule, cams)
    return SimReport(
        runtime_s=runtime,
        fps=1.0 / runtime if runtime > 0 else 0.0,
        ddr_bytes=ddr,
        bandwidth_gbps=ddr / runtime / 1e9 if runtime > 0 else 0.0,
        peak_ddr_bytes=peak,
        footprint_mb=peak / 2**20,
        utilization=(cams * cycles / clock) / runtime if runtime > 0 else 0.0,
        cycles=cams * cycles,
        core_runs=cams * runs,
        per_layer=per_layer,
        tensor_ddr_bytes={k: cams * v for k, v in sorted(tensor_traffic.items())},
    )


def _peak_ddr(schedule: Schedule, cams: int) -> int:
    """Weights + frame buffers for every camera + peak of simultaneously live intermediate buffers."""
    frame = set(schedule.graph_inputs) | set(schedule.graph_outputs)
    written: dict[str, int] = {}
    last_read: dict[str, int] = {}
    for i, node in enumerate(schedule.nodes):
        for tr in node.transfers:
            if tr.tensor.startswith("weights:") or tr.tensor in frame:
                continue
            if tr.dst == "ddr":
                written.setdefault(tr.tensor, i)
            elif tr.src == "ddr":
                last_read[tr.tensor] = i
    peak = 0
    for i in range(len(schedule.nodes)):
        live = sum(schedule.tensor_bytes[t] for t, w in written.items() if w <= i <= last_read.get(t, w))
        peak = max(peak, live)
    frames = sum(schedule.tensor_bytes[t] for t in frame)
    return schedule.weight_bytes + cams * frames + peak


def lower_bounds(graph: Graph, hw: HardwareConfig = HardwareConfig(), qassign=None, input_shapes=None) -> dict[str, float]:
    """Roofline-style floors: pure compute time, and time to move weights, inputs and outputs once."""
    units, tensor_bytes, _, head_tensors = lower(graph, qassign, input_shapes)
    cams = hw.cameras_per_frame
    compute = sum(u.cycles(hw) for u in units) / hw.core.clock_hz * cams
    moved = sum(u.weight_bytes for u in units) + sum(tensor_bytes[i] for i in graph.inputs) + sum(tensor_bytes[t] for t in head_tensors)
    return {"compute_lb_s": compute, "transfer_lb_s": moved / hw.memory.ddr_bandwidth * cams}


def run_sim(graph: Graph, hw: HardwareConfig = HardwareConfig(), qassign=None, mode: str = "chained", input_shapes=None) -> SimReport:
    return simulate(build_schedule(graph, hw, qassign, mode, input_shapes), hw)


def schedule_to_dict(schedule: Schedule) -> dict:
    return {
        "mode": schedule.mode,
        "weight_bytes": schedule.weight_bytes,
        "nodes": [
            {
                "mode": n.mode,
                "chain": n.chain,
                "tiles": [{"start_row": t.start_row, "n_rows": t.n_rows} for t in n.tiles],
                "transfers": [asdict(t) for t in n.transfers],
                "cycles": n.cycles,
                "core_runs": n.core_runs,
            }
            for n in schedule.nodes
        ],
    }
