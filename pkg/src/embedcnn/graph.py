"""Compute-graph representation of multi-task CNNs.

A :class:`Graph` is an immutable DAG of typed layer nodes.  Weight arrays are
stored read-only on the nodes, so every transform (training step, pruning,
BatchNorm folding) builds a new graph instead of editing one in place.

Tensors are channel-first ``(C, H, W)`` per sample; batched execution in
:mod:`embedcnn.engine` prepends a batch axis.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import ClassVar, Iterable, Mapping, Sequence

import numpy as np

MAX_KERNEL = 5


class Task(str, enum.Enum):
    DETECTION = "detection"
    SEGMENTATION = "segmentation"
    SOILING = "soiling"


class GraphError(Exception):
    """Base class for graph construction and analysis failures."""


class ShapeMismatch(GraphError):
    def __init__(self, edge: "Edge | None", message: str):
        super().__init__(message if edge is None else f"{edge.src} -> {edge.dst}[{edge.slot}]: {message}")
        self.edge = edge


class CycleError(GraphError):
    pass


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"TensorShape.{name} must be a positive integer, got {value!r}")

    @property
    def numel(self) -> int:
        return self.channels * self.height * self.width

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float32, copy=True)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# node kinds


@dataclass(frozen=True, eq=False)
class Input:
    shape: TensorShape
    kind = "input"
    params: ClassVar[tuple[str, ...]] = ()


@dataclass(frozen=True, eq=False)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int
    weight: np.ndarray
    bias: np.ndarray
    kind = "conv"
    params: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))


@dataclass(frozen=True, eq=False)
class TransposedConv:
    """Learned upsampling; ``weight`` is laid out ``[out_ch, in_ch, k, k]`` like :class:`Conv`."""

    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    weight: np.ndarray
    bias: np.ndarray
    padding: int = 0
    kind = "tconv"
    params: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))


@dataclass(frozen=True, eq=False)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    kind = "batchnorm"
    params: ClassVar[tuple[str, ...]] = ("gamma", "beta", "running_mean", "running_var")

    def __post_init__(self):
        for name in self.params:
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])


@dataclass(frozen=True, eq=False)
class ReLU:
    kind = "relu"
    params: ClassVar[tuple[str, ...]] = ()


@dataclass(frozen=True, eq=False)
class Concat:
    kind = "concat"
    params: ClassVar[tuple[str, ...]] = ()


@dataclass(frozen=True, eq=False)
class Add:
    kind = "add"
    params: ClassVar[tuple[str, ...]] = ()


@dataclass(frozen=True, eq=False)
class Head:
    task: Task
    kind = "head"
    params: ClassVar[tuple[str, ...]] = ()


NodeKind = Input | Conv | TransposedConv | BatchNorm | ReLU | Concat | Add | Head

TRAINABLE = {"weight", "bias", "gamma", "beta"}
CONV_KINDS = (Conv, TransposedConv)
# ops whose output channel c depends only on input channel c
CHANNELWISE = (BatchNorm, ReLU, Head)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    slot: int = 0


# --------------------------------------------------------------------------
# graph


class Graph:
    """Immutable DAG of named layer nodes.

    ``edges`` carry an input slot so that operand order is explicit for
    :class:`Concat`.  ``inputs`` lists the :class:`Input` node ids and ``heads``
    the :class:`Head` node ids, in a stable order.
    """

    def __init__(
        self,
        nodes: Mapping[str, NodeKind] | Iterable[tuple[str, NodeKind]],
        edges: Iterable[Edge],
        inputs: Sequence[str] | None = None,
        heads: Sequence[str] | None = None,
    ):
        items = list(nodes.items()) if isinstance(nodes, Mapping) else list(nodes)
        self._nodes: dict[str, NodeKind] = dict(items)
        if len(self._nodes) != len(items):
            raise GraphError("duplicate node id")
        self._edges: tuple[Edge, ...] = tuple(edges)
        if inputs is None:
            inputs = [n for n, k in self._nodes.items() if isinstance(k, Input)]
        if heads is None:
            heads = [n for n, k in self._nodes.items() if isinstance(k, Head)]
        self._inputs = tuple(inputs)
        self._heads = tuple(heads)
        self._preds: dict[str, list[str]] = defaultdict(list)
        self._succs: dict[str, list[str]] = defaultdict(list)
        for e in sorted(self._edges, key=lambda e: (e.dst, e.slot)):
            self._preds[e.dst].append(e.src)
        for e in self._edges:
            self._succs[e.src].append(e.dst)
        self._topo: list[str] | None = None

    # -- accessors ---------------------------------------------------------

    @property
    def nodes(self) -> dict[str, NodeKind]:
        return dict(self._nodes)

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self._edges

    @property
    def inputs(self) -> tuple[str, ...]:
        return self._inputs

    @property
    def heads(self) -> tuple[str, ...]:
        return self._heads

    def __getitem__(self, node_id: str) -> NodeKind:
        return self._nodes[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def predecessors(self, node_id: str) -> list[str]:
        """Producers feeding ``node_id``, ordered by input slot."""
        return list(self._preds.get(node_id, ()))

    def consumers(self, node_id: str) -> list[str]:
        return list(self._succs.get(node_id, ()))

    def topo_order(self) -> list[str]:
        """Kahn ordering; ties resolved by node insertion order."""
        if self._topo is not None:
            return list(self._topo)
        rank = {n: i for i, n in enumerate(self._nodes)}
        indeg = {n: 0 for n in self._nodes}
        for e in self._edges:
            if e.dst in indeg and e.src in indeg:
                indeg[e.dst] += 1
        ready = sorted((n for n, d in indeg.items() if d == 0), key=rank.__getitem__)
        queue = deque(ready)
        order = []
        while queue:
            n = queue.popleft()
            order.append(n)
            newly = []
            for m in self._succs.get(n, ()):
                if m not in indeg:
                    continue
                indeg[m] -= 1
                if indeg[m] == 0:
                    newly.append(m)
            for m in sorted(newly, key=rank.__getitem__):
                queue.append(m)
        if len(order) != len(self._nodes):
            stuck = sorted(n for n, d in indeg.items() if d > 0)
            raise CycleError(f"graph contains a cycle through {stuck}")
        self._topo = order
        return list(order)

    # -- parameters ----------------------------------------------------------

    def params(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        """All parameter tensors keyed ``"<node>.<slot>"`` in topological order."""
        out = {}
        for nid, node in self._nodes.items():
            for slot in node.params:
                if trainable_only and slot not in TRAINABLE:
                    continue
                out[f"{nid}.{slot}"] = getattr(node, slot)
        return out

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "Graph":
        """New graph with the named parameter tensors replaced (shapes must match)."""
        per_node: dict[str, dict[str, np.ndarray]] = defaultdict(dict)
        for key, value in updates.items():
            nid, slot = key.rsplit(".", 1)
            node = self._nodes[nid]
            if slot not in node.params:
                raise KeyError(key)
            if np.shape(value) != getattr(node, slot).shape:
                raise ValueError(f"{key}: shape {np.shape(value)} != {getattr(node, slot).shape}")
            per_node[nid][slot] = value
        nodes = {nid: (replace(node, **per_node[nid]) if nid in per_node else node) for nid, node in self._nodes.items()}
        return Graph(nodes, self._edges, self._inputs, self._heads)

    def with_nodes(self, nodes: Mapping[str, NodeKind]) -> "Graph":
        """New graph with the given node ids swapped for new node objects."""
        merged = {nid: nodes.get(nid, node) for nid, node in self._nodes.items()}
        return Graph(merged, self._edges, self._inputs, self._heads)

    def head_tasks(self) -> dict[Task, str]:
        return {self._nodes[h].task: h for h in self._heads}


# --------------------------------------------------------------------------
# construction helper


class GraphBuilder:
    """Imperative helper for assembling graphs with initialized weights.

    Conv weights use He-normal initialization drawn from ``rng``; BatchNorm
    starts as the identity (gamma=1, beta=0, mean=0, var=1).
    """

    def __init__(self, rng: np.random.Generator | int | None = 0):
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self._nodes: dict[str, NodeKind] = {}
        self._edges: list[Edge] = []
        self._shapes: dict[str, TensorShape] = {}

    def _add(self, nid: str, node: NodeKind, srcs: Sequence[str], shape: TensorShape) -> str:
        if nid in self._nodes:
            raise GraphError(f"duplicate node id {nid!r}")
        self._nodes[nid] = node
        self._edges.extend(Edge(s, nid, i) for i, s in enumerate(srcs))
        self._shapes[nid] = shape
        return nid

    def shape(self, nid: str) -> TensorShape:
        return self._shapes[nid]

    def input(self, nid: str, shape: Sequence[int] | TensorShape) -> str:
        shape = shape if isinstance(shape, TensorShape) else TensorShape(*shape)
        return self._add(nid, Input(shape), [], shape)

    def conv(self, nid, src, out_ch, kernel=5, stride=1, padding=None, weight=None, bias=None) -> str:
        s = self._shapes[src]
        padding = (kernel - 1) // 2 if padding is None else padding
        if weight is None:
            std = math.sqrt(2.0 / (s.channels * kernel * kernel))
            weight = self.rng.normal(0.0, std, (out_ch, s.channels, kernel, kernel))
        if bias is None:
            bias = np.zeros(out_ch)
        node = Conv(s.channels, out_ch, kernel, stride, padding, weight, bias)
        ho = (s.height + 2 * padding - kernel) // stride + 1
        wo = (s.width + 2 * padding - kernel) // stride + 1
        return self._add(nid, node, [src], TensorShape(out_ch, max(ho, 1), max(wo, 1)))

    def tconv(self, nid, src, out_ch, kernel=2, stride=2, padding=0, weight=None, bias=None) -> str:
        s = self._shapes[src]
        if weight is None:
            std = math.sqrt(2.0 / (s.channels * kernel * kernel / (stride * stride)))
            weight = self.rng.normal(0.0, std, (out_ch, s.channels, kernel, kernel))
        if bias is None:
            bias = np.zeros(out_ch)
        node = TransposedConv(s.channels, out_ch, kernel, stride, weight, bias, padding)
        ho = (s.height - 1) * stride - 2 * padding + kernel
        wo = (s.width - 1) * stride - 2 * padding + kernel
        return self._add(nid, node, [src], TensorShape(out_ch, ho, wo))

    def bn(self, nid, src, eps=1e-5) -> str:
        c = self._shapes[src].channels
        node = BatchNorm(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), eps)
        return self._add(nid, node, [src], self._shapes[src])

    def relu(self, nid, src) -> str:
        return self._add(nid, ReLU(), [src], self._shapes[src])

    def conv_bn_relu(self, nid, src, out_ch, kernel=5, stride=1) -> str:
        c = self.conv(nid, src, out_ch, kernel, stride)
        b = self.bn(f"{nid}_bn", c)
        return self.relu(f"{nid}_relu", b)

    def concat(self, nid, srcs: Sequence[str]) -> str:
        shapes = [self._shapes[s] for s in srcs]
        c = sum(s.channels for s in shapes)
        return self._add(nid, Concat(), srcs, TensorShape(c, shapes[0].height, shapes[0].width))

    def add(self, nid, srcs: Sequence[str]) -> str:
        return self._add(nid, Add(), srcs, self._shapes[srcs[0]])

    def head(self, nid, src, task: Task | str) -> str:
        return self._add(nid, Head(Task(task)), [src], self._shapes[src])

    def build(self) -> Graph:
        return Graph(dict(self._nodes), list(self._edges))


# --------------------------------------------------------------------------
# analyses


class ViolationKind(str, enum.Enum):
    CYCLE = "Cycle"
    SHAPE_MISMATCH = "ShapeMismatch"
    DANGLING_NODE = "DanglingNode"
    KERNEL_EXCEEDS_CORE = "KernelExceedsCore"
    EVEN_KERNEL = "EvenKernel"
    BAD_STRIDE = "BadStride"
    WEIGHT_SHAPE = "WeightShape"
    BAD_ARITY = "BadArity"
    NON_POSITIVE_VARIANCE = "NonPositiveVariance"
    UNKNOWN_NODE = "UnknownNode"
    BAD_IO = "BadIO"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    node: str | None
    message: str = field(default="", compare=False)


_ARITY = {Input: (0, 0), Conv: (1, 1), TransposedConv: (1, 1), BatchNorm: (1, 1), ReLU: (1, 1), Head: (1, 1), Add: (2, None), Concat: (1, None)}


def _node_violations(nid: str, node: NodeKind) -> list[Violation]:
    out = []
    if isinstance(node, CONV_KINDS):
        if node.kernel > MAX_KERNEL:
            out.append(Violation(ViolationKind.KERNEL_EXCEEDS_CORE, nid, f"kernel {node.kernel} > {MAX_KERNEL}"))
        if isinstance(node, Conv) and node.kernel % 2 == 0:
            out.append(Violation(ViolationKind.EVEN_KERNEL, nid, f"kernel {node.kernel} is even"))
        if node.stride not in (1, 2):
            out.append(Violation(ViolationKind.BAD_STRIDE, nid, f"stride {node.stride}"))
        expect = (node.out_ch, node.in_ch, node.kernel, node.kernel)
        if node.weight.shape != expect or node.bias.shape != (node.out_ch,):
            out.append(Violation(ViolationKind.WEIGHT_SHAPE, nid, f"weight {node.weight.shape} != {expect}"))
    elif isinstance(node, BatchNorm):
        shapes = {getattr(node, p).shape for p in node.params}
        if len(shapes) != 1 or len(next(iter(shapes))) != 1:
            out.append(Violation(ViolationKind.WEIGHT_SHAPE, nid, "BatchNorm arrays disagree"))
        if not np.all(node.running_var > 0):
            out.append(Violation(ViolationKind.NON_POSITIVE_VARIANCE, nid, "running_var must be > 0"))
        if not node.eps > 0:
            out.append(Violation(ViolationKind.NON_POSITIVE_VARIANCE, nid, "eps must be > 0"))
    return out


def validate(graph: Graph) -> list[Violation]:
    """Every structural problem of ``graph``; an empty list means valid.

    Never raises: problems are reported as :class:`Violation` records.
    """
    violations: list[Violation] = []
    nodes = graph.nodes
    for e in graph.edges:
        for end in (e.src, e.dst):
            if end not in nodes:
                violations.append(Violation(ViolationKind.UNKNOWN_NODE, end, f"edge {e} references unknown node"))
    for nid in graph.inputs:
        if not isinstance(nodes.get(nid), Input):
            violations.append(Violation(ViolationKind.BAD_IO, nid, "declared input is not an Input node"))
    for nid in graph.heads:
        if not isinstance(nodes.get(nid), Head):
            violations.append(Violation(ViolationKind.BAD_IO, nid, "declared head is not a Head node"))
    if violations:
        return violations

    for nid, node in nodes.items():
        lo, hi = _ARITY[type(node)]
        n = len(graph.predecessors(nid))
        if n < lo or (hi is not None and n > hi):
            violations.append(Violation(ViolationKind.BAD_ARITY, nid, f"{type(node).__name__} has {n} inputs"))
        violations.extend(_node_violations(nid, node))

    try:
        graph.topo_order()
    except CycleError as exc:
        violations.append(Violation(ViolationKind.CYCLE, None, str(exc)))
        return violations

    reach_fwd = _reachable(graph, graph.inputs, graph.consumers)
    reach_bwd = _reachable(graph, graph.heads, graph.predecessors)
    for nid in nodes:
        if nid not in reach_fwd:
            violations.append(Violation(ViolationKind.DANGLING_NODE, nid, "not reachable from any input"))
        elif nid not in reach_bwd:
            violations.append(Violation(ViolationKind.DANGLING_NODE, nid, "does not feed any head"))

    if not any(v.kind is ViolationKind.BAD_ARITY for v in violations):
        try:
            infer_shapes(graph)
        except ShapeMismatch as exc:
            violations.append(Violation(ViolationKind.SHAPE_MISMATCH, exc.edge.dst if exc.edge else None, str(exc)))
    return violations


def _reachable(graph: Graph, starts: Iterable[str], step) -> set[str]:
    seen = set(starts)
    queue = deque(seen)
    while queue:
        n = queue.popleft()
        for m in step(n):
            if m not in seen:
                seen.add(m)
                queue.append(m)
    return seen


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def tconv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def infer_shapes(graph: Graph, input_shapes: Mapping[str, TensorShape | Sequence[int]] | None = None) -> dict[str, TensorShape]:
    """Output shape of every node.  ``input_shapes`` overrides the shapes stored on Input nodes."""
    overrides = {k: (v if isinstance(v, TensorShape) else TensorShape(*v)) for k, v in (input_shapes or {}).items()}
    shapes: dict[str, TensorShape] = {}
    for nid in graph.topo_order():
        node = graph[nid]
        preds = graph.predecessors(nid)
        edges = [Edge(p, nid, i) for i, p in enumerate(preds)]
        ins = [shapes[p] for p in preds]
        if isinstance(node, Input):
            shapes[nid] = overrides.get(nid, node.shape)
            continue
        if not ins:
            raise ShapeMismatch(None, f"{nid}: node has no inputs")
        x = ins[0]
        if isinstance(node, (Conv, TransposedConv)):
            if x.channels != node.in_ch:
                raise ShapeMismatch(edges[0], f"expected {node.in_ch} channels, got {x.channels}")
            size = conv_out_size if isinstance(node, Conv) else tconv_out_size
            ho = size(x.height, node.kernel, node.stride, node.padding)
            wo = size(x.width, node.kernel, node.stride, node.padding)
            if ho < 1 or wo < 1:
                raise ShapeMismatch(edges[0], f"output would be {ho}x{wo}")
            shapes[nid] = TensorShape(node.out_ch, ho, wo)
        elif isinstance(node, BatchNorm):
            if x.channels != node.channels:
                raise ShapeMismatch(edges[0], f"BatchNorm over {node.channels} channels, got {x.channels}")
            shapes[nid] = x
        elif isinstance(node, (ReLU, Head)):
            shapes[nid] = x
        elif isinstance(node, Add):
            for e, s in zip(edges[1:], ins[1:]):
                if s != x:
                    raise ShapeMismatch(e, f"Add operand {s.as_tuple()} != {x.as_tuple()}")
            shapes[nid] = x
        elif isinstance(node, Concat):
            for e, s in zip(edges[1:], ins[1:]):
                if (s.height, s.width) != (x.height, x.width):
                    raise ShapeMismatch(e, f"Concat spatial {s.height}x{s.width} != {x.height}x{x.width}")
            shapes[nid] = TensorShape(sum(s.channels for s in ins), x.height, x.width)
        else:  # pragma: no cover
            raise GraphError(f"unknown node kind {type(node)}")
    return shapes


def node_params(node: NodeKind) -> int:
    if isinstance(node, CONV_KINDS):
        return node.out_ch * node.in_ch * node.kernel**2 + node.out_ch
    if isinstance(node, BatchNorm):
        return 4 * node.channels
    return 0


def count_params(graph: Graph) -> int:
    """Exact parameter count: conv weights + biases, and four arrays per BatchNorm."""
    return sum(node_params(node) for node in graph.nodes.values())


def node_flops(node: NodeKind, in_shapes: Sequence[TensorShape], out_shape: TensorShape) -> int:
    """FLOPs of one node with 1 MAC = 2 FLOPs.  Bias adds are not counted."""
    if isinstance(node, Conv):
        return 2 * node.kernel**2 * node.in_ch * node.out_ch * out_shape.height * out_shape.width
    if isinstance(node, TransposedConv):
        # every input pixel scatters a k x k patch into each output channel
        x = in_shapes[0]
        return 2 * node.kernel**2 * node.in_ch * node.out_ch * x.height * x.width
    if isinstance(node, BatchNorm):
        return 2 * out_shape.numel
    if isinstance(node, ReLU):
        return out_shape.numel
    if isinstance(node, Add):
        return (len(in_shapes) - 1) * out_shape.numel
    return 0


def count_flops(graph: Graph, input_shapes: Mapping[str, TensorShape | Sequence[int]] | None = None) -> int:
    shapes = infer_shapes(graph, input_shapes)
    total = 0
    for nid, node in graph.nodes.items():
        total += node_flops(node, [shapes[p] for p in graph.predecessors(nid)], shapes[nid])
    return total


@dataclass(frozen=True)
class ReceptiveField:
    """Receptive field of one tensor measured in full-resolution input pixels."""

    rf_size: float
    effective_stride: float
    offset: float
    covers_input: bool = False


def receptive_field(graph: Graph) -> dict[str, ReceptiveField]:
    """Receptive field of every head, in pixels of the largest input.

    Chain recurrence ``rf += (k-1)*jump; jump *= stride``.  Lower-resolution
    inputs (the UV planes) start with ``rf = jump = full_height / height``.
    Merge nodes take the maximum over their branches.
    """
    shapes = infer_shapes(graph)
    ref = max((shapes[i] for i in graph.inputs), key=lambda s: s.height * s.width)
    state: dict[str, tuple[float, float, float]] = {}
    for nid in graph.topo_order():
        node = graph[nid]
        preds = graph.predecessors(nid)
        if isinstance(node, Input):
            jump = ref.height / shapes[nid].height
            state[nid] = (jump, jump, (jump - 1) / 2)
            continue
        if isinstance(node, (Add, Concat)):
            state[nid] = max(state[p] for p in preds)
            continue
        rf, jump, start = state[preds[0]]
        if isinstance(node, Conv):
            rf = rf + (node.kernel - 1) * jump
            start = start + ((node.kernel - 1) / 2 - node.padding) * jump
            jump = jump * node.stride
        elif isinstance(node, TransposedConv):
            # an output pixel touches ceil(k / s) input pixels along each axis
            taps = -(-node.kernel // node.stride)
            rf = rf + (taps - 1) * jump
            jump = jump / node.stride
            start = start + ((node.kernel - 1) / 2 - node.padding) * jump
        state[nid] = (rf, jump, start)
    side = max(ref.height, ref.width)
    return {
        h: ReceptiveField(state[h][0], state[h][1], state[h][2], covers_input=state[h][0] >= side)
        for h in graph.heads
    }


def serial_chain_rf(kernels: Sequence[int], strides: Sequence[int]) -> int:
    """Closed form ``1 + sum_i (k_i - 1) * prod_{j<i} s_j`` for a serial conv chain."""
    rf, prod = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * prod
        prod *= s
    return rf
