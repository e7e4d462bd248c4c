"""Structured filter pruning with global score ranking.

Filters are scored with a data-independent criterion, ranked globally across
layers, and removed whole together with every downstream channel slice.
Filters whose output channels meet in an ``Add`` form a coupling group and
are removed jointly.  :func:`iterative_prune` alternates pruning and
fine-tuning until a FLOPs target is reached.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from embedcnn.graph import (
    CHANNELWISE,
    Add,
    BatchNorm,
    Concat,
    Conv,
    Graph,
    Head,
    Input,
    ReLU,
    TransposedConv,
    count_flops,
    count_params,
    infer_shapes,
    node_flops,
    TensorShape,
)
from embedcnn.engine import LossWeights, TrainConfig, evaluate, train
from embedcnn.taskbench import MetricsReport, Sample

log = logging.getLogger(__name__)

MIN_FILTERS = 4


class PruneError(Exception):
    pass


class CriterionInapplicable(PruneError):
    pass


class TargetUnreachable(PruneError):
    pass


class StructuralError(PruneError):
    pass


class PruneCriterion(str, enum.Enum):
    FILTER_NORM = "filternorm"
    BATCHNORM_GAMMA = "batchnorm"


@dataclass(frozen=True, order=True)
class FilterScore:
    node_id: str
    filter_index: int
    score: float


@dataclass(frozen=True)
class CouplingGroup:
    members: tuple[tuple[str, int], ...]
    prunable: bool = True

    @property
    def key(self) -> tuple[str, int]:
        return self.members[0]


@dataclass(frozen=True)
class PruneMask:
    filters: frozenset[tuple[str, int]] = frozenset()

    def __len__(self):
        return len(self.filters)

    def __contains__(self, item):
        return item in self.filters

    def to_json(self) -> str:
        per_node: dict[str, list[int]] = {}
        for nid, idx in sorted(self.filters):
            per_node.setdefault(nid, []).append(idx)
        return json.dumps({"filters": per_node}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PruneMask":
        doc = json.loads(text)
        return cls(frozenset((nid, int(i)) for nid, idxs in doc["filters"].items() for i in idxs))


# --------------------------------------------------------------------------
# channel provenance


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller label wins so roots are deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


@dataclass
class ChannelMap:
    """Channel identity of every tensor in a graph.

    ``roots[nid][c]`` is the coupling-group id of output channel ``c`` of node
    ``nid``.  ``labels`` maps a group id to its member labels: ``(conv_id,
    filter)`` for filters, ``("<input>", input_id, c)`` for input channels.
    """

    roots: dict[str, np.ndarray]
    labels: list[list[tuple]]


def channel_map(graph: Graph) -> ChannelMap:
    uf = _UnionFind()
    raw: dict[str, list[tuple]] = {}
    for nid in graph.topo_order():
        node = graph[nid]
        preds = graph.predecessors(nid)
        if isinstance(node, Input):
            raw[nid] = [("<input>", nid, c) for c in range(node.shape.channels)]
        elif isinstance(node, (Conv, TransposedConv)):
            raw[nid] = [(nid, c) for c in range(node.out_ch)]
        elif isinstance(node, CHANNELWISE):
            raw[nid] = raw[preds[0]]
        elif isinstance(node, Concat):
            raw[nid] = [lab for p in preds for lab in raw[p]]
        elif isinstance(node, Add):
            first = raw[preds[0]]
            for p in preds[1:]:
                for a, b in zip(first, raw[p]):
                    uf.union(a, b)
            raw[nid] = first
        else:  # pragma: no cover
            raise TypeError(type(node))
    ids: dict[tuple, int] = {}
    labels: list[list[tuple]] = []
    all_labels = sorted({lab for labs in raw.values() for lab in labs}, key=_label_key)
    for lab in all_labels:
        r = uf.find(lab)
        if r not in ids:
            ids[r] = len(labels)
            labels.append([])
        labels[ids[r]].append(lab)
    roots = {nid: np.array([ids[uf.find(lab)] for lab in labs], dtype=np.int64) for nid, labs in raw.items()}
    return ChannelMap(roots, labels)


def _label_key(lab: tuple):
    return tuple((0, x) if isinstance(x, int) else (1, str(x)) for x in lab)


def exempt_convs(graph: Graph) -> set[str]:
    """Convs whose output reaches a head through channel-wise ops only."""
    out = set()
    for nid, node in graph.nodes.items():
        if not isinstance(node, (Conv, TransposedConv)):
            continue
        frontier = [nid]
        while frontier:
            cur = frontier.pop()
            for c in graph.consumers(cur):
                if isinstance(graph[c], Head):
                    out.add(nid)
                elif isinstance(graph[c], (BatchNorm, ReLU)):
                    frontier.append(c)
    return out


def coupling_groups(graph: Graph) -> list[CouplingGroup]:
    """Filter groups that must be removed together, ordered by smallest member.

    A group is not prunable when it contains an input channel or a filter of
    a head-producing conv.
    """
    cmap = channel_map(graph)
    exempt = exempt_convs(graph)
    groups = []
    for labs in cmap.labels:
        filters = tuple(sorted((lab for lab in labs if lab[0] != "<input>"), key=_label_key))
        if not filters:
            continue
        prunable = len(filters) == len(labs) and not any(f[0] in exempt for f in filters)
        groups.append(CouplingGroup(filters, prunable))
    groups.sort(key=lambda g: _label_key(g.key))
    return groups


def bn_after(graph: Graph, conv_id: str) -> str | None:
    for c in graph.consumers(conv_id):
        if isinstance(graph[c], BatchNorm):
            return c
    return None


def score_filters(graph: Graph, criterion: PruneCriterion | str) -> list[FilterScore]:
    """One non-negative score per filter of every non-exempt conv.

    FilterNorm uses the mean absolute weight of the filter, so layers of
    different fan-in are comparable.  BatchNormGamma uses |gamma| of the
    BatchNorm directly consuming the conv.
    """
    criterion = PruneCriterion(criterion)
    exempt = exempt_convs(graph)
    scores = []
    for nid, node in graph.nodes.items():
        if not isinstance(node, (Conv, TransposedConv)) or nid in exempt:
            continue
        if criterion is PruneCriterion.FILTER_NORM:
            w = node.weight.astype(np.float64)
            vals = np.abs(w).reshape(node.out_ch, -1).sum(axis=1) / (node.in_ch * node.kernel**2)
        else:
            bn = bn_after(graph, nid)
            if bn is None:
                raise CriterionInapplicable(f"{nid} is not followed by a BatchNorm")
            vals = np.abs(graph[bn].gamma.astype(np.float64))
        scores.extend(FilterScore(nid, i, float(v)) for i, v in enumerate(vals))
    return scores


# --------------------------------------------------------------------------
# selection


class _FlopModel:
    """FLOPs and per-conv filter counts as a function of the removed channel groups."""

    def __init__(self, graph: Graph, cmap: ChannelMap):
        self.graph = graph
        self.cmap = cmap
        self.shapes = infer_shapes(graph)
        self.n_groups = len(cmap.labels)
        self.order = graph.topo_order()
        self.convs = [n for n in self.order if isinstance(graph[n], (Conv, TransposedConv))]

    def kept(self, removed: np.ndarray) -> dict[str, int]:
        return {nid: int((~removed[r]).sum()) for nid, r in self.cmap.roots.items()}

    def flops(self, removed: np.ndarray) -> int:
        kept = self.kept(removed)
        total = 0
        for nid in self.order:
            node = self.graph[nid]
            preds = self.graph.predecessors(nid)
            s = self.shapes[nid]
            if isinstance(node, Conv):
                total += 2 * node.kernel**2 * kept[preds[0]] * kept[nid] * s.height * s.width
            elif isinstance(node, TransposedConv):
                x = self.shapes[preds[0]]
                total += 2 * node.kernel**2 * kept[preds[0]] * kept[nid] * x.height * x.width
            elif isinstance(node, (BatchNorm, ReLU, Add)):
                ins = [TensorShape(1, self.shapes[p].height, self.shapes[p].width) for p in preds]
                total += kept[nid] * node_flops(node, ins, TensorShape(1, s.height, s.width))
        return total

    def min_filters(self, removed: np.ndarray) -> int:
        kept = self.kept(removed)
        return min((kept[c] for c in self.convs), default=MIN_FILTERS)


def select_prune_set(
    scores: Iterable[FilterScore],
    groups: Sequence[CouplingGroup],
    graph: Graph,
    flops_to_remove: float,
    min_filters: int = MIN_FILTERS,
) -> PruneMask:
    """Greedy global selection of whole groups, lowest summed score first.

    Groups are added until the exact FLOPs saving reaches ``flops_to_remove``.
    A group is skipped when it would leave any conv with fewer than
    ``min_filters`` filters.  Ties are broken by the group's smallest
    ``(node_id, filter_index)``.
    """
    if flops_to_remove <= 0:
        return PruneMask()
    cmap = channel_map(graph)
    model = _FlopModel(graph, cmap)
    base = model.flops(np.zeros(model.n_groups, dtype=bool))
    if flops_to_remove >= base:
        raise TargetUnreachable(f"cannot remove {flops_to_remove} of {base} FLOPs")
    score_of = {(s.node_id, s.filter_index): s.score for s in scores}
    group_id = {}
    for gid, labs in enumerate(cmap.labels):
        for lab in labs:
            group_id[lab] = gid
    ranked = []
    for g in groups:
        if not g.prunable or any(m not in score_of for m in g.members):
            continue
        ranked.append((sum(score_of[m] for m in g.members), _label_key(g.key), g))
    ranked.sort(key=lambda t: (t[0], t[1]))

    removed = np.zeros(model.n_groups, dtype=bool)
    chosen: list[tuple[str, int]] = []
    kept = model.kept(removed)
    for _, _, g in ranked:
        gid = group_id[g.members[0]]
        if any(kept[c] - sum(1 for m in g.members if m[0] == c) < min_filters for c in {m[0] for m in g.members}):
            continue
        removed[gid] = True
        chosen.extend(g.members)
        for c in {m[0] for m in g.members}:
            kept[c] -= sum(1 for m in g.members if m[0] == c)
        if base - model.flops(removed) >= flops_to_remove:
            return PruneMask(frozenset(chosen))
    raise TargetUnreachable(
        f"guards allow removing only {base - model.flops(removed)} of the requested {flops_to_remove:.0f} FLOPs"
    )


# --------------------------------------------------------------------------
# application


def apply_prune(graph: Graph, mask: PruneMask) -> Graph:
    """Remove the masked filters and every channel slice that depends on them.

    Masking any member of a coupling group removes the whole group.
    """
    if not mask.filters:
        return graph
    cmap = channel_map(graph)
    group_id = {lab: gid for gid, labs in enumerate(cmap.labels) for lab in labs}
    exempt = exempt_convs(graph)
    removed = np.zeros(len(cmap.labels), dtype=bool)
    for f in mask.filters:
        if f not in group_id:
            raise StructuralError(f"unknown filter {f}")
        if f[0] in exempt:
            raise StructuralError(f"{f[0]} produces a head output and cannot be pruned")
        gid = group_id[f]
        if any(lab[0] == "<input>" for lab in cmap.labels[gid]):
            raise StructuralError(f"{f} is tied to an input channel")
        removed[gid] = True
    keep = {nid: np.nonzero(~removed[r])[0] for nid, r in cmap.roots.items()}
    for nid, k in keep.items():
        if len(k) == 0:
            raise StructuralError(f"pruning would remove every channel of {nid}")
    new_nodes = {}
    for nid, node in graph.nodes.items():
        if isinstance(node, (Conv, TransposedConv)):
            ko = keep[nid]
            ki = keep[graph.predecessors(nid)[0]]
            if len(ko) == node.out_ch and len(ki) == node.in_ch:
                continue
            new_nodes[nid] = replace(
                node,
                in_ch=len(ki),
                out_ch=len(ko),
                weight=node.weight[np.ix_(ko, ki)],
                bias=node.bias[ko],
            )
        elif isinstance(node, BatchNorm):
            k = keep[nid]
            if len(k) == node.channels:
                continue
            new_nodes[nid] = replace(
                node,
                gamma=node.gamma[k],
                beta=node.beta[k],
                running_mean=node.running_mean[k],
                running_var=node.running_var[k],
            )
        elif isinstance(node, Input) and len(keep[nid]) != node.shape.channels:  # pragma: no cover
            raise StructuralError("input channels cannot be pruned")
    return graph.with_nodes(new_nodes)


# --------------------------------------------------------------------------
# iterative schedule


@dataclass(frozen=True)
class PruneSchedule:
    target_flops: int
    step_fraction: float = 0.10
    finetune_epochs: int = 32
    final_finetune_epochs: int = 64
    criterion: PruneCriterion = PruneCriterion.FILTER_NORM
    min_filters: int = MIN_FILTERS

    def __post_init__(self):
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")
        object.__setattr__(self, "criterion", PruneCriterion(self.criterion))


@dataclass
class TraceRow:
    step: int
    flops: int
    params: int
    metrics: MetricsReport | None = None


@dataclass
class PruneTrace:
    rows: list[TraceRow] = field(default_factory=list)
    masks: list[PruneMask] = field(default_factory=list)
    final_metrics: MetricsReport | None = None
    epochs: int = 0

    @property
    def steps(self) -> int:
        return len(self.rows) - 1

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "flops", "params", "det_map", "seg_miou", "soil_f1", "geo_mean"])
            for r in self.rows:
                w.writerow([r.step, r.flops, r.params, *_metric_cells(r.metrics)])
            if self.final_metrics is not None and self.rows:
                last = self.rows[-1]
                w.writerow(["final", last.flops, last.params, *_metric_cells(self.final_metrics)])


def _metric_cells(m: MetricsReport | None) -> list[str]:
    if m is None:
        return ["", "", "", ""]
    return [f"{v:.4f}" for v in (m.det_map, m.seg_miou, m.soil_f1, m.geo_mean)]


def prune_step(graph: Graph, flops_to_remove: float, criterion: PruneCriterion, min_filters: int = MIN_FILTERS) -> tuple[Graph, PruneMask]:
    scores = score_filters(graph, criterion)
    groups = coupling_groups(graph)
    mask = select_prune_set(scores, groups, graph, flops_to_remove, min_filters)
    return apply_prune(graph, mask), mask


def iterative_prune(
    graph: Graph,
    dataset: Sequence[Sample],
    schedule: PruneSchedule,
    train_config: TrainConfig,
    weights: LossWeights = LossWeights(),
    val_set: Sequence[Sample] | None = None,
) -> tuple[Graph, PruneTrace]:
    """Score, select, apply, fine-tune; repeat until FLOPs <= target, then fine-tune longer.

    Each step removes ``step_fraction`` of the current FLOPs, clipped so the
    last step lands on the target rather than overshooting it.
    """
    trace = PruneTrace()

    def record(step, g, metrics=None):
        if metrics is None and val_set:
            metrics = evaluate(g, val_set)
        trace.rows.append(TraceRow(step, count_flops(g), count_params(g), metrics))

    record(0, graph)
    step = 0
    current = graph
    while count_flops(current) > schedule.target_flops:
        step += 1
        flops_now = count_flops(current)
        amount = min(schedule.step_fraction * flops_now, flops_now - schedule.target_flops)
        current, mask = prune_step(current, amount, schedule.criterion, schedule.min_filters)
        trace.masks.append(mask)
        log.info("prune step %d: %d -> %d FLOPs (%d filters)", step, flops_now, count_flops(current), len(mask))
        if schedule.finetune_epochs > 0:
            cfg = replace(train_config, epochs=schedule.finetune_epochs, seed=train_config.seed + step)
            current, _ = train(current, dataset, replace(cfg, eval_every=0), weights)
            trace.epochs += schedule.finetune_epochs
        record(step, current)
    if schedule.final_finetune_epochs > 0:
        cfg = replace(train_config, epochs=schedule.final_finetune_epochs, seed=train_config.seed + 1000, eval_every=0)
        current, _ = train(current, dataset, cfg, weights)
        trace.epochs += schedule.final_finetune_epochs
    trace.final_metrics = evaluate(current, val_set) if val_set else None
    return current, trace
