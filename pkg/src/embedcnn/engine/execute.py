"""Float execution of a :class:`~embedcnn.graph.Graph` over a batch, plus reverse mode."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from embedcnn.graph import (
    Add,
    BatchNorm,
    Concat,
    Conv,
    Graph,
    Head,
    Input,
    ReLU,
    ShapeMismatch,
    TransposedConv,
    Edge,
)
from embedcnn.engine import ops


@dataclass
class Tape:
    """Values and saved context from one forward pass."""

    values: dict[str, np.ndarray]
    ctx: dict[str, object] = field(default_factory=dict)
    batch_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    train: bool = False


def _param(graph: Graph, params: Mapping[str, np.ndarray] | None, nid: str, slot: str, dtype):
    if params is not None:
        key = f"{nid}.{slot}"
        if key in params:
            return params[key].astype(dtype, copy=False)
    return getattr(graph[nid], slot).astype(dtype, copy=False)


def run(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    *,
    train: bool = False,
    params: Mapping[str, np.ndarray] | None = None,
    dtype=np.float32,
    keep: bool = False,
    ordered: bool = False,
) -> Tape:
    """Evaluate every node on a batch of ``[N, C, H, W]`` inputs.

    ``train`` switches BatchNorm to batch statistics.  ``params`` overrides
    stored parameters by ``"<node>.<slot>"`` name.  ``keep`` retains the
    context needed by :func:`backward`.  ``ordered`` evaluates convolutions
    with a fixed per-tap accumulation order instead of BLAS (eval only).
    """
    if ordered and keep:
        raise ValueError("ordered evaluation keeps no backward context")
    values: dict[str, np.ndarray] = {}
    tape = Tape(values, train=train)
    for nid in graph.topo_order():
        node = graph[nid]
        preds = graph.predecessors(nid)
        xs = [values[p] for p in preds]
        if isinstance(node, Input):
            if nid not in inputs:
                raise ShapeMismatch(None, f"missing input {nid!r}")
            x = np.asarray(inputs[nid], dtype=dtype)
            if x.ndim == 3:
                x = x[None]
            if x.shape[1:] != node.shape.as_tuple():
                raise ShapeMismatch(None, f"input {nid!r}: got {x.shape[1:]}, graph expects {node.shape.as_tuple()}")
            values[nid] = x
            continue
        x = xs[0]
        if isinstance(node, Conv):
            if x.shape[1] != node.in_ch:
                raise ShapeMismatch(Edge(preds[0], nid), f"expected {node.in_ch} channels, got {x.shape[1]}")
            w = _param(graph, params, nid, "weight", dtype)
            b = _param(graph, params, nid, "bias", dtype)
            if ordered:
                out = ops.conv2d_ordered(x, w, b, node.stride, node.padding)
            else:
                out, cols = ops.conv2d_forward(x, w, b, node.stride, node.padding)
            if keep:
                tape.ctx[nid] = cols
        elif isinstance(node, TransposedConv):
            if x.shape[1] != node.in_ch:
                raise ShapeMismatch(Edge(preds[0], nid), f"expected {node.in_ch} channels, got {x.shape[1]}")
            w = _param(graph, params, nid, "weight", dtype)
            b = _param(graph, params, nid, "bias", dtype)
            if ordered:
                out = ops.tconv2d_ordered(x, w, b, node.stride, node.padding)
            else:
                out, xm = ops.tconv2d_forward(x, w, b, node.stride, node.padding)
            if keep:
                tape.ctx[nid] = xm
        elif isinstance(node, BatchNorm):
            gamma = _param(graph, params, nid, "gamma", dtype)
            beta = _param(graph, params, nid, "beta", dtype)
            if train:
                out, ctx = ops.batchnorm_train_forward(x, gamma, beta, dtype(node.eps))
                tape.batch_stats[nid] = (ctx[2], ctx[3])
            else:
                mean = _param(graph, params, nid, "running_mean", dtype)
                var = _param(graph, params, nid, "running_var", dtype)
                out, ctx = ops.batchnorm_eval_forward(x, gamma, beta, mean, var, dtype(node.eps))
            if keep:
                tape.ctx[nid] = ctx
        elif isinstance(node, ReLU):
            out = np.maximum(x, 0)
        elif isinstance(node, Add):
            out = xs[0]
            for e, y in enumerate(xs[1:], start=1):
                if y.shape != out.shape:
                    raise ShapeMismatch(Edge(preds[e], nid, e), f"Add operand {y.shape[1:]} != {out.shape[1:]}")
                out = out + y
        elif isinstance(node, Concat):
            out = np.concatenate(xs, axis=1)
        elif isinstance(node, Head):
            out = x
        else:  # pragma: no cover
            raise TypeError(type(node))
        values[nid] = out
    return tape


def backward(
    graph: Graph,
    tape: Tape,
    head_grads: Mapping[str, np.ndarray],
    params: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of the scalar whose head derivatives are ``head_grads``.

    Returns one array per trainable parameter (``weight``, ``bias``, ``gamma``,
    ``beta``); parameters no head depends on get exact zeros.
    """
    values = tape.values
    grads: dict[str, np.ndarray] = {}
    upstream: dict[str, np.ndarray] = {}
    for h, g in head_grads.items():
        upstream[h] = np.asarray(g, dtype=values[h].dtype)

    def push(nid, g):
        if nid in upstream:
            upstream[nid] = upstream[nid] + g
        else:
            upstream[nid] = g

    for nid in reversed(graph.topo_order()):
        node = graph[nid]
        preds = graph.predecessors(nid)
        dtype = values[nid].dtype
        for slot in node.params:
            if slot in ("weight", "bias", "gamma", "beta"):
                grads[f"{nid}.{slot}"] = np.zeros(getattr(node, slot).shape, dtype=dtype)
        if nid not in upstream:
            continue
        dy = upstream.pop(nid)
        if isinstance(node, Input):
            continue
        x_id = preds[0]
        need_dx = not isinstance(graph[x_id], Input)
        if isinstance(node, Conv):
            w = _param(graph, params, nid, "weight", dtype)
            dx, dw, db = ops.conv2d_backward(dy, tape.ctx[nid], values[x_id].shape, w, node.stride, node.padding, need_dx)
            grads[f"{nid}.weight"], grads[f"{nid}.bias"] = dw, db
            if need_dx:
                push(x_id, dx)
        elif isinstance(node, TransposedConv):
            w = _param(graph, params, nid, "weight", dtype)
            dx, dw, db = ops.tconv2d_backward(dy, tape.ctx[nid], values[x_id].shape, w, node.stride, node.padding, need_dx)
            grads[f"{nid}.weight"], grads[f"{nid}.bias"] = dw, db
            if need_dx:
                push(x_id, dx)
        elif isinstance(node, BatchNorm):
            gamma = _param(graph, params, nid, "gamma", dtype)
            if tape.train:
                dx, dg, dbeta = ops.batchnorm_train_backward(dy, gamma, tape.ctx[nid])
            else:
                dx, dg, dbeta = ops.batchnorm_eval_backward(dy, gamma, tape.ctx[nid])
            grads[f"{nid}.gamma"], grads[f"{nid}.beta"] = dg, dbeta
            push(x_id, dx)
        elif isinstance(node, ReLU):
            push(x_id, dy * (values[nid] > 0))
        elif isinstance(node, Add):
            for p in preds:
                push(p, dy)
        elif isinstance(node, Concat):
            start = 0
            for p in preds:
                c = values[p].shape[1]
                push(p, dy[:, start : start + c])
                start += c
        elif isinstance(node, Head):
            push(x_id, dy)
    return grads
