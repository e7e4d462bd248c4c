"""Central-difference oracle shared by the engine tests and the acceptance suite."""

import numpy as np

from embedcnn.engine.execute import backward, run
from embedcnn.graph import GraphBuilder, Task


def micro_graph(seed: int):
    """Random small graph touching every node kind: Conv, TransposedConv, BatchNorm, ReLU, Concat, Add, Head."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder(rng)
    c_in = int(rng.integers(1, 3))
    size = int(rng.choice([6, 8]))
    x = b.input("x", (c_in, size, size))
    w = int(rng.integers(2, 4))
    k1 = int(rng.choice([1, 3, 5]))
    a = b.conv("a", x, w, k1, 1)
    a = b.bn("a_bn", a)
    a = b.relu("a_relu", a)
    c = b.conv("c", x, w, 3, 2)
    c = b.tconv("up", c, w, 2, 2)
    s = b.add("sum", [a, c])
    s = b.bn("sum_bn", s)
    cat = b.concat("cat", [s, a])
    d = b.conv("d", cat, 2, int(rng.choice([1, 3])), 1)
    b.head("h1", d, Task.SEGMENTATION)
    e = b.conv("e", s, 3, 3, 2)
    b.head("h2", b.relu("e_relu", e), Task.SOILING)
    g = b.build()
    # randomize BN affine terms so gradients through gamma/beta are non-trivial
    upd = {}
    for nid in ("a_bn", "sum_bn"):
        ch = g[nid].channels
        upd[f"{nid}.gamma"] = rng.uniform(0.5, 1.5, ch)
        upd[f"{nid}.beta"] = rng.normal(0, 0.3, ch)
    for nid in ("a", "c", "up", "d", "e"):
        upd[f"{nid}.bias"] = rng.normal(0, 0.1, g[nid].out_ch)
    g = g.with_params(upd)
    batch = rng.normal(size=(3, c_in, size, size))
    return g, {"x": batch}, rng


def _loss(graph, inputs, params, proj):
    vals = run(graph, inputs, train=True, params=params, dtype=np.float64).values
    return sum(float(np.sum(vals[h] * proj[h])) for h in graph.heads)


def max_relative_error(seed: int, step: float = 1e-6) -> float:
    """Largest per-tensor relative error between analytic and central-difference gradients."""
    g, inputs, rng = micro_graph(seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in g.params().items()}
    tape = run(g, inputs, train=True, params=params, keep=True, dtype=np.float64)
    proj = {h: rng.normal(size=tape.values[h].shape) for h in g.heads}
    grads = backward(g, tape, proj, params)
    # tensors whose true gradient is zero (a bias feeding BatchNorm) are
    # measured against the overall gradient scale instead of their own
    floor = 1e-3 * max(float(np.max(np.abs(v))) for v in grads.values())
    worst = 0.0
    for key in g.params(trainable_only=True):
        p = params[key]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = _loss(g, inputs, params, proj)
            p[idx] = old - step
            down = _loss(g, inputs, params, proj)
            p[idx] = old
            fd[idx] = (up - down) / (2 * step)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(grads[key])), floor)
        worst = max(worst, float(np.max(np.abs(fd - grads[key])) / scale))
    return worst
