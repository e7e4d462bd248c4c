"""Random small graphs for simulator property tests."""

import numpy as np

from embedcnn.graph import GraphBuilder, Task


def random_graph(seed: int):
    """Conv trunk with optional residual, down/up-sampling and a concat skip, 1-2 heads."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder(seed)
    size = int(rng.choice([16, 24, 32, 48]))
    x = b.input("x", (int(rng.integers(1, 5)), size, size))
    cur, n = x, int(rng.integers(1, 7))
    skip = None
    for i in range(n):
        width = int(rng.integers(2, 33))
        k = int(rng.choice([1, 3, 5]))
        stride = 2 if rng.random() < 0.25 and b.shape(cur).height >= 8 else 1
        cur = b.conv(f"c{i}", cur, width, k, stride)
        if rng.random() < 0.5:
            cur = b.bn(f"c{i}_bn", cur)
        cur = b.relu(f"c{i}_relu", cur)
        if rng.random() < 0.2:
            r = b.conv(f"r{i}", cur, width, 3)
            cur = b.add(f"add{i}", [cur, r])
        if skip is None and rng.random() < 0.3:
            skip = cur
    if rng.random() < 0.4 and b.shape(cur).height * 2 <= 64:
        cur = b.relu("up_relu", b.tconv("up", cur, int(rng.integers(2, 17))))
        if skip is not None and b.shape(skip).height == b.shape(cur).height:
            cur = b.concat("cat", [cur, skip])
    b.head("h0", b.conv("out0", cur, int(rng.integers(1, 6)), 1), Task.SEGMENTATION)
    if rng.random() < 0.5:
        b.head("h1", b.conv("out1", cur, 2, 3), Task.SOILING)
    return b.build()
