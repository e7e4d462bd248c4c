import numpy as np
import pytest
from hypothesis import given, strategies as st

from embedcnn.graph import (
    Add,
    BatchNorm,
    Conv,
    CycleError,
    Edge,
    Graph,
    GraphBuilder,
    Head,
    Input,
    ReLU,
    ShapeMismatch,
    Task,
    TensorShape,
    ViolationKind,
    count_flops,
    count_params,
    infer_shapes,
    receptive_field,
    serial_chain_rf,
    validate,
)
from embedcnn.models import ArchConfig, build_multitask, serial_chain


def single_conv(in_ch=4, out_ch=8, k=5, s=1, size=16, pad=None):
    b = GraphBuilder(0)
    x = b.input("x", (in_ch, size, size))
    c = b.conv("c", x, out_ch, k, s, padding=pad)
    b.head("out", c, Task.SEGMENTATION)
    return b.build()


def kinds(violations):
    return sorted(v.kind for v in violations)


# ---------------------------------------------------------------- validation


def test_minimal_graph_is_valid():
    assert validate(single_conv(k=5)) == []


def test_kernel_seven_rejected():
    g = single_conv(k=7)
    assert ViolationKind.KERNEL_EXCEEDS_CORE in kinds(validate(g))


def test_add_shape_mismatch_reported():
    b = GraphBuilder(0)
    x = b.input("x", (8, 16, 16))
    a = b.conv("a", x, 8, 3, 1)
    c = b.conv("c", x, 8, 3, 2)
    b.add("sum", [a, c])
    b.head("out", "sum", Task.SEGMENTATION)
    assert kinds(validate(b.build())) == [ViolationKind.SHAPE_MISMATCH]


def test_cycle_reported_not_raised():
    nodes = {"x": Input(TensorShape(1, 4, 4)), "a": ReLU(), "b": Add(), "out": Head(Task.SEGMENTATION)}
    edges = [Edge("x", "b", 0), Edge("a", "b", 1), Edge("b", "a"), Edge("b", "out")]
    g = Graph(nodes, edges)
    assert ViolationKind.CYCLE in kinds(validate(g))
    with pytest.raises(CycleError):
        g.topo_order()


def test_dangling_node_reported():
    g = single_conv()
    nodes = dict(g.nodes)
    nodes["orphan"] = ReLU()
    g2 = Graph(nodes, list(g.edges) + [Edge("c", "orphan")])
    assert ViolationKind.DANGLING_NODE in kinds(validate(g2))


def test_nonpositive_variance_and_even_kernel():
    b = GraphBuilder(0)
    x = b.input("x", (2, 8, 8))
    c = b.conv("c", x, 2, 4, 1, padding=2)
    b.bn("bn", c)
    b.head("out", "bn", Task.SEGMENTATION)
    g = b.build()
    bad = BatchNorm(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, 0.0]))
    g = g.with_nodes({"bn": bad})
    found = kinds(validate(g))
    assert ViolationKind.EVEN_KERNEL in found
    assert ViolationKind.NON_POSITIVE_VARIANCE in found


def test_validate_is_idempotent():
    g = single_conv(k=7)
    assert validate(g) == validate(g)


def test_demo_graph_valid_and_covers_input():
    g = build_multitask(ArchConfig())
    assert validate(g) == []
    assert all(r.covers_input for r in receptive_field(g).values())
    assert len(g.heads) == 3


# ---------------------------------------------------------------- shapes


def test_same_padding_shape():
    g = single_conv(3, 16, 5, 1, 64)
    assert infer_shapes(g)["c"] == TensorShape(16, 64, 64)


def test_strided_shape():
    g = single_conv(3, 10, 5, 2, 64)
    assert infer_shapes(g)["c"] == TensorShape(10, 32, 32)


def test_transposed_conv_doubles():
    b = GraphBuilder(0)
    x = b.input("x", (16, 32, 32))
    t = b.tconv("t", x, 7, 2, 2)
    b.head("out", t, Task.SEGMENTATION)
    assert infer_shapes(b.build())["t"] == TensorShape(7, 64, 64)


def test_input_shape_override():
    g = single_conv(4, 8, 5, 2, 16)
    assert infer_shapes(g, {"x": (4, 40, 24)})["c"] == TensorShape(8, 20, 12)


def test_infer_shapes_raises_with_edge():
    b = GraphBuilder(0)
    x = b.input("x", (4, 8, 8))
    c = b.conv("c", x, 4, 3, 1)
    b.head("out", c, Task.SEGMENTATION)
    g = b.build()
    bad = Conv(5, 4, 3, 1, 1, np.zeros((4, 5, 3, 3)), np.zeros(4))
    with pytest.raises(ShapeMismatch) as exc:
        infer_shapes(g.with_nodes({"c": bad}))
    assert exc.value.edge == Edge("x", "c", 0)


def test_tensor_shape_positive():
    with pytest.raises(ValueError):
        TensorShape(0, 4, 4)


# ---------------------------------------------------------------- params / flops


def test_params_conv_5x5_4_to_8():
    assert count_params(single_conv(4, 8, 5)) == 808


def test_params_batchnorm_8():
    b = GraphBuilder(0)
    x = b.input("x", (8, 4, 4))
    b.head("out", b.bn("bn", x), Task.SEGMENTATION)
    assert count_params(b.build()) == 32


def test_params_identity_graph():
    b = GraphBuilder(0)
    x = b.input("x", (3, 4, 4))
    b.head("out", x, Task.SEGMENTATION)
    g = b.build()
    assert count_params(g) == 0
    assert count_flops(g) == 0


def test_flops_conv_5x5_4_to_8_16x16():
    assert count_flops(single_conv(4, 8, 5, 1, 16)) == 409_600


def test_flops_single_mac():
    assert count_flops(single_conv(1, 1, 1, 1, 1)) == 2


def test_flops_bn_relu_per_element():
    b = GraphBuilder(0)
    x = b.input("x", (2, 3, 5))
    b.head("out", b.relu("r", b.bn("bn", x)), Task.SEGMENTATION)
    assert count_flops(b.build()) == 2 * 30 + 30


def test_flops_parallel_branches_double():
    def branches(n):
        b = GraphBuilder(0)
        x = b.input("x", (4, 16, 16))
        for i in range(n):
            b.head(f"h{i}", b.conv(f"c{i}", x, 8, 5, 1), Task.SEGMENTATION)
        return b.build()

    assert count_flops(branches(2)) == 2 * count_flops(branches(1))


def test_tconv_flops():
    b = GraphBuilder(0)
    x = b.input("x", (3, 4, 4))
    b.head("out", b.tconv("t", x, 5, 2, 2), Task.SEGMENTATION)
    assert count_flops(b.build()) == 2 * 4 * 3 * 5 * 16


# ---------------------------------------------------------------- receptive field


@pytest.mark.parametrize(
    "kernels,strides,expected",
    [((5,), (1,), 5), ((5, 5), (1, 1), 9), ((5, 5), (2, 1), 13), ((3, 3, 3), (2, 2, 2), 15), ((1, 5), (2, 2), 9)],
)
def test_serial_rf(kernels, strides, expected):
    g = serial_chain(kernels, strides)
    rf = receptive_field(g)["out"]
    assert rf.rf_size == expected == serial_chain_rf(kernels, strides)
    assert rf.effective_stride == np.prod(strides)


@given(st.lists(st.tuples(st.sampled_from([1, 3, 5]), st.sampled_from([1, 2])), min_size=1, max_size=5))
def test_rf_matches_closed_form(layers):
    kernels, strides = zip(*layers)
    g = serial_chain(kernels, strides, channels=1, size=64)
    assert receptive_field(g)["out"].rf_size == serial_chain_rf(kernels, strides)


@given(st.lists(st.tuples(st.sampled_from([1, 3, 5]), st.sampled_from([1, 2])), min_size=1, max_size=5))
def test_rf_monotone_along_chain(layers):
    kernels, strides = zip(*layers)
    sizes = [serial_chain_rf(kernels[:i], strides[:i]) for i in range(len(kernels) + 1)]
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))


def test_merge_takes_branch_max():
    b = GraphBuilder(0)
    x = b.input("x", (2, 32, 32))
    a = b.conv("a", x, 2, 5, 1)
    a = b.conv("a2", a, 2, 5, 1)
    c = b.conv("c", x, 2, 3, 1)
    b.head("out", b.add("sum", [a, c]), Task.SEGMENTATION)
    assert receptive_field(b.build())["out"].rf_size == 9


def test_uv_input_scaled_to_full_resolution():
    b = GraphBuilder(0)
    uv = b.input("uv", (2, 16, 16))
    y = b.input("y", (1, 32, 32))
    c = b.conv("c", uv, 4, 3, 1)
    d = b.conv("d", y, 4, 3, 2)
    b.head("out", b.concat("cat", [c, d]), Task.SEGMENTATION)
    # one UV pixel spans 2 Y pixels; a 3-tap conv on UV covers 2 + 2*2 = 6
    assert receptive_field(b.build())["out"].rf_size == 6


# ---------------------------------------------------------------- immutability


def test_weights_read_only():
    g = single_conv()
    with pytest.raises(ValueError):
        g["c"].weight[0, 0, 0, 0] = 1.0


def test_with_params_returns_new_graph():
    g = single_conv()
    w = np.ones_like(g["c"].weight)
    g2 = g.with_params({"c.weight": w})
    assert np.all(g2["c"].weight == 1)
    assert not np.all(g["c"].weight == 1)


def test_topo_order_respects_edges():
    g = build_multitask()
    pos = {n: i for i, n in enumerate(g.topo_order())}
    assert all(pos[e.src] < pos[e.dst] for e in g.edges)
