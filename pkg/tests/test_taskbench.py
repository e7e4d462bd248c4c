import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from embedcnn.taskbench import (
    InvalidSize,
    MetricsReport,
    SceneObject,
    SoilBlob,
    augment,
    average_precision,
    decode_detections,
    eval_detection,
    eval_segmentation,
    eval_soiling,
    export_dataset,
    generate_dataset,
    geometric_mean,
    load_dataset,
    render_scene,
    save_dataset,
)


def _same(a, b):
    return all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("y", "uv", "det", "boxes", "seg", "soil"))


# ---------------------------------------------------------------- generation


def test_generation_deterministic():
    a = generate_dataset(7, 10, 64, 3)
    b = generate_dataset(7, 10, 64, 3)
    assert all(_same(x, y) for x, y in zip(a, b))


def test_different_seeds_differ():
    a = generate_dataset(7, 2)
    b = generate_dataset(8, 2)
    assert not np.array_equal(a[0].y, b[0].y)


def test_sample_depends_only_on_seed_and_index():
    assert _same(generate_dataset(3, 5)[2], generate_dataset(3, 3)[2])


def test_sample_layout():
    s = generate_dataset(0, 1, 64, 3)[0]
    assert s.y.shape == (1, 64, 64) and s.uv.shape == (2, 32, 32)
    assert s.det.shape == (8, 8, 6) and s.seg.shape == (64, 64) and s.soil.shape == (4, 4)
    assert 0 <= s.y.min() and s.y.max() <= 1 and 0 <= s.uv.min() and s.uv.max() <= 1
    assert 1 <= len(s.boxes) <= 5
    assert np.all(s.boxes[:, :4] >= 0) and np.all(s.boxes[:, :4] <= 64)
    assert int(s.det[..., 0].sum()) == len(s.boxes)
    assert set(np.unique(s.seg)) <= {0, 1, 2}


def test_zero_object_scene():
    s = render_scene([], [], 64)
    assert s.det[..., 0].sum() == 0
    assert np.all(s.seg == 0)
    assert len(s.boxes) == 0


def test_full_image_blob_soils_every_tile():
    s = render_scene([], [SoilBlob(32, 32, 200, 200)], 64)
    assert np.all(s.soil == 1)


def test_object_annotations_consistent():
    s = render_scene([SceneObject(2, 8, 8, 24, 20)], [], 64)
    # rectangle-ish object centered at (16, 14) lands in cell row 1, col 2 of an 8 px grid
    r, c = np.argwhere(s.det[..., 0] == 1)[0]
    assert (r, c) == (1, 2)
    assert s.det[r, c, 1] == 1  # detection class = segmentation class - 1
    np.testing.assert_allclose(s.det[r, c, 4:], [16 / 64, 12 / 64])
    assert s.boxes[0].tolist() == [8, 8, 24, 20, 1]
    assert (s.seg == 2).sum() > 0


def test_invalid_size():
    with pytest.raises(InvalidSize):
        generate_dataset(0, 1, image_size=60)
    with pytest.raises(InvalidSize):
        render_scene([], [], 30)


def test_save_load_round_trip(tmp_path):
    a = generate_dataset(1, 4)
    a[1].has_seg = False
    save_dataset(tmp_path / "d.npz", a)
    b = load_dataset(tmp_path / "d.npz")
    assert all(_same(x, y) for x, y in zip(a, b))
    assert [s.has_seg for s in b] == [True, False, True, True]


def test_export_writes_pgm(tmp_path):
    root = export_dataset(generate_dataset(0, 2), tmp_path)
    y = (root / "00000_y.pgm").read_bytes()
    assert y.startswith(b"P5\n64 64\n255\n") and len(y) == len(b"P5\n64 64\n255\n") + 64 * 64
    assert (root / "00001_u.pgm").exists() and (root / "00001_soil.txt").read_text().count("\n") == 4


def test_augment_flip_keeps_labels_aligned():
    s = generate_dataset(2, 1)[0]

    class AlwaysFlip:
        def random(self):
            return 0.0

        def uniform(self, lo, hi):
            return 0.0

    f = augment(s, AlwaysFlip())
    np.testing.assert_array_equal(f.seg, s.seg[:, ::-1])
    np.testing.assert_array_equal(f.soil, s.soil[:, ::-1])
    assert f.det[..., 0].sum() == s.det[..., 0].sum()
    back = augment(f, AlwaysFlip())
    assert _same(back, s)


# ---------------------------------------------------------------- detection metric


def test_map_perfect():
    gt = [np.array([[0, 0, 10, 10, 0], [20, 20, 40, 30, 1]], float)]
    pred = [np.array([[0, 0, 10, 10, 1.0, 0], [20, 20, 40, 30, 1.0, 1]], float)]
    assert eval_detection(pred, gt) == 100.0


def test_map_no_predictions():
    gt = [np.array([[0, 0, 10, 10, 0]], float)]
    assert eval_detection([np.zeros((0, 6))], gt) == 0.0


def test_ap_tp_then_fp():
    # PR points: (recall 1, precision 1), (recall 1, precision 1/2) -> area 1
    assert average_precision(np.array([0.9, 0.8]), np.array([True, False]), 1) == 1.0


def test_ap_fp_then_tp():
    # PR points: (0, 0), (1, 1/2) -> area 1/2
    assert average_precision(np.array([0.9, 0.8]), np.array([False, True]), 1) == 0.5


def test_ap_tied_scores_order_free():
    a = average_precision(np.array([0.5, 0.5]), np.array([True, False]), 1)
    b = average_precision(np.array([0.5, 0.5]), np.array([False, True]), 1)
    assert a == b == 0.5


def test_class_without_gt_excluded():
    gt = [np.array([[0, 0, 10, 10, 0]], float)]
    pred = [np.array([[0, 0, 10, 10, 0.9, 0], [30, 30, 40, 40, 0.8, 2]], float)]
    assert eval_detection(pred, gt, n_classes=3) == 100.0
    assert math.isnan(eval_detection([np.zeros((0, 6))], [np.zeros((0, 5))]))


def test_duplicate_detection_is_false_positive():
    gt = [np.array([[0, 0, 10, 10, 0]], float)]
    pred = [np.array([[0, 0, 10, 10, 0.9, 0], [0, 0, 10, 10, 0.8, 0]], float)]
    assert eval_detection(pred, gt) == 100.0  # TP first: envelope is still 1
    pred = [np.array([[0, 0, 10, 10, 0.7, 0], [1, 1, 10, 10, 0.8, 0]], float)]
    # the higher score box claims the GT (IoU 0.81), the exact box becomes a FP
    assert eval_detection(pred, gt) == 100.0


boxes = st.lists(
    st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(4, 20), st.integers(4, 20), st.integers(0, 1)),
    min_size=1,
    max_size=4,
)


@given(boxes, st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4), st.lists(st.integers(-3, 3), min_size=2, max_size=2))
def test_map_non_increasing_in_iou_threshold(gt_boxes, scores, jitter):
    gt = np.array([[x, y, x + w, y + h, c] for x, y, w, h, c in gt_boxes], float)
    pred = gt.copy()
    pred[:, :2] += jitter
    pred = np.c_[pred[:, :4], scores[: len(pred)], pred[:, 4]]
    values = [eval_detection([pred], [gt], t, n_classes=2) for t in (0.3, 0.5, 0.7, 0.9)]
    assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))
    assert all(0 <= v <= 100 for v in values)


@given(st.permutations(list(range(4))))
def test_map_permutation_invariant(perm):
    gt = [np.array([[0, 0, 10, 10, i % 2]], float) for i in range(4)]
    pred = [np.array([[0, 0, 8 + i, 10, 0.2 * (i + 1), i % 2]], float) for i in range(4)]
    base = eval_detection(pred, gt)
    assert eval_detection([pred[i] for i in perm], [gt[i] for i in perm]) == base


# ---------------------------------------------------------------- segmentation metric


def test_miou_identical():
    m = np.random.default_rng(0).integers(0, 3, (8, 8))
    assert eval_segmentation(m, m) == 100.0


def test_miou_complement():
    m = np.random.default_rng(0).integers(0, 2, (8, 8))
    assert eval_segmentation(1 - m, m) == 0.0


def test_miou_half_overlapping_stripes():
    gt = np.zeros((8, 8), int)
    gt[:, 4:] = 1
    pred = np.zeros((8, 8), int)
    pred[:, 2:6] = 1
    # class 1: inter 16 px, union 48 px; class 0 likewise
    assert eval_segmentation(pred, gt) == pytest.approx(100 / 3)


def test_miou_skips_absent_class():
    gt = np.zeros((4, 4), int)
    assert eval_segmentation(gt, gt, n_classes=5) == 100.0


# ---------------------------------------------------------------- soiling metric


def test_f1_identical():
    g = np.random.default_rng(1).integers(0, 2, (3, 4, 4))
    assert eval_soiling(g, g) == 100.0


def test_f1_all_wrong():
    g = np.random.default_rng(1).integers(0, 2, (3, 4, 4))
    g[0, 0, 0] = 1
    assert eval_soiling(1 - g, g) == 0.0


def test_f1_tp8_fp4_fn4():
    gt = np.zeros(32, int)
    pred = np.zeros(32, int)
    gt[:12] = 1  # 8 TP + 4 FN
    pred[:8] = 1
    pred[12:16] = 1  # 4 FP
    assert eval_soiling(pred.reshape(2, 4, 4), gt.reshape(2, 4, 4)) == pytest.approx(200 * 8 / (16 + 8))


@given(st.lists(st.integers(0, 2), min_size=32, max_size=32), st.lists(st.integers(0, 2), min_size=32, max_size=32))
def test_metrics_bounded(p, g):
    p, g = np.array(p).reshape(2, 4, 4), np.array(g).reshape(2, 4, 4)
    assert 0 <= eval_soiling(p, g, 3) <= 100
    assert 0 <= eval_segmentation(p, g, 3) <= 100


# ---------------------------------------------------------------- aggregate


def test_geo_mean_cube_root():
    r = MetricsReport.of(50.0, 80.0, 20.0)
    assert r.geo_mean == pytest.approx((50 * 80 * 20) ** (1 / 3))


@given(st.lists(st.floats(0.1, 100), min_size=3, max_size=3))
def test_geo_mean_between_min_and_max(v):
    g = geometric_mean(v)
    assert min(v) - 1e-9 <= g <= max(v) + 1e-9


def test_geo_mean_ignores_missing_task():
    assert geometric_mean([math.nan, 4.0, 16.0]) == pytest.approx(8.0)


def test_decode_detections_round_trip():
    out = np.full((8, 8, 1 + 2 + 4), -20.0)
    out[1, 2, 0] = 20.0
    out[1, 2, 2] = 5.0  # class 1
    out[1, 2, 3:] = 0.0  # box sigmoid 0.5: center of cell, w = h = 32 px
    det = decode_detections(out, 64)
    assert det.shape == (1, 6)
    np.testing.assert_allclose(det[0, :4], [20 - 16, 12 - 16, 20 + 16, 12 + 16])
    assert det[0, 5] == 1
