"""Synthetic multi-task scenes and the task metrics used to score them.

Scenes are flat-colored geometric objects on a textured background, optionally
covered by "soiling" blobs, rendered to RGB and converted to a full-resolution
Y plane plus half-resolution UV planes.  Because every object is drawn
analytically, segmentation masks, detection targets and soiling tile labels
are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SOIL_GRID = 4
# per class: RGB base color; class 0 is background
PALETTE = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.90, 0.15, 0.10],
        [0.10, 0.35, 0.95],
        [0.15, 0.85, 0.20],
        [0.95, 0.85, 0.10],
        [0.80, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
    ]
)
SHAPES = ("rect", "ellipse", "triangle", "diamond")
SOIL_COLORS = np.array([[0.0, 0.0, 0.0], [0.35, 0.27, 0.18], [0.08, 0.07, 0.06], [0.75, 0.75, 0.72]])
SOIL_ALPHA = (0.0, 0.8, 0.97, 0.6)
SOIL_COVERAGE = 0.35


class InvalidSize(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    cls: int  # segmentation class, >= 1
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2


@dataclass(frozen=True)
class SoilBlob:
    cx: float
    cy: float
    rx: float
    ry: float
    cls: int = 1


@dataclass
class Sample:
    """One rendered scene with annotations for all three tasks.

    ``det`` is the ``[G, G, 6]`` grid target (objectness, class id, cx, cy, w,
    h); ``cx, cy`` are offsets inside the cell and ``w, h`` are fractions of
    the image.  ``boxes`` holds the same objects in pixels as ``[M, 5]`` rows
    ``(x1, y1, x2, y2, class_id)`` with detection class ids starting at 0.
    """

    y: np.ndarray
    uv: np.ndarray
    det: np.ndarray
    boxes: np.ndarray
    seg: np.ndarray
    soil: np.ndarray
    has_det: bool = True
    has_seg: bool = True
    has_soil: bool = True

    @property
    def image_size(self) -> int:
        return int(self.y.shape[-1])

    @property
    def grid(self) -> int:
        return int(self.det.shape[0])

    def inputs(self) -> dict[str, np.ndarray]:
        return {"y": self.y, "uv": self.uv}


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_samples: int = 64
    image_size: int = 64
    n_classes: int = 3
    grid: int = 8
    n_soil_classes: int = 2
    min_objects: int = 1
    max_objects: int = 5
    soil_prob: float = 0.7


# --------------------------------------------------------------------------
# rendering


def rgb_to_yuv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """BT.601 conversion of ``[3, H, W]`` RGB in [0, 1] to Y ``[1, H, W]`` and 2x2-averaged UV ``[2, H/2, W/2]``."""
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = np.clip(0.5 + 0.492 * (b - y), 0.0, 1.0)
    v = np.clip(0.5 + 0.877 * (r - y), 0.0, 1.0)
    uv = np.stack([u, v])
    c, h, w = uv.shape
    uv = uv.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return y[None].astype(np.float32), uv.astype(np.float32)


def _shape_mask(obj: SceneObject, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    kind = SHAPES[(obj.cls - 1) % len(SHAPES)]
    cx, cy = obj.center
    hw, hh = (obj.x2 - obj.x1) / 2, (obj.y2 - obj.y1) / 2
    dx, dy = (xx + 0.5 - cx) / hw, (yy + 0.5 - cy) / hh
    if kind == "rect":
        return (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    if kind == "ellipse":
        return dx**2 + dy**2 <= 1
    if kind == "triangle":
        return (dy <= 1) & (dy >= -1) & (np.abs(dx) <= (dy + 1) / 2)
    return np.abs(dx) + np.abs(dy) <= 1


def render_scene(
    objects: Sequence[SceneObject],
    blobs: Sequence[SoilBlob],
    image_size: int,
    grid: int = 8,
    n_soil_classes: int = 2,
    rng: np.random.Generator | None = None,
) -> Sample:
    """Rasterize an explicit scene description into a :class:`Sample`.

    Objects are drawn in order (later ones occlude earlier ones); at most one
    object may have its center in any grid cell.
    """
    if image_size % 2 or image_size % grid or image_size % SOIL_GRID:
        raise InvalidSize(f"image_size {image_size} must be divisible by 2, {grid} and {SOIL_GRID}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    # background: smooth gradient plus texture noise
    tint = rng.uniform(-0.12, 0.12, size=3)
    ramp = rng.uniform(-0.15, 0.15) * (yy / n - 0.5) + rng.uniform(-0.15, 0.15) * (xx / n - 0.5)
    rgb = PALETTE[0][:, None, None] + tint[:, None, None] + ramp[None]
    rgb = rgb + rng.normal(0.0, 0.03, size=(3, n, n))
    seg = np.zeros((n, n), dtype=np.int64)

    cell = n / grid
    det = np.zeros((grid, grid, 6), dtype=np.float32)
    boxes = []
    for obj in objects:
        if not (0 <= obj.x1 < obj.x2 <= n and 0 <= obj.y1 < obj.y2 <= n):
            raise InvalidSize(f"object {obj} lies outside the {n}x{n} image")
        mask = _shape_mask(obj, yy, xx)
        color = PALETTE[obj.cls % len(PALETTE)] + rng.uniform(-0.06, 0.06, size=3)
        rgb[:, mask] = color[:, None] + rng.normal(0.0, 0.03, size=(3, int(mask.sum())))
        seg[mask] = obj.cls
        cx, cy = obj.center
        col, row = min(int(cx // cell), grid - 1), min(int(cy // cell), grid - 1)
        if det[row, col, 0]:
            raise InvalidSize(f"two objects share grid cell ({row}, {col})")
        det[row, col] = (1.0, obj.cls - 1, cx / cell - col, cy / cell - row, (obj.x2 - obj.x1) / n, (obj.y2 - obj.y1) / n)
        boxes.append((obj.x1, obj.y1, obj.x2, obj.y2, obj.cls - 1))

    soil_px = np.zeros((n, n), dtype=np.int64)
    for blob in blobs:
        if not 1 <= blob.cls < n_soil_classes:
            raise ValueError(f"soil class {blob.cls} outside 1..{n_soil_classes - 1}")
        m = ((xx + 0.5 - blob.cx) / blob.rx) ** 2 + ((yy + 0.5 - blob.cy) / blob.ry) ** 2 <= 1
        soil_px[m] = blob.cls
    for c in range(1, n_soil_classes):
        m = soil_px == c
        a = SOIL_ALPHA[c % len(SOIL_ALPHA)]
        dirt = SOIL_COLORS[c % len(SOIL_COLORS)][:, None] + rng.normal(0.0, 0.02, size=(3, int(m.sum())))
        rgb[:, m] = (1 - a) * rgb[:, m] + a * dirt

    t = n // SOIL_GRID
    soil = np.zeros((SOIL_GRID, SOIL_GRID), dtype=np.int64)
    for r in range(SOIL_GRID):
        for c in range(SOIL_GRID):
            patch = soil_px[r * t : (r + 1) * t, c * t : (c + 1) * t]
            counts = np.bincount(patch.ravel(), minlength=n_soil_classes)
            if counts[1:].sum() >= SOIL_COVERAGE * patch.size:
                soil[r, c] = 1 + int(np.argmax(counts[1:]))

    y, uv = rgb_to_yuv(np.clip(rgb, 0.0, 1.0))
    return Sample(
        y=y,
        uv=uv,
        det=det,
        boxes=np.array(boxes, dtype=np.float32).reshape(-1, 5),
        seg=seg,
        soil=soil,
    )


def random_scene(rng: np.random.Generator, spec: DatasetSpec) -> tuple[list[SceneObject], list[SoilBlob]]:
    n, g = spec.image_size, spec.grid
    cell = n / g
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    used: set[tuple[int, int]] = set()
    objects = []
    for _ in range(count):
        for _attempt in range(20):
            w = rng.uniform(n / 8, n / 3)
            h = rng.uniform(n / 8, n / 3)
            x1 = rng.uniform(0, n - w)
            y1 = rng.uniform(0, n - h)
            key = (min(int((y1 + h / 2) // cell), g - 1), min(int((x1 + w / 2) // cell), g - 1))
            if key not in used:
                used.add(key)
                cls = int(rng.integers(1, spec.n_classes))
                objects.append(SceneObject(cls, x1, y1, x1 + w, y1 + h))
                break
    blobs = []
    if rng.random() < spec.soil_prob:
        for _ in range(int(rng.integers(1, 3))):
            blobs.append(
                SoilBlob(
                    cx=rng.uniform(0, n),
                    cy=rng.uniform(0, n),
                    rx=rng.uniform(n / 8, n / 2.5),
                    ry=rng.uniform(n / 8, n / 2.5),
                    cls=int(rng.integers(1, spec.n_soil_classes)),
                )
            )
    return objects, blobs


def generate_dataset(
    seed: int,
    n_samples: int,
    image_size: int = 64,
    n_classes: int = 3,
    grid: int = 8,
    n_soil_classes: int = 2,
    min_objects: int = 1,
    max_objects: int = 5,
    soil_prob: float = 0.7,
) -> list[Sample]:
    """Deterministic list of synthetic samples; sample ``i`` depends only on ``(seed, i)``."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2 (background + at least one object class)")
    if image_size % 2 or image_size % grid or image_size % SOIL_GRID:
        raise InvalidSize(f"image_size {image_size} must be divisible by 2, {grid} and {SOIL_GRID}")
    spec = DatasetSpec(seed, n_samples, image_size, n_classes, grid, n_soil_classes, min_objects, max_objects, soil_prob)
    children = np.random.SeedSequence(seed).spawn(n_samples)
    out = []
    for child in children:
        rng = np.random.default_rng(child)
        objects, blobs = random_scene(rng, spec)
        out.append(render_scene(objects, blobs, image_size, grid, n_soil_classes, rng))
    return out


def augment(sample: Sample, rng: np.random.Generator, flip_prob: float = 0.5, brightness: float = 0.1) -> Sample:
    """Random horizontal flip and brightness jitter (labels follow the flip)."""
    y, uv, det, boxes, seg, soil = sample.y, sample.uv, sample.det, sample.boxes, sample.seg, sample.soil
    if rng.random() < flip_prob:
        n = sample.image_size
        y, uv, seg, soil = y[..., ::-1], uv[..., ::-1], seg[:, ::-1], soil[:, ::-1]
        det = det[:, ::-1].copy()
        obj = det[..., 0] > 0
        det[..., 2] = np.where(obj, 1.0 - det[..., 2], 0.0)
        boxes = boxes.copy()
        boxes[:, [0, 2]] = n - boxes[:, [2, 0]]
    shift = np.float32(rng.uniform(-brightness, brightness))
    y = np.clip(y + shift, 0.0, 1.0).astype(np.float32)
    return Sample(
        np.ascontiguousarray(y),
        np.ascontiguousarray(uv),
        np.ascontiguousarray(det),
        boxes,
        np.ascontiguousarray(seg),
        np.ascontiguousarray(soil),
        sample.has_det,
        sample.has_seg,
        sample.has_soil,
    )


# --------------------------------------------------------------------------
# persistence


def save_dataset(path: str | Path, samples: Sequence[Sample]) -> None:
    nb = np.array([len(s.boxes) for s in samples], dtype=np.int64)
    np.savez_compressed(
        path,
        y=np.stack([s.y for s in samples]),
        uv=np.stack([s.uv for s in samples]),
        det=np.stack([s.det for s in samples]),
        seg=np.stack([s.seg for s in samples]),
        soil=np.stack([s.soil for s in samples]),
        boxes=np.concatenate([s.boxes for s in samples]) if samples else np.zeros((0, 5), np.float32),
        n_boxes=nb,
        flags=np.array([[s.has_det, s.has_seg, s.has_soil] for s in samples], dtype=bool).reshape(-1, 3),
    )


def load_dataset(path: str | Path) -> list[Sample]:
    with np.load(path) as z:
        ends = np.cumsum(z["n_boxes"])
        starts = ends - z["n_boxes"]
        return [
            Sample(z["y"][i], z["uv"][i], z["det"][i], z["boxes"][starts[i] : ends[i]], z["seg"][i], z["soil"][i], *map(bool, z["flags"][i]))
            for i in range(len(ends))
        ]


def _write_pgm(path: Path, plane: np.ndarray) -> None:
    img = np.clip(np.rint(plane * 255), 0, 255).astype(np.uint8) if plane.dtype.kind == "f" else plane.astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def export_dataset(samples: Sequence[Sample], directory: str | Path, split: str = "train") -> Path:
    """Write samples as PGM planes plus plain-text labels under ``directory/split``."""
    root = Path(directory) / split
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        _write_pgm(root / f"{stem}_y.pgm", s.y[0])
        _write_pgm(root / f"{stem}_u.pgm", s.uv[0])
        _write_pgm(root / f"{stem}_v.pgm", s.uv[1])
        _write_pgm(root / f"{stem}_seg.pgm", s.seg)
        lines = [f"{int(b[4])} {b[0]:.3f} {b[1]:.3f} {b[2]:.3f} {b[3]:.3f}" for b in s.boxes]
        (root / f"{stem}_det.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
        (root / f"{stem}_soil.txt").write_text("\n".join(" ".join(str(int(v)) for v in row) for row in s.soil) + "\n")
    return root


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    """Task metrics in percent.  ``geo_mean`` is the cube root of their product."""

    det_map: float = math.nan
    seg_miou: float = math.nan
    soil_f1: float = math.nan
    geo_mean: float = field(default=math.nan)

    @classmethod
    def of(cls, det_map: float = math.nan, seg_miou: float = math.nan, soil_f1: float = math.nan) -> "MetricsReport":
        return cls(det_map, seg_miou, soil_f1, geometric_mean([det_map, seg_miou, soil_f1]))

    def as_dict(self) -> dict[str, float]:
        return {"det_map": self.det_map, "seg_miou": self.seg_miou, "soil_f1": self.soil_f1, "geo_mean": self.geo_mean}


def geometric_mean(values: Sequence[float]) -> float:
    present = [v for v in values if not math.isnan(v)]
    if not present:
        return math.nan
    if min(present) <= 0:
        return 0.0
    return float(math.exp(sum(math.log(v) for v in present) / len(present)))


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[N, 4]`` and ``[M, 4]`` corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def average_precision(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> float:
    """Area under the monotone (interpolated) precision-recall envelope.

    Predictions sharing a score form one operating point, so the result does
    not depend on how ties are ordered.
    """
    if n_gt == 0:
        return math.nan
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    scores, is_tp = scores[order], is_tp[order].astype(np.float64)
    tp = np.cumsum(is_tp)
    fp = np.cumsum(1.0 - is_tp)
    last = np.r_[scores[1:] != scores[:-1], True]
    recall = tp[last] / n_gt
    precision = tp[last] / (tp[last] + fp[last])
    mrec = np.r_[0.0, recall]
    mpre = np.r_[0.0, precision]
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def eval_detection(
    predictions: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    iou_threshold: float = 0.5,
    n_classes: int | None = None,
) -> float:
    """Mean AP in percent over classes that have ground truth.

    ``predictions[i]`` is ``[K, 6]`` rows ``(x1, y1, x2, y2, score, class)``;
    ``targets[i]`` is ``[M, 5]`` rows ``(x1, y1, x2, y2, class)``.  Each
    prediction, in descending score order within its image, is matched to the
    unmatched same-class box of highest IoU when that IoU reaches the
    threshold.  Returns NaN if no class has ground truth.
    """
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets must cover the same images")
    preds = [np.asarray(p, dtype=np.float64).reshape(-1, 6) for p in predictions]
    gts = [np.asarray(t, dtype=np.float64).reshape(-1, 5) for t in targets]
    if n_classes is None:
        labels = [int(c) for g in gts for c in g[:, 4]] + [int(c) for p in preds for c in p[:, 5]]
        n_classes = max(labels) + 1 if labels else 0
    aps = per_class_ap(preds, gts, iou_threshold, n_classes)
    valid = [a for a in aps if not math.isnan(a)]
    return 100.0 * float(np.mean(valid)) if valid else math.nan


def per_class_ap(preds, gts, iou_threshold, n_classes) -> list[float]:
    scores: list[list[float]] = [[] for _ in range(n_classes)]
    flags: list[list[bool]] = [[] for _ in range(n_classes)]
    n_gt = [0] * n_classes
    for p, g in zip(preds, gts):
        for c in range(n_classes):
            gc = g[g[:, 4] == c, :4]
            pc = p[p[:, 5] == c]
            n_gt[c] += len(gc)
            if len(pc) == 0:
                continue
            pc = pc[np.argsort(-pc[:, 4], kind="stable")]
            ious = box_iou(pc[:, :4], gc) if len(gc) else np.zeros((len(pc), 0))
            taken = np.zeros(len(gc), dtype=bool)
            for k in range(len(pc)):
                hit = False
                if len(gc):
                    cand = np.where(taken, -1.0, ious[k])
                    j = int(np.argmax(cand))
                    if cand[j] >= iou_threshold:
                        taken[j] = True
                        hit = True
                scores[c].append(pc[k, 4])
                flags[c].append(hit)
    return [average_precision(np.array(scores[c]), np.array(flags[c], dtype=bool), n_gt[c]) for c in range(n_classes)]


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in size")
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def eval_segmentation(pred_mask: np.ndarray, gt_mask: np.ndarray, n_classes: int | None = None) -> float:
    """Mean IoU in percent; classes absent from both prediction and truth are skipped."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    if n_classes is None:
        n_classes = int(max(pred_mask.max(initial=0), gt_mask.max(initial=0))) + 1
    conf = confusion_matrix(pred_mask, gt_mask, n_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    if not present.any():
        return math.nan
    return 100.0 * float(np.mean(inter[present] / union[present]))


def eval_soiling(pred_tiles: np.ndarray, gt_tiles: np.ndarray, n_classes: int = 2) -> float:
    """Tile-level F1 in percent, macro-averaged over the soiling classes ``1..n_classes-1``.

    Counts are pooled over every tile of every grid passed in.  Classes with
    no tile in either prediction or truth are skipped; if none remain (both
    sides entirely clean) the score is 100.
    """
    pred_tiles, gt_tiles = np.asarray(pred_tiles), np.asarray(gt_tiles)
    if pred_tiles.shape != gt_tiles.shape:
        raise ValueError(f"shape mismatch {pred_tiles.shape} vs {gt_tiles.shape}")
    conf = confusion_matrix(pred_tiles, gt_tiles, n_classes)
    f1s = []
    for c in range(1, n_classes):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        if tp + fp + fn == 0:
            continue
        f1s.append(2 * tp / (2 * tp + fp + fn))
    if not f1s:
        return 100.0
    return 100.0 * float(np.mean(f1s))


# --------------------------------------------------------------------------
# decoding network outputs


def decode_detections(det_out: np.ndarray, image_size: int, min_score: float = 0.05) -> np.ndarray:
    """Turn a ``[G, G, 1 + C + 4]`` detection map into ``[K, 6]`` scored boxes."""
    g = det_out.shape[0]
    cell = image_size / g
    obj = _sigmoid(det_out[..., 0])
    cls_logits = det_out[..., 1:-4]
    cls_p = np.exp(cls_logits - cls_logits.max(-1, keepdims=True))
    cls_p /= cls_p.sum(-1, keepdims=True)
    box = _sigmoid(det_out[..., -4:])
    score = obj * cls_p.max(-1)
    rows, cols = np.nonzero(score >= min_score)
    out = np.zeros((len(rows), 6), dtype=np.float64)
    for k, (r, c) in enumerate(zip(rows, cols)):
        cx = (c + box[r, c, 0]) * cell
        cy = (r + box[r, c, 1]) * cell
        w = box[r, c, 2] * image_size
        h = box[r, c, 3] * image_size
        out[k] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, score[r, c], np.argmax(cls_p[r, c]))
    return out


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def evaluate_outputs(outputs: Sequence[dict], samples: Sequence[Sample], n_det_classes: int, n_seg_classes: int, n_soil_classes: int) -> MetricsReport:
    """Score per-sample head outputs (channel-last arrays keyed by task name)."""
    det_map = seg_miou = soil_f1 = math.nan
    if outputs and "detection" in outputs[0]:
        idx = [i for i, s in enumerate(samples) if s.has_det]
        preds = [decode_detections(outputs[i]["detection"], samples[i].image_size) for i in idx]
        det_map = eval_detection(preds, [samples[i].boxes for i in idx], 0.5, n_det_classes)
    if outputs and "segmentation" in outputs[0]:
        idx = [i for i, s in enumerate(samples) if s.has_seg]
        if idx:
            pred = np.stack([outputs[i]["segmentation"].argmax(-1) for i in idx])
            seg_miou = eval_segmentation(pred, np.stack([samples[i].seg for i in idx]), n_seg_classes)
    if outputs and "soiling" in outputs[0]:
        idx = [i for i, s in enumerate(samples) if s.has_soil]
        if idx:
            pred = np.stack([outputs[i]["soiling"].argmax(-1) for i in idx])
            soil_f1 = eval_soiling(pred, np.stack([samples[i].soil for i in idx]), n_soil_classes)
    return MetricsReport.of(det_map, seg_miou, soil_f1)
