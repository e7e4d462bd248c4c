"""Multi-task loss: weighted sum of detection, segmentation and soiling losses.

All head outputs are batched channel-first arrays.  Each task loss is the
mean of per-sample losses over the samples annotated for that task, so a
sample without annotations for a task contributes nothing to that head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from embedcnn.engine.ops import log_softmax, sigmoid, softplus


@dataclass(frozen=True)
class LossWeights:
    w_det: float = 1.0
    w_seg: float = 1.0
    w_soil: float = 1.0

    def __post_init__(self):
        ws = (self.w_det, self.w_seg, self.w_soil)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError(f"loss weights must be non-negative with at least one positive: {ws}")

    def for_task(self, task: str) -> float:
        return {"detection": self.w_det, "segmentation": self.w_seg, "soiling": self.w_soil}[task]


@dataclass
class Targets:
    """Batched annotations; the ``has_*`` masks flag which samples carry each task."""

    det: np.ndarray  # [N, G, G, 6]
    seg: np.ndarray  # [N, H, W] int
    soil: np.ndarray  # [N, 4, 4] int
    has_det: np.ndarray
    has_seg: np.ndarray
    has_soil: np.ndarray

    @classmethod
    def from_samples(cls, samples) -> "Targets":
        return cls(
            det=np.stack([s.det for s in samples]),
            seg=np.stack([s.seg for s in samples]),
            soil=np.stack([s.soil for s in samples]),
            has_det=np.array([s.has_det for s in samples]),
            has_seg=np.array([s.has_seg for s in samples]),
            has_soil=np.array([s.has_soil for s in samples]),
        )


def cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Mean over annotated samples of the per-sample mean pixel cross-entropy.

    ``logits`` is ``[N, C, H, W]``, ``labels`` ``[N, H, W]``.
    """
    n, c, h, w = logits.shape
    active = int(mask.sum())
    grad = np.zeros_like(logits)
    if active == 0:
        return 0.0, grad
    lsm = log_softmax(logits.astype(np.float64), axis=1)
    onehot = np.eye(c, dtype=np.float64)[labels].transpose(0, 3, 1, 2)
    per_sample = -(lsm * onehot).sum(axis=1).mean(axis=(1, 2))
    loss = float((per_sample * mask).sum() / active)
    g = (np.exp(lsm) - onehot) / (h * w * active)
    grad[:] = g * mask.reshape(n, 1, 1, 1)
    return loss, grad


def detection_loss(out: np.ndarray, det: np.ndarray, mask: np.ndarray):
    """YOLO-style loss on a ``[N, 1 + C + 4, G, G]`` map.

    Per sample: objectness BCE averaged over all cells, plus class
    cross-entropy and squared error of the sigmoid box terms averaged over
    object cells.
    """
    n, ch, g, _ = out.shape
    n_cls = ch - 5
    active = int(mask.sum())
    grad = np.zeros_like(out)
    if active == 0:
        return 0.0, grad
    z = out.astype(np.float64)
    t = det.transpose(0, 3, 1, 2).astype(np.float64)  # [N, 6, G, G]
    obj_t = t[:, 0]
    n_obj = np.maximum(obj_t.sum(axis=(1, 2)), 1.0)

    bce = (softplus(z[:, 0]) - obj_t * z[:, 0]).mean(axis=(1, 2))
    d_obj = (sigmoid(z[:, 0]) - obj_t) / (g * g)

    logits = z[:, 1 : 1 + n_cls]
    lsm = log_softmax(logits, axis=1)
    labels = t[:, 1].astype(np.int64).clip(0, n_cls - 1)
    onehot = np.eye(n_cls)[labels].transpose(0, 3, 1, 2)
    ce = (-(lsm * onehot).sum(axis=1) * obj_t).sum(axis=(1, 2)) / n_obj
    d_cls = (np.exp(lsm) - onehot) * (obj_t / n_obj.reshape(n, 1, 1))[:, None]

    sb = sigmoid(z[:, 1 + n_cls :])
    diff = sb - t[:, 2:6]
    box = ((diff**2).sum(axis=1) * obj_t).sum(axis=(1, 2)) / n_obj
    d_box = 2 * diff * sb * (1 - sb) * (obj_t / n_obj.reshape(n, 1, 1))[:, None]

    per_sample = bce + ce + box
    loss = float((per_sample * mask).sum() / active)
    scale = mask.reshape(n, 1, 1).astype(np.float64) / active
    grad[:, 0] = d_obj * scale
    grad[:, 1 : 1 + n_cls] = d_cls * scale[:, None]
    grad[:, 1 + n_cls :] = d_box * scale[:, None]
    return loss, grad


def multitask_loss(outputs: Mapping[str, np.ndarray], targets: Targets, weights: LossWeights, head_tasks: Mapping[str, str]):
    """Total weighted loss, per-task losses, and gradients w.r.t. each head output.

    ``outputs`` maps head id to its batched output; ``head_tasks`` maps head
    id to task name.  Heads with zero weight receive no gradient entry.
    """
    per_task: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for head, task in head_tasks.items():
        out = outputs[head]
        if task == "detection":
            loss, g = detection_loss(out, targets.det, targets.has_det)
        elif task == "segmentation":
            loss, g = cross_entropy(out, targets.seg, targets.has_seg)
        else:
            loss, g = cross_entropy(out, targets.soil, targets.has_soil)
        w = weights.for_task(task)
        per_task[task] = loss
        total += w * loss
        if w != 0:
            grads[head] = (w * g).astype(out.dtype)
    return total, per_task, grads
