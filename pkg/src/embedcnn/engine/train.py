"""Adam training loop for multi-task graphs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from embedcnn.graph import BatchNorm, Graph, infer_shapes
from embedcnn.engine.execute import backward, run
from embedcnn.engine.loss import LossWeights, Targets, multitask_loss
from embedcnn.taskbench import MetricsReport, Sample, augment, evaluate_outputs

log = logging.getLogger(__name__)


class Diverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    bn_momentum: float = 0.9
    augment: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    task_losses: dict[str, float]
    metrics: MetricsReport | None = None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def rows(self) -> list[dict]:
        out = []
        for r in self.records:
            m = r.metrics.as_dict() if r.metrics else {k: math.nan for k in ("det_map", "seg_miou", "soil_f1", "geo_mean")}
            out.append(
                {
                    "epoch": r.epoch,
                    "loss": r.loss,
                    "det_loss": r.task_losses.get("detection", math.nan),
                    "seg_loss": r.task_losses.get("segmentation", math.nan),
                    "soil_loss": r.task_losses.get("soiling", math.nan),
                    **m,
                }
            )
        return out

    def to_csv(self, path: str | Path) -> None:
        rows = self.rows()
        fields = ["epoch", "loss", "det_loss", "seg_loss", "soil_loss", "det_map", "seg_miou", "soil_f1", "geo_mean"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            for row in rows:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def batch_inputs(samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    return {"y": np.stack([s.y for s in samples]), "uv": np.stack([s.uv for s in samples])}


def head_tasks(graph: Graph) -> dict[str, str]:
    return {h: graph[h].task.value for h in graph.heads}


def class_counts(graph: Graph) -> dict[str, int]:
    """Class count per task inferred from head widths (detection heads carry 1 + C + 4 channels)."""
    shapes = infer_shapes(graph)
    out = {}
    for h in graph.heads:
        task = graph[h].task.value
        c = shapes[h].channels
        out[task] = c - 5 if task == "detection" else c
    return out


def predict(graph: Graph, samples: Sequence[Sample], batch_size: int = 32) -> list[dict[str, np.ndarray]]:
    """Channel-last head outputs per sample, keyed by task name."""
    tasks = head_tasks(graph)
    out: list[dict[str, np.ndarray]] = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        values = run(graph, batch_inputs(chunk)).values
        for k in range(len(chunk)):
            out.append({tasks[h]: values[h][k].transpose(1, 2, 0) for h in graph.heads})
    return out


def evaluate(graph: Graph, samples: Sequence[Sample], batch_size: int = 32) -> MetricsReport:
    counts = class_counts(graph)
    outputs = predict(graph, samples, batch_size)
    return evaluate_outputs(
        outputs,
        samples,
        counts.get("detection", 0),
        counts.get("segmentation", 0),
        counts.get("soiling", 0),
    )


def train(
    graph: Graph,
    dataset: Sequence[Sample],
    config: TrainConfig,
    weights: LossWeights = LossWeights(),
    val_set: Sequence[Sample] | None = None,
) -> tuple[Graph, History]:
    """Adam with L2 added to the gradient (``g + l2 * theta``) on every trainable tensor.

    BatchNorm uses batch statistics and updates running statistics with
    ``running = momentum * running + (1 - momentum) * batch``.  Deterministic
    for a given ``config.seed``.
    """
    if not dataset:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    params = {k: np.array(v, dtype=np.float32) for k, v in graph.params().items()}
    trainable = list(graph.params(trainable_only=True))
    m = {k: np.zeros_like(params[k]) for k in trainable}
    v = {k: np.zeros_like(params[k]) for k in trainable}
    tasks = head_tasks(graph)
    bn_nodes = [nid for nid, node in graph.nodes.items() if isinstance(node, BatchNorm)]
    b1, b2, lr, l2 = np.float32(config.beta1), np.float32(config.beta2), np.float32(config.lr), np.float32(config.l2)
    mom = np.float32(config.bn_momentum)
    step = 0
    history = History()
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        task_sums: dict[str, float] = {}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [dataset[i] for i in idx]
            if config.augment:
                batch = [augment(s, rng) for s in batch]
            tape = run(graph, batch_inputs(batch), train=True, params=params, keep=True)
            outputs = {h: tape.values[h] for h in graph.heads}
            loss, per_task, head_grads = multitask_loss(outputs, Targets.from_samples(batch), weights, tasks)
            if not math.isfinite(loss):
                raise Diverged(f"non-finite loss at epoch {epoch}, step {step}")
            grads = backward(graph, tape, head_grads, params)
            step += 1
            corr1 = 1 - b1**step
            corr2 = 1 - b2**step
            for k in trainable:
                g = grads[k] + l2 * params[k]
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                params[k] = params[k] - lr * (m[k] / corr1) / (np.sqrt(v[k] / corr2) + np.float32(config.eps))
            for nid in bn_nodes:
                mean, var = tape.batch_stats[nid]
                cnt = tape.values[nid].shape[0] * tape.values[nid].shape[2] * tape.values[nid].shape[3]
                unbiased = var * (cnt / max(cnt - 1, 1))
                params[f"{nid}.running_mean"] = mom * params[f"{nid}.running_mean"] + (1 - mom) * mean
                params[f"{nid}.running_var"] = mom * params[f"{nid}.running_var"] + (1 - mom) * unbiased
            total += loss * len(batch)
            count += len(batch)
            for t, val in per_task.items():
                task_sums[t] = task_sums.get(t, 0.0) + val * len(batch)
        metrics = None
        current = graph.with_params(params)
        if val_set and config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
            metrics = evaluate(current, val_set)
        history.records.append(EpochRecord(epoch, total / count, {t: s / count for t, s in task_sums.items()}, metrics))
        log.debug("epoch %d loss %.4f %s", epoch, total / count, metrics)
    return graph.with_params(params), history
