"""Reference float execution, multi-task loss, gradients and training.

This is the numerical oracle the quantized path in :mod:`embedcnn.quantizer`
is checked against.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from embedcnn.graph import Graph
from embedcnn.engine.execute import Tape, backward as _backward, run
from embedcnn.engine.loss import LossWeights, Targets, multitask_loss
from embedcnn.engine.train import (
    Diverged,
    EpochRecord,
    History,
    TrainConfig,
    batch_inputs,
    class_counts,
    evaluate,
    head_tasks,
    predict,
    train,
)
from embedcnn.taskbench import Sample


def forward(
    graph: Graph, sample: Sample | Mapping[str, np.ndarray], dtype=np.float32, ordered: bool = False
) -> dict[str, np.ndarray]:
    """Head outputs for one sample in eval mode, channel-last.

    Detection heads give ``[G, G, 1 + C + 4]``, segmentation heads
    ``[H, W, C]`` logits and soiling heads ``[4, 4, C_soil]`` logits.
    """
    inputs = sample.inputs() if isinstance(sample, Sample) else sample
    values = run(graph, {k: np.asarray(v)[None] for k, v in inputs.items()}, dtype=dtype, ordered=ordered).values
    return {h: values[h][0].transpose(1, 2, 0) for h in graph.heads}


def loss(outputs: Mapping[str, np.ndarray], targets: Targets, weights: LossWeights, graph: Graph):
    """``(total, per_task)`` for batched channel-first head outputs."""
    total, per_task, _ = multitask_loss(outputs, targets, weights, head_tasks(graph))
    return total, per_task


def backward(
    graph: Graph,
    samples: Sequence[Sample],
    weights: LossWeights = LossWeights(),
    train: bool = True,
    dtype=np.float32,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradient of every trainable tensor for one batch."""
    tape = run(graph, batch_inputs(samples), train=train, keep=True, dtype=dtype)
    outputs = {h: tape.values[h] for h in graph.heads}
    total, _, head_grads = multitask_loss(outputs, Targets.from_samples(samples), weights, head_tasks(graph))
    return total, _backward(graph, tape, head_grads)


__all__ = [
    "Diverged",
    "EpochRecord",
    "History",
    "LossWeights",
    "Tape",
    "Targets",
    "TrainConfig",
    "backward",
    "class_counts",
    "evaluate",
    "forward",
    "head_tasks",
    "loss",
    "multitask_loss",
    "predict",
    "run",
    "train",
]
