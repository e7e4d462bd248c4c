"""Compression and deployment-cost toolchain for compact multi-task CNNs."""

from embedcnn.graph import (
    Add,
    BatchNorm,
    Concat,
    Conv,
    Edge,
    Graph,
    GraphBuilder,
    Head,
    Input,
    ReLU,
    Task,
    TensorShape,
    TransposedConv,
    count_flops,
    count_params,
    infer_shapes,
    receptive_field,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "Add",
    "BatchNorm",
    "Concat",
    "Conv",
    "Edge",
    "Graph",
    "GraphBuilder",
    "Head",
    "Input",
    "ReLU",
    "Task",
    "TensorShape",
    "TransposedConv",
    "count_flops",
    "count_params",
    "infer_shapes",
    "receptive_field",
    "validate",
]
