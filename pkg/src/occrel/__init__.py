"""Reliability evaluation, scaling calibration and hybrid uncertainty learning
for voxel occupancy predictions."""
from .core import IGNORE, ProbBatch, VoxelBatch, geometric_view, predict, softmax
from .metrics import (MetricReport, MetricUndefined, ece, evaluate, iou_binary, miou_semantic,
                      prr, rejection_curve, reliability_diagram)

__version__ = "0.1.0"

__all__ = [
    "IGNORE", "ProbBatch", "VoxelBatch", "geometric_view", "predict", "softmax",
    "MetricReport", "MetricUndefined", "ece", "evaluate", "iou_binary", "miou_semantic",
    "prr", "rejection_curve", "reliability_diagram",
]
