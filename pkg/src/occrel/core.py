"""Voxel batches, softmax and the argmax/geometric views shared by every module."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Largest value a u16 label can hold; marks ground-truth-invalid voxels.
IGNORE = 65535
EMPTY = 0


class BatchError(ValueError):
    """A VoxelBatch violates one of its invariants."""


def _opt_f32(x):
    if x is None:
        return None
    return np.ascontiguousarray(x, dtype=np.float32)


@dataclass
class VoxelBatch:
    """Flattened per-voxel predictions and ground truth.

    Float arrays are held as float32 (the on-disk precision); metrics and
    calibrators upcast to float64 internally.

    Args:
        labels: (n,) ground-truth class in ``0..num_classes`` or ``IGNORE``.
        logits: (n, num_classes + 1) raw scores, column 0 is "empty".
        num_classes: number of semantic classes S (empty excluded).
        features: optional (n, d) voxel features.
        sigmas: optional (n,) strictly positive uncertainties.
        depths: optional (n,) non-negative distances to the sensor origin.
    """

    labels: np.ndarray
    logits: np.ndarray
    num_classes: int
    features: Optional[np.ndarray] = None
    sigmas: Optional[np.ndarray] = None
    depths: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float32)
        if self.logits.ndim == 1 and self.labels.size == 0:
            self.logits = self.logits.reshape(0, self.num_classes + 1)
        self.features = _opt_f32(self.features)
        self.sigmas = _opt_f32(self.sigmas)
        self.depths = _opt_f32(self.depths)
        if self.features is not None and self.features.ndim == 1 and self.labels.size == 0:
            self.features = self.features.reshape(0, 0)
        self.validate()

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    @property
    def valid_mask(self) -> np.ndarray:
        return self.labels != IGNORE

    def validate(self) -> None:
        n, width = self.n, self.num_classes + 1
        if self.num_classes < 1:
            raise BatchError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.logits.shape != (n, width):
            raise BatchError(f"logits shape {self.logits.shape} != ({n}, {width})")
        bad = (self.labels != IGNORE) & ((self.labels < 0) | (self.labels >= width))
        if bad.any():
            raise BatchError(f"label out of range at voxel {int(np.flatnonzero(bad)[0])}")
        if self.features is not None and (self.features.ndim != 2 or self.features.shape[0] != n):
            raise BatchError(f"features shape {self.features.shape} incompatible with n={n}")
        if self.sigmas is not None:
            if self.sigmas.shape != (n,):
                raise BatchError(f"sigmas shape {self.sigmas.shape} != ({n},)")
            if not (np.all(np.isfinite(self.sigmas)) and np.all(self.sigmas > 0)):
                raise BatchError("sigmas must be finite and > 0")
        if self.depths is not None:
            if self.depths.shape != (n,):
                raise BatchError(f"depths shape {self.depths.shape} != ({n},)")
            if not (np.all(np.isfinite(self.depths)) and np.all(self.depths >= 0)):
                raise BatchError("depths must be finite and >= 0")

    def replace(self, **changes) -> "VoxelBatch":
        kw = dict(labels=self.labels, logits=self.logits, num_classes=self.num_classes,
                  features=self.features, sigmas=self.sigmas, depths=self.depths)
        kw.update(changes)
        return VoxelBatch(**kw)

    def subset(self, idx) -> "VoxelBatch":
        take = lambda a: None if a is None else a[idx]
        return VoxelBatch(self.labels[idx], self.logits[idx], self.num_classes,
                          take(self.features), take(self.sigmas), take(self.depths))

    @staticmethod
    def concat(batches) -> "VoxelBatch":
        batches = list(batches)
        first = batches[0]

        def cat(name):
            parts = [getattr(b, name) for b in batches]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts)

        return VoxelBatch(cat("labels"), cat("logits"), first.num_classes,
                          cat("features"), cat("sigmas"), cat("depths"))


@dataclass
class ProbBatch:
    """Per-voxel class distribution with the reported label and its confidence."""

    probs: np.ndarray
    pred_label: np.ndarray
    confidence: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.confidence is None:
            self.confidence = np.take_along_axis(self.probs, self.pred_label[:, None], axis=1)[:, 0]


def softmax(z, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``; rejects NaN/Inf input."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains NaN or Inf")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def argmax_lowest(probs) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lower class.
    return np.argmax(probs, axis=-1)


def predict(batch: VoxelBatch) -> ProbBatch:
    probs = softmax(batch.logits.astype(np.float64))
    return ProbBatch(probs, argmax_lowest(probs))


def geometric_view(p: ProbBatch):
    """Collapse an (S+1)-way prediction to occupied/empty.

    Returns ``(pred_occupied, geo_confidence)`` where the confidence is the
    probability mass the model puts on the reported binary outcome.
    """
    p_empty = p.probs[:, EMPTY]
    occupied = p.pred_label != EMPTY
    conf = np.where(occupied, 1.0 - p_empty, p_empty)
    return occupied, conf
