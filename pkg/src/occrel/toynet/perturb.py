"""Inference-time corruptions of a dump (noise on features/logits, block drop)."""
from __future__ import annotations

import numpy as np

from ..core import VoxelBatch

PERTURB_KINDS = ("feature_noise", "logit_noise", "block_drop")
# weak / strong presets per kind
PRESETS = {
    "feature_noise": (0.5, 1.0),
    "logit_noise": (0.5, 1.0),
    "block_drop": (0.1, 0.3),
}
BLOCK_SIZE = 256


def perturb(batch: VoxelBatch, kind: str, magnitude: float, seed: int = 0,
            block_size: int = BLOCK_SIZE) -> VoxelBatch:
    """Return a corrupted copy of ``batch``; labels are never touched.

    ``block_drop`` zeroes the features of randomly chosen runs of
    ``block_size`` consecutive voxels until ``round(magnitude * n)`` voxels
    are covered (the last chosen run is trimmed to hit the count exactly).
    """
    if kind not in PERTURB_KINDS:
        raise ValueError(f"unknown perturbation {kind!r}")
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    rng = np.random.default_rng(seed)
    if kind == "logit_noise":
        z = batch.logits.astype(np.float64)
        return batch.replace(logits=z + magnitude * rng.standard_normal(z.shape))
    if batch.features is None:
        raise ValueError(f"{kind} needs features")
    v = batch.features.astype(np.float64)
    if kind == "feature_noise":
        return batch.replace(features=v + magnitude * rng.standard_normal(v.shape))
    if magnitude > 1:
        raise ValueError("block_drop fraction must be <= 1")
    n = batch.n
    target = int(round(magnitude * n))
    starts = np.arange(0, n, block_size)
    dropped = np.zeros(n, dtype=bool)
    remaining = target
    for s in starts[rng.permutation(len(starts))]:
        if remaining <= 0:
            break
        run = min(block_size, n - s, remaining)
        dropped[s:s + run] = True
        remaining -= run
    v[dropped] = 0.0
    return batch.replace(features=v)
