"""Procedural voxel scenes: ground plane, car boxes, pole columns, vegetation blobs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ..config import SceneConfig
from ..core import IGNORE, VoxelBatch

GROUND, CAR, POLE, VEGETATION = 1, 2, 3, 4


@dataclass
class SceneDataset:
    train: VoxelBatch
    val: VoxelBatch
    test: VoxelBatch
    config: SceneConfig

    def split(self, name: str) -> VoxelBatch:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def class_prototypes(cfg: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.prototype_seed)
    return cfg.prototype_scale * rng.standard_normal((cfg.num_classes + 1, cfg.feature_dim))


def voxel_depths(cfg: SceneConfig) -> np.ndarray:
    """Distance of every voxel centre from the grid origin, flattened row-major."""
    L, W, H = (int(d) for d in cfg.dims)
    ii, jj, kk = np.meshgrid(np.arange(L), np.arange(W), np.arange(H), indexing="ij")
    centres = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) + 0.5
    return cfg.voxel_size * np.sqrt(np.sum(centres ** 2, axis=1))


def scene_labels(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    L, W, H = (int(d) for d in cfg.dims)
    grid = np.zeros((L, W, H), dtype=np.int64)
    grid[:, :, 0] = GROUND
    top = min(H, 3)
    for _ in range(cfg.cars_per_scene):
        lx, ly = rng.integers(3, 6), rng.integers(2, 4)
        x, y = rng.integers(0, max(1, L - lx + 1)), rng.integers(0, max(1, W - ly + 1))
        grid[x:x + lx, y:y + ly, 1:top] = CAR
    for _ in range(cfg.poles_per_scene):
        x, y, h = rng.integers(0, L), rng.integers(0, W), rng.integers(4, 8)
        grid[x, y, 1:1 + h] = POLE
    ii, jj, kk = np.meshgrid(np.arange(L), np.arange(W), np.arange(H), indexing="ij")
    for _ in range(cfg.blobs_per_scene):
        c = rng.uniform([0, 0, 2], [L, W, max(2.0, H - 2)])
        r = rng.uniform(1.5, 3.0)
        inside = (ii - c[0]) ** 2 + (jj - c[1]) ** 2 + ((kk - c[2]) * 1.5) ** 2 <= r * r
        grid[inside & (grid == 0)] = VEGETATION
    return grid.reshape(-1)


def make_scene(cfg: SceneConfig, rng: np.random.Generator, prototypes=None,
               depths=None) -> VoxelBatch:
    prototypes = class_prototypes(cfg) if prototypes is None else prototypes
    depths = voxel_depths(cfg) if depths is None else depths
    labels = scene_labels(cfg, rng)
    std = cfg.noise_base + cfg.noise_depth_slope * depths
    features = prototypes[labels] + std[:, None] * rng.standard_normal((labels.size, cfg.feature_dim))
    ignore = rng.random(labels.size) < cfg.ignore_fraction
    labels = np.where(ignore, IGNORE, labels)
    logits = np.zeros((labels.size, cfg.num_classes + 1), dtype=np.float32)
    return VoxelBatch(labels, logits, cfg.num_classes, features=features, depths=depths)


def generate_scenes(cfg: SceneConfig, seed: int) -> SceneDataset:
    """Train/val/test splits, one flattened VoxelBatch per split.

    Scene k of the whole dataset draws from its own child of
    ``SeedSequence(seed)``, so a split does not depend on how many scenes the
    other splits hold. Logits are zero placeholders.
    """
    cfg.validate()
    prototypes = class_prototypes(cfg)
    depths = voxel_depths(cfg)
    counts = [cfg.train_scenes, cfg.val_scenes, cfg.test_scenes]
    if min(counts) < 1:
        raise ValueError("every split needs at least one scene")
    root = np.random.SeedSequence(seed)
    splits: List[VoxelBatch] = []
    for split_idx, count in enumerate(counts):
        children = np.random.SeedSequence(root.entropy, spawn_key=(split_idx,)).spawn(count)
        scenes = [make_scene(cfg, np.random.default_rng(ss), prototypes, depths) for ss in children]
        splits.append(VoxelBatch.concat(scenes))
    return SceneDataset(*splits, config=cfg)
