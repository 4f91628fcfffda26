"""Dataclass configs and the TOML scene-config loader."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

REFERENCE_SEED = 0

CLASS_NAMES = ("empty", "ground", "car", "pole", "vegetation")


@dataclass
class SceneConfig:
    """Synthetic voxel scenes.

    The defaults train on a single small scene, so the 32-wide network has
    room to overfit and the unregularised baseline ends up overconfident.

    Feature noise std is ``noise_base + noise_depth_slope * depth`` with depth
    in metres from the grid origin, so far voxels are harder to classify.
    """

    dims: Tuple[int, int, int] = (16, 16, 8)
    voxel_size: float = 1.6
    class_names: Tuple[str, ...] = CLASS_NAMES
    feature_dim: int = 16
    prototype_scale: float = 1.0
    noise_base: float = 0.6
    noise_depth_slope: float = 0.03
    prototype_seed: int = 7
    ignore_fraction: float = 0.02
    cars_per_scene: int = 14
    poles_per_scene: int = 50
    blobs_per_scene: int = 12
    train_scenes: int = 1
    val_scenes: int = 2
    test_scenes: int = 4

    @property
    def num_classes(self) -> int:
        return len(self.class_names) - 1

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if self.noise_base < 0 or self.noise_depth_slope < 0:
            raise ValueError("noise parameters must be >= 0")
        if self.feature_dim < 1 or self.num_classes < 1:
            raise ValueError("need feature_dim >= 1 and at least one semantic class")
        if not 0 <= self.ignore_fraction < 1:
            raise ValueError("ignore_fraction must lie in [0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.0
    hidden: int = 32
    dropout: float = 0.2
    au_weight: float = 4.0
    ru_weight: float = 6.0
    kl_weight: float = 0.01
    mc_samples: int = 40


@dataclass
class CalibConfig:
    epochs: int = 20
    steps_per_epoch: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = REFERENCE_SEED
    eta_factors: Tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.5)
    depts_T1: float = 1.5
    depts_T2: float = 1.0
    au_weight: float = 1.5
    ru_weight: float = 1.0
    calib_weight: float = 4.0


def _coerce(cls, data: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for k, v in data.items():
        default = getattr(cls(), k)
        out[k] = tuple(v) if isinstance(default, tuple) else type(default)(v)
    return cls(**out)


def load_scene_config(path=None) -> SceneConfig:
    """Read a SceneConfig from TOML. Every key is optional.

    Keys may sit at top level or under a ``[scene]`` table.
    """
    if path is None:
        return SceneConfig()
    data = tomllib.loads(Path(path).read_text())
    data = data.get("scene", data)
    cfg = _coerce(SceneConfig, data)
    cfg.validate()
    return cfg


def dump_scene_config(cfg: SceneConfig) -> str:
    lines = ["[scene]"]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            inner = ", ".join(f'"{x}"' if isinstance(x, str) else repr(x) for x in v)
            lines.append(f"{f.name} = [{inner}]")
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"
