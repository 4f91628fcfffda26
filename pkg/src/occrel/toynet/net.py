"""Small MLP voxel classifier with hand-written backprop.

The network is split the way an occupancy model is: a backbone maps the
sensor input x (width d_in) to a dense voxel feature v (width ``hidden``),
and a linear completion head maps v to S+1 logits. The uncertainty heads,
feature mix-up and DUL all act on v.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..uncert import UncertaintyHead

MODEL_FORMAT = "occrel-toynet"
MODEL_VERSION = 1


class ToyNet:
    """x -> hidden -> hidden (= v) -> S+1, ReLU, optional dropout after each hidden layer."""

    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 32,
                 dropout: float = 0.2, seed: int = 0, with_dul: bool = False):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        d, h, c = feature_dim, hidden, num_classes + 1
        self.params: Dict[str, np.ndarray] = {
            "W1": rng.normal(0.0, np.sqrt(2.0 / d), (d, h)),
            "b1": np.zeros(h),
            "W2": rng.normal(0.0, np.sqrt(2.0 / h), (h, h)),
            "b2": np.zeros(h),
            "W3": rng.normal(0.0, np.sqrt(1.0 / h), (h, c)),
            "b3": np.zeros(c),
        }
        self.head = UncertaintyHead(h, rng=rng)
        self.dul_head: Optional[UncertaintyHead] = UncertaintyHead(h, out_dim=h, rng=rng) if with_dul else None

    @property
    def voxel_dim(self) -> int:
        return self.hidden

    # -- parameter plumbing ------------------------------------------------
    def all_params(self) -> Dict[str, np.ndarray]:
        out = {"net." + k: v for k, v in self.params.items()}
        out.update({"head." + k: v for k, v in self.head.params.items()})
        if self.dul_head is not None:
            out.update({"dul." + k: v for k, v in self.dul_head.params.items()})
        return out

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.all_params().values())

    def dropout_masks(self, n: int, rng: np.random.Generator, p: Optional[float] = None):
        p = self.dropout if p is None else p
        if p <= 0:
            return (np.ones((n, self.hidden)), np.ones((n, self.hidden)))
        keep = 1.0 - p
        return tuple((rng.random((n, self.hidden)) < keep) / keep for _ in range(2))

    # -- backbone ------------------------------------------------------------
    def embed(self, x, masks=None):
        """Voxel features v for sensor input x; returns (v, cache)."""
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ValueError(f"expected features of width {self.feature_dim}, got {x.shape}")
        a1 = x @ p["W1"] + p["b1"]
        h1 = np.maximum(a1, 0.0)
        if masks is not None:
            h1 = h1 * masks[0]
        a2 = h1 @ p["W2"] + p["b2"]
        v = np.maximum(a2, 0.0)
        if masks is not None:
            v = v * masks[1]
        return v, (x, a1, h1, a2, masks)

    def embed_backward(self, cache, dv):
        x, a1, h1, a2, masks = cache
        p = self.params
        if masks is not None:
            dv = dv * masks[1]
        da2 = dv * (a2 > 0)
        g = {"W2": h1.T @ da2, "b2": da2.sum(axis=0)}
        dh1 = da2 @ p["W2"].T
        if masks is not None:
            dh1 = dh1 * masks[0]
        da1 = dh1 * (a1 > 0)
        g["W1"] = x.T @ da1
        g["b1"] = da1.sum(axis=0)
        return g, da1 @ p["W1"].T

    # -- completion head -----------------------------------------------------
    def complete(self, v):
        return np.asarray(v, dtype=np.float64) @ self.params["W3"] + self.params["b3"]

    def complete_backward(self, v, dlogits):
        g = {"W3": v.T @ dlogits, "b3": dlogits.sum(axis=0)}
        return g, dlogits @ self.params["W3"].T

    # -- whole network ---------------------------------------------------------
    def forward(self, x, masks=None):
        v, cache = self.embed(x, masks)
        return self.complete(v), (v, cache)

    def __call__(self, x, masks=None):
        return self.forward(x, masks)[0]

    def backward(self, cache, dlogits, dv_extra=None):
        """Gradients keyed like ``params`` and dL/dx.

        ``dv_extra`` is any additional gradient arriving at the voxel feature
        from branches attached to it.
        """
        v, ecache = cache
        g, dv = self.complete_backward(v, dlogits)
        if dv_extra is not None:
            dv = dv + dv_extra
        g_embed, dx = self.embed_backward(ecache, dv)
        g.update(g_embed)
        return g, dx

    # -- persistence ----------------------------------------------------------
    def to_dict(self) -> dict:
        enc = lambda a: {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
        return {
            "format": MODEL_FORMAT, "version": MODEL_VERSION,
            "feature_dim": self.feature_dim, "num_classes": self.num_classes,
            "hidden": self.hidden, "dropout": self.dropout,
            "params": {k: enc(v) for k, v in self.all_params().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyNet":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("not an occrel toy network file")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in d["params"].items()}
        with_dul = any(k.startswith("dul.") for k in params)
        net = cls(d["feature_dim"], d["num_classes"], d["hidden"], d["dropout"], with_dul=with_dul)
        groups = {"net": net.params, "head": net.head.params,
                  "dul": net.dul_head.params if net.dul_head else None}
        for name, arr in params.items():
            group, key = name.split(".", 1)
            groups[group][key] = arr
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ToyNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


class CompletionHead:
    """The frozen linear completion head of a ToyNet, for offline calibration."""

    def __init__(self, net: ToyNet):
        self.A = net.params["W3"].copy()
        self.c = net.params["b3"].copy()

    def forward(self, v):
        return np.asarray(v, dtype=np.float64) @ self.A + self.c, None

    def backward_input(self, cache, dlogits):
        return dlogits @ self.A.T
