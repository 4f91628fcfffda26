"""Online uncertainty-learning objectives.

Covers the per-voxel sigma head, logit sampling for the absolute loss, the
pairwise mix-up used by the relative loss, the DUL feature Gaussian and
MC-dropout aggregation. Every loss has a ``*_grad`` twin returning the
gradient with respect to its inputs so callers can chain it by hand.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import IGNORE, VoxelBatch, log_softmax, softmax

SIGMA_MIN = 1e-3
HIDDEN = 32


class UncertaintyHead:
    """Feature -> hidden(32, ReLU) -> softplus + SIGMA_MIN.

    ``out_dim=1`` gives the scalar sigma used by the absolute/relative losses;
    DUL uses ``out_dim=d`` for a per-dimension feature sigma.
    """

    def __init__(self, in_dim: int, out_dim: int = 1, hidden: int = HIDDEN,
                 rng: Optional[np.random.Generator] = None, params=None):
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, hidden
        if params is not None:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            return
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = {
            "W1": rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, 0.1 / np.sqrt(hidden), (hidden, out_dim)),
            "b2": np.zeros(out_dim),
        }

    def forward(self, v):
        p = self.params
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.in_dim:
            raise ValueError(f"expected features of width {self.in_dim}, got {v.shape}")
        pre = v @ p["W1"] + p["b1"]
        h = np.maximum(pre, 0.0)
        o = h @ p["W2"] + p["b2"]
        sigma = np.logaddexp(0.0, o) + SIGMA_MIN
        if self.out_dim == 1:
            sigma = sigma[:, 0]
        return sigma, (v, pre, h, o)

    def __call__(self, v):
        return self.forward(v)[0]

    def backward(self, cache, dsigma):
        """Gradients of a scalar loss given dL/dsigma. Returns (grads, dL/dv)."""
        v, pre, h, o = cache
        p = self.params
        dsigma = np.asarray(dsigma, dtype=np.float64).reshape(o.shape)
        do = dsigma / (1.0 + np.exp(-o))
        dh = do @ p["W2"].T
        dpre = dh * (pre > 0)
        grads = {
            "W2": h.T @ do,
            "b2": do.sum(axis=0),
            "W1": v.T @ dpre,
            "b1": dpre.sum(axis=0),
        }
        return grads, dpre @ p["W1"].T


# -- cross entropy ----------------------------------------------------------

def cross_entropy_grad(logits, labels, class_weights=None):
    """Mean (optionally class-weighted) CE over non-IGNORE voxels.

    With weights the mean is normalised by the summed weights of the counted
    voxels. Returns ``(loss, dL/dlogits)``; IGNORE rows get zero gradient.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    valid = y != IGNORE
    if not valid.any():
        raise ValueError("no non-IGNORE voxels in batch")
    yv = np.where(valid, y, 0).astype(np.int64)
    if class_weights is None:
        w = valid.astype(np.float64)
    else:
        w = np.asarray(class_weights, dtype=np.float64)[yv] * valid
    norm = w.sum()
    logp = log_softmax(z)
    nll = -logp[np.arange(len(yv)), yv]
    loss = float(np.dot(w, nll) / norm)
    grad = np.exp(logp)
    grad[np.arange(len(yv)), yv] -= 1.0
    grad *= (w / norm)[:, None]
    return loss, grad


# -- absolute uncertainty -----------------------------------------------------

def sample_absolute(z, sigma, noise):
    """Reparameterised logit sample z + sigma * eps, sigma broadcast over classes."""
    z = np.asarray(z, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be > 0")
    return z + sigma[..., None] * np.asarray(noise, dtype=np.float64)


def loss_absolute(sampled_logits, labels) -> float:
    return cross_entropy_grad(sampled_logits, labels)[0]


def loss_absolute_grad(z, sigma, noise, labels, class_weights=None):
    """Absolute loss at z + sigma*eps with gradients for z and sigma."""
    zhat = sample_absolute(z, sigma, noise)
    loss, dzhat = cross_entropy_grad(zhat, labels, class_weights)
    dsigma = np.sum(dzhat * noise, axis=-1)
    return loss, dzhat, dsigma


# -- relative uncertainty -----------------------------------------------------

def mix_weight(sigma_i, sigma_j):
    """lambda = sigma_i / (sigma_i + sigma_j)."""
    sigma_i = np.asarray(sigma_i, dtype=np.float64)
    sigma_j = np.asarray(sigma_j, dtype=np.float64)
    return sigma_i / (sigma_i + sigma_j)


@dataclass
class MixPairs:
    """A batch of mixed voxel pairs (one row per pair)."""

    i: np.ndarray
    j: np.ndarray
    lam: np.ndarray
    mixed: np.ndarray
    target: np.ndarray


def pair_indices(labels, rng: np.random.Generator):
    """Pair every non-IGNORE voxel with one drawn from a seeded shuffle."""
    eligible = np.flatnonzero(np.asarray(labels).reshape(-1) != IGNORE)
    if eligible.size < 2:
        raise ValueError("need at least 2 non-IGNORE voxels to form pairs")
    return eligible, eligible[rng.permutation(eligible.size)]


def two_hot(yi, yj, width: int):
    t = np.zeros((len(yi), width))
    np.add.at(t, (np.arange(len(yi)), yi), 1.0)
    np.add.at(t, (np.arange(len(yj)), yj), 1.0)
    return t


def mix(features, sigmas, labels, i, j, width: int) -> MixPairs:
    v = np.asarray(features, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    lam = mix_weight(s[i], s[j])
    mixed = lam[:, None] * v[i] + (1.0 - lam[:, None]) * v[j]
    return MixPairs(i, j, lam, mixed, two_hot(y[i], y[j], width))


def make_pairs(batch: VoxelBatch, rng: np.random.Generator, sigmas=None) -> MixPairs:
    """Shuffle-pair the eligible voxels of ``batch`` and mix their features."""
    if batch.features is None:
        raise ValueError("make_pairs needs features")
    sigmas = batch.sigmas if sigmas is None else sigmas
    if sigmas is None:
        raise ValueError("make_pairs needs sigmas")
    i, j = pair_indices(batch.labels, rng)
    return mix(batch.features, sigmas, batch.labels, i, j, batch.num_classes + 1)


def loss_relative_grad(mixed_logits, target):
    """-sum_c target_c log softmax(m)_c averaged over pairs; returns (loss, dL/dm)."""
    m = np.asarray(mixed_logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    logp = log_softmax(m)
    n = m.shape[0]
    loss = float(-np.sum(t * logp) / n)
    grad = (np.exp(logp) * t.sum(axis=1, keepdims=True) - t) / n
    return loss, grad


def loss_relative(mixed_logits, target) -> float:
    return loss_relative_grad(mixed_logits, target)[0]


def mix_backward(dmixed, pairs: MixPairs, features, sigmas, n: int):
    """Push dL/d(mixed feature) back onto the per-voxel sigmas (shape (n,))."""
    v = np.asarray(features, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    si, sj = s[pairs.i], s[pairs.j]
    dlam = np.sum(dmixed * (v[pairs.i] - v[pairs.j]), axis=1)
    denom = (si + sj) ** 2
    dsigma = np.zeros(n)
    np.add.at(dsigma, pairs.i, dlam * sj / denom)
    np.add.at(dsigma, pairs.j, -dlam * si / denom)
    return dsigma


# -- DUL -------------------------------------------------------------------

def dul_transform(v, sigma_vec, noise):
    """Feature sample v + sigma * eps and KL(N(v, sigma^2) || N(0, I)) per row."""
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(sigma_vec, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("DUL sigma components must be > 0")
    vhat = v + s * np.asarray(noise, dtype=np.float64)
    kl = 0.5 * np.sum(s ** 2 + v ** 2 - 1.0 - np.log(s ** 2), axis=-1)
    return vhat, kl


def dul_kl_grad_sigma(sigma_vec):
    s = np.asarray(sigma_vec, dtype=np.float64)
    return s - 1.0 / s


# -- MC dropout ----------------------------------------------------------------

def mcd_aggregate(logit_samples):
    """Mean logits over K passes and normalised entropy of the mean softmax.

    ``logit_samples`` has shape (K, ..., C).
    """
    z = np.asarray(logit_samples, dtype=np.float64)
    if z.ndim < 2 or z.shape[0] == 0:
        raise ValueError("need K >= 1 logit samples")
    width = z.shape[-1]
    mean_p = softmax(z).mean(axis=0)
    logp = np.log(np.where(mean_p > 0, mean_p, 1.0))
    entropy = -np.sum(mean_p * logp, axis=-1)
    unc = np.clip(entropy / np.log(width), 0.0, 1.0) if width > 1 else np.zeros_like(entropy)
    return z.mean(axis=0), unc
