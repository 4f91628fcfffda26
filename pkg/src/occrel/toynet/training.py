"""Online training of the toy network under each uncertainty-learning mode.

Losses per mode (L_occ is class-weighted cross entropy):

* baseline: L_occ
* hau:      L_occ + L_au
* dul:      L_occ on sampled features + kl_weight * KL
* mcd:      L_occ with dropout active
* reliocc:  L_occ + au_weight * L_au + ru_weight * L_ru
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ..config import TrainConfig
from ..core import IGNORE, VoxelBatch
from ..optim import AdamW
from ..uncert import (cross_entropy_grad, dul_kl_grad_sigma, dul_transform,
                      loss_absolute_grad, loss_relative_grad, mcd_aggregate, mix,
                      mix_backward, pair_indices)
from .net import ToyNet

MODES = ("baseline", "hau", "dul", "mcd", "reliocc")
LOSS_TERMS = ("occ", "au", "ru", "kl", "total")


class TrainingError(RuntimeError):
    def __init__(self, step: int, detail: str = "loss is NaN"):
        super().__init__(f"{detail} at step {step}")
        self.step = step


def class_weights(labels, num_classes: int) -> np.ndarray:
    """Inverse class frequency over non-IGNORE voxels, normalised to mean 1."""
    y = np.asarray(labels)
    y = y[y != IGNORE]
    counts = np.bincount(y, minlength=num_classes + 1).astype(np.float64)
    w = 1.0 / np.maximum(counts, 1.0)
    return w / w.mean()


@dataclass
class Draws:
    """All randomness consumed by one training step."""

    noise: Optional[np.ndarray] = None
    pair_i: Optional[np.ndarray] = None
    pair_j: Optional[np.ndarray] = None
    masks: Optional[tuple] = None
    dul_noise: Optional[np.ndarray] = None


def make_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Independent generators for shuffling, logit noise, pairing, dropout, DUL."""
    names = ("shuffle", "noise", "pairs", "dropout", "dul")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def draw(net: ToyNet, x, y, mode: str, streams, cfg: TrainConfig) -> Draws:
    n = len(y)
    d = Draws()
    if mode in ("hau", "reliocc"):
        d.noise = streams["noise"].standard_normal((n, net.num_classes + 1))
    if mode == "reliocc":
        d.pair_i, d.pair_j = pair_indices(y, streams["pairs"])
    if mode == "mcd":
        d.masks = net.dropout_masks(n, streams["dropout"], cfg.dropout)
    if mode == "dul":
        d.dul_noise = streams["dul"].standard_normal((n, net.voxel_dim))
    return d


def loss_and_grads(net: ToyNet, x, y, mode: str, cfg: TrainConfig, weights, draws: Draws):
    """Total loss, per-term breakdown and gradients keyed like ``net.all_params()``."""
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    terms = {k: 0.0 for k in LOSS_TERMS}
    grads = {"net." + k: np.zeros_like(v) for k, v in net.params.items()}

    def add(prefix, g, scale=1.0):
        for k, v in g.items():
            key = prefix + k
            grads[key] = grads.get(key, 0.0) + scale * v

    valid = y != IGNORE
    masks = draws.masks if mode == "mcd" else None
    v, ecache = net.embed(x, masks)
    dv = np.zeros_like(v)

    if mode == "dul":
        s_dul, dcache = net.dul_head.forward(v)
        vin, kl = dul_transform(v, s_dul, draws.dul_noise)
    else:
        vin = v
    logits = net.complete(vin)
    terms["occ"], dz = cross_entropy_grad(logits, y, weights)

    if mode == "dul":
        nv = valid.sum()
        terms["kl"] = float(np.sum(kl[valid]) / nv)
        g_head, dvin = net.complete_backward(vin, dz)
        add("net.", g_head)
        row_w = cfg.kl_weight * (valid / nv)[:, None]
        ds = dvin * draws.dul_noise + row_w * dul_kl_grad_sigma(s_dul)
        g_dul, dv_dul = net.dul_head.backward(dcache, ds)
        add("dul.", g_dul)
        dv += dvin + row_w * v + dv_dul
        add("net.", net.embed_backward(ecache, dv)[0])
        terms["total"] = terms["occ"] + cfg.kl_weight * terms["kl"]
        return terms, grads

    au_w = {"hau": 1.0, "reliocc": cfg.au_weight}.get(mode, 0.0)
    dsigma = None
    if mode in ("hau", "reliocc"):
        sigma, hcache = net.head.forward(v)
        terms["au"], dz_au, dsig_au = loss_absolute_grad(logits, sigma, draws.noise, y)
        dz = dz + au_w * dz_au
        dsigma = au_w * dsig_au
    if mode == "reliocc":
        pairs = mix(v, sigma, y, draws.pair_i, draws.pair_j, net.num_classes + 1)
        m = net.complete(pairs.mixed)
        terms["ru"], dm = loss_relative_grad(m, pairs.target)
        g_mix, dmixed = net.complete_backward(pairs.mixed, cfg.ru_weight * dm)
        add("net.", g_mix)
        dsigma = dsigma + mix_backward(dmixed, pairs, v, sigma, len(y))
        lam = pairs.lam[:, None]
        np.add.at(dv, pairs.i, lam * dmixed)
        np.add.at(dv, pairs.j, (1.0 - lam) * dmixed)

    g_head, dv_z = net.complete_backward(v, dz)
    add("net.", g_head)
    dv += dv_z
    if dsigma is not None:
        g_sig, dv_sig = net.head.backward(hcache, dsigma)
        add("head.", g_sig)
        dv += dv_sig
    add("net.", net.embed_backward(ecache, dv)[0])
    terms["total"] = terms["occ"] + au_w * terms["au"] + (cfg.ru_weight if mode == "reliocc" else 0.0) * terms["ru"]
    return terms, grads


def train_step(net: ToyNet, opt: AdamW, x, y, mode: str, streams, cfg: TrainConfig,
               weights, step: int = 0) -> Dict[str, float]:
    y = np.asarray(y)
    if np.count_nonzero(y != IGNORE) < 2:
        raise ValueError("minibatch needs at least 2 non-IGNORE voxels")
    draws = draw(net, x, y, mode, streams, cfg)
    terms, grads = loss_and_grads(net, x, y, mode, cfg, weights, draws)
    if not all(np.isfinite(v) for v in terms.values()):
        raise TrainingError(step)
    opt.step(net.all_params(), grads)
    return terms


@dataclass
class TrainResult:
    net: ToyNet
    curve: List[Dict[str, float]]
    weights: np.ndarray


def train(net: ToyNet, data: VoxelBatch, epochs: Optional[int] = None, mode: str = "baseline",
          seed: int = 0, cfg: Optional[TrainConfig] = None) -> TrainResult:
    """Minibatch training; the curve holds per-epoch mean loss terms."""
    cfg = cfg or TrainConfig()
    epochs = cfg.epochs if epochs is None else epochs
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    if data.features is None:
        raise ValueError("training data needs features")
    if mode == "dul" and net.dul_head is None:
        raise ValueError("network was built without a DUL head")
    keep = np.flatnonzero(data.valid_mask)
    x_all = data.features.astype(np.float64)[keep]
    y_all = data.labels[keep]
    weights = class_weights(y_all, net.num_classes)
    streams = make_streams(seed)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    step = 0
    n = len(y_all)
    for epoch in range(1, epochs + 1):
        order = streams["shuffle"].permutation(n)
        sums = {k: 0.0 for k in LOSS_TERMS}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            terms = train_step(net, opt, x_all[idx], y_all[idx], mode, streams, cfg, weights, step)
            step += 1
            batches += 1
            for k in LOSS_TERMS:
                sums[k] += terms[k]
        row = {"epoch": epoch}
        row.update({k: sums[k] / max(batches, 1) for k in LOSS_TERMS})
        curve.append(row)
    return TrainResult(net, curve, weights)


def predict_dump(net: ToyNet, batch: VoxelBatch, mode: str = "baseline", seed: int = 0,
                 mc_samples: int = 40, dropout: Optional[float] = None) -> VoxelBatch:
    """Run inference and package logits, voxel features and sigma where the mode has one.

    The returned ``features`` are the network's voxel features v (the input
    of the completion head), not the sensor input. Non-MCD modes use the
    plain deterministic forward pass. MCD averages ``mc_samples`` dropout
    passes and stores the normalised entropy as sigma.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if batch.features is None:
        raise ValueError("prediction needs input features")
    x = batch.features.astype(np.float64)
    v, _ = net.embed(x)
    sigmas = None
    if mode == "mcd":
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        samples = np.stack([net(x, net.dropout_masks(len(x), rng, dropout)) for _ in range(mc_samples)])
        logits, unc = mcd_aggregate(samples)
        sigmas = np.maximum(unc, np.finfo(np.float32).tiny)
    else:
        logits = net.complete(v)
        if mode in ("hau", "reliocc"):
            sigmas = net.head(v)
    return batch.replace(logits=logits, features=v, sigmas=sigmas)
