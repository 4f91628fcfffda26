"""Offline scaling calibrators and their fitting.

Five kinds are supported:

========  ==========================================================
temps     softmax(z / T)
diris     softmax(W log softmax(z) + b), full W
metac     temperature branch when -c log c < eta, else uniform 1/(S+1)
depts     softmax(z / (alpha T)), alpha = k1 depth + k2, T in {T1, T2}
          picked by -c log c > eta
reliocc   softmax((w * z + b) / T_sigma), T_sigma = k1 sigma + k2,
          diagonal W, sigma from a feature-driven head trained jointly
========  ==========================================================

Calibrators only remap probabilities. The reported label is always the raw
logit argmax, so IoU/mIoU cannot change under calibration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

from .config import CalibConfig
from .core import IGNORE, ProbBatch, VoxelBatch, argmax_lowest, log_softmax, softmax
from .optim import AdamW
from .uncert import (UncertaintyHead, cross_entropy_grad, loss_absolute_grad,
                     loss_relative_grad, mix, mix_backward, pair_indices)

KINDS = ("temps", "diris", "metac", "depts", "reliocc")
DISPLAY_NAMES = {"temps": "TempS", "diris": "DiriS", "metac": "MetaC",
                 "depts": "DeptS", "reliocc": "ReliOccScaler"}

EPS_LOG = 1e-12
EPS_ALPHA = 1e-3
EPS_T = 1e-3
PARAMS_FORMAT_VERSION = 1


class CalibrationError(ValueError):
    """Missing inputs or invalid parameters for a calibrator."""


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, what: str = "NLL"):
        super().__init__(f"{what} became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class CalibratorParams:
    kind: str
    T: float = 1.0
    T1: float = 1.0
    T2: float = 1.0
    eta: float = math.inf
    k1: float = 0.0
    k2: float = 1.0
    W: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    head: Optional[Dict[str, np.ndarray]] = None
    fit_log: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CalibrationError(f"unknown calibrator kind {self.kind!r}")
        for name in ("T", "T1", "T2"):
            if not getattr(self, name) > 0:
                raise CalibrationError(f"{name} must be > 0")
        if self.kind == "reliocc" and self.W is not None and self.W.ndim != 1:
            W = np.asarray(self.W, dtype=np.float64)
            if np.any(W[~np.eye(len(W), dtype=bool)] != 0):
                raise CalibrationError("ReliOcc W must be diagonal")
            self.W = np.diag(W).copy()

    @classmethod
    def identity(cls, kind: str, width: int) -> "CalibratorParams":
        if kind == "diris":
            return cls(kind, W=np.eye(width), b=np.zeros(width))
        if kind == "reliocc":
            return cls(kind, W=np.ones(width), b=np.zeros(width))
        return cls(kind)

    @property
    def W_matrix(self):
        if self.W is None:
            return None
        return np.diag(self.W) if self.kind == "reliocc" else self.W


# -- forward transforms ---------------------------------------------------------

def _entropy_term(z):
    c = softmax(z).max(axis=-1)
    return -c * np.log(c)


def temp_scale(z, T: float):
    if not T > 0:
        raise CalibrationError("temperature must be > 0")
    return softmax(np.asarray(z, dtype=np.float64) / T)


def diri_scale(z, W, b):
    z = np.asarray(z, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    width = z.shape[-1]
    if W.shape != (width, width) or b.shape != (width,):
        raise CalibrationError(f"DiriS expects W {(width, width)} and b {(width,)}, "
                               f"got {W.shape} and {b.shape}")
    logp = np.log(np.maximum(softmax(z), EPS_LOG))
    return softmax(logp @ W.T + b)


def _meta_branch(z, eta):
    return _entropy_term(z) < eta


def meta_scale_probs(z, T: float, eta: float):
    z = np.asarray(z, dtype=np.float64)
    width = z.shape[-1]
    probs = temp_scale(z, T)
    const = ~_meta_branch(z, eta)
    probs[const] = 1.0 / width
    return probs


def meta_scale(z, T: float, eta: float):
    """Calibrated confidence of the raw-argmax label under MetaC."""
    if not (T > 0 and eta > 0):
        raise CalibrationError("MetaC needs T > 0 and eta > 0")
    z = np.asarray(z, dtype=np.float64)
    probs = meta_scale_probs(z, T, eta)
    label = argmax_lowest(z)
    return np.take_along_axis(probs, np.asarray(label)[..., None], axis=-1)[..., 0]


def _depts_tau(z, depth, k1, k2, T1, T2, eta):
    alpha = np.maximum(k1 * np.asarray(depth, dtype=np.float64) + k2, EPS_ALPHA)
    hi = _entropy_term(z) > eta
    return alpha * np.where(hi, T1, T2), alpha, hi


def depts_scale(z, depth, k1, k2, T1, T2, eta):
    z = np.asarray(z, dtype=np.float64)
    tau, _, _ = _depts_tau(z, depth, k1, k2, T1, T2, eta)
    return softmax(z / np.asarray(tau)[..., None])


def reliocc_scale(z, sigma, k1, k2, W_diag, b):
    z = np.asarray(z, dtype=np.float64)
    W_diag = np.asarray(W_diag, dtype=np.float64)
    if W_diag.ndim == 2:
        W_diag = np.diag(W_diag)
    t_sigma = np.maximum(k1 * np.asarray(sigma, dtype=np.float64) + k2, EPS_T)
    return softmax((z * W_diag + np.asarray(b, dtype=np.float64)) / np.asarray(t_sigma)[..., None])


# -- NLL objectives with gradients ------------------------------------------------

def _nll_from_scaled(a, y):
    """Mean NLL of softmax(a) at labels y and dL/da."""
    return cross_entropy_grad(a, y)


def temps_loss_grad(theta, z, y):
    T = math.exp(theta["log_T"][0])
    loss, g = _nll_from_scaled(z / T, y)
    return loss, {"log_T": np.array([-np.sum(g * z) / T])}


def diris_loss_grad(theta, logp, y):
    W, b = theta["W"], theta["b"]
    loss, g = _nll_from_scaled(logp @ W.T + b, y)
    return loss, {"W": g.T @ logp, "b": g.sum(axis=0)}


def depts_loss_grad(theta, z, depth, hi, y):
    T1 = math.exp(theta["log_T1"][0])
    T2 = math.exp(theta["log_T2"][0])
    k1, k2 = theta["k1"][0], theta["k2"][0]
    raw_alpha = k1 * depth + k2
    alpha = np.maximum(raw_alpha, EPS_ALPHA)
    T = np.where(hi, T1, T2)
    tau = alpha * T
    loss, g = _nll_from_scaled(z / tau[:, None], y)
    dtau = -np.sum(g * z, axis=1) / tau ** 2
    dalpha = dtau * T * (raw_alpha > EPS_ALPHA)
    return loss, {
        "log_T1": np.array([np.sum(dtau * alpha * T1 * hi)]),
        "log_T2": np.array([np.sum(dtau * alpha * T2 * ~hi)]),
        "k1": np.array([np.sum(dalpha * depth)]),
        "k2": np.array([np.sum(dalpha)]),
    }


def reliocc_calib_loss_grad(theta, z, sigma, y):
    """L_calib and gradients for (k1, k2, w, b) and for sigma."""
    k1, k2 = theta["k1"][0], theta["k2"][0]
    w, b = theta["w"], theta["b"]
    raw_t = k1 * sigma + k2
    t = np.maximum(raw_t, EPS_T)
    a = (z * w + b) / t[:, None]
    loss, g = _nll_from_scaled(a, y)
    dt = -np.sum(g * a, axis=1) / t
    dt_live = dt * (raw_t > EPS_T)
    grads = {
        "k1": np.array([np.sum(dt_live * sigma)]),
        "k2": np.array([np.sum(dt_live)]),
        "w": np.sum(g * z / t[:, None], axis=0),
        "b": np.sum(g / t[:, None], axis=0),
    }
    return loss, grads, dt_live * k1


# -- completion head surrogate ------------------------------------------------------

class LinearHead:
    """Frozen affine map feature -> logits, the head shared by the relative loss."""

    def __init__(self, A, c):
        self.A = np.asarray(A, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)

    @classmethod
    def fit(cls, features, logits) -> "LinearHead":
        """Least-squares fit of the logits from the features (with bias)."""
        X = np.asarray(features, dtype=np.float64)
        X1 = np.hstack([X, np.ones((X.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(X1, np.asarray(logits, dtype=np.float64), rcond=None)
        return cls(coef[:-1], coef[-1])

    def forward(self, v):
        return np.asarray(v, dtype=np.float64) @ self.A + self.c, None

    def backward_input(self, cache, dlogits):
        return dlogits @ self.A.T


# -- fitting ---------------------------------------------------------------

def _run_adam(theta, loss_grad: Callable, cfg: CalibConfig, log_every_epoch: bool = True,
              offset: int = 0, frozen=()):
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    it = offset
    for _ in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            loss, grads = loss_grad(theta)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(it)
            opt.step(theta, grads, frozen=frozen)
            it += 1
        history.append(loss_grad(theta)[0])
    if not np.isfinite(history[-1]):
        raise DivergenceError(it)
    return theta, history, it


def _labelled(batch: VoxelBatch):
    valid = batch.valid_mask
    if not valid.any():
        raise CalibrationError("fit batch has no labelled voxels")
    return valid


def fit_calibrator(kind: str, val_batch: VoxelBatch, config: Optional[CalibConfig] = None,
                   completion_head=None) -> CalibratorParams:
    """Fit a calibrator by minimising NLL on the labelled voxels of ``val_batch``.

    Optimisation is full-batch AdamW for ``epochs * steps_per_epoch`` steps.
    MetaC and DeptS additionally pick eta from ``config.eta_factors * log(S+1)``
    by the fitted validation NLL. ``completion_head`` is only used by
    ``reliocc``; it defaults to a least-squares LinearHead on the fit batch.
    """
    cfg = config or CalibConfig()
    if kind not in KINDS:
        raise CalibrationError(f"unknown calibrator kind {kind!r}")
    valid = _labelled(val_batch)
    z = val_batch.logits[valid].astype(np.float64)
    y = val_batch.labels[valid]
    width = val_batch.num_classes + 1

    if kind == "temps":
        theta, hist, it = _run_adam({"log_T": np.zeros(1)},
                                    lambda th: temps_loss_grad(th, z, y), cfg)
        return CalibratorParams("temps", T=math.exp(theta["log_T"][0]),
                                fit_log=_log(hist, it))

    if kind == "diris":
        logp = np.log(np.maximum(softmax(z), EPS_LOG))
        theta, hist, it = _run_adam({"W": np.eye(width), "b": np.zeros(width)},
                                    lambda th: diris_loss_grad(th, logp, y), cfg)
        return CalibratorParams("diris", W=theta["W"], b=theta["b"], fit_log=_log(hist, it))

    if kind == "metac":
        return _fit_metac(z, y, width, cfg)

    if kind == "depts":
        if val_batch.depths is None:
            raise CalibrationError("DeptS needs depths")
        return _fit_depts(z, val_batch.depths[valid].astype(np.float64), y, width, cfg)

    if val_batch.features is None:
        raise CalibrationError("the ReliOcc calibrator needs features to train its sigma head")
    return _fit_reliocc(val_batch.subset(valid), cfg, completion_head)


def _log(history, iterations, **extra):
    out = {"final_nll": float(history[-1]), "iterations": int(iterations),
           "epoch_nll": [float(h) for h in history]}
    out.update(extra)
    return out


def eta_grid(width: int, cfg: CalibConfig):
    return [f * math.log(width) for f in cfg.eta_factors]


def _fit_metac(z, y, width, cfg):
    n = len(y)
    best = None
    total_it = 0
    for eta in eta_grid(width, cfg):
        branch = _meta_branch(z, eta)
        k = int(branch.sum())
        T, hist = 1.0, [float("nan")]
        if k:
            zb, yb = z[branch], y[branch]
            theta, hist, it = _run_adam({"log_T": np.zeros(1)},
                                        lambda th: temps_loss_grad(th, zb, yb), cfg, offset=total_it)
            total_it = it
            T = math.exp(theta["log_T"][0])
            branch_nll = hist[-1] * k
        else:
            branch_nll = 0.0
        nll = (branch_nll + (n - k) * math.log(width)) / n
        if best is None or nll < best[0]:
            best = (nll, eta, T, hist)
    nll, eta, T, hist = best
    return CalibratorParams("metac", T=T, eta=eta,
                            fit_log=_log([nll], total_it, branch_epoch_nll=hist))


def _fit_depts(z, depth, y, width, cfg):
    best = None
    total_it = 0
    for eta in eta_grid(width, cfg):
        hi = _entropy_term(z) > eta
        theta0 = {"log_T1": np.array([math.log(cfg.depts_T1)]),
                  "log_T2": np.array([math.log(cfg.depts_T2)]),
                  "k1": np.zeros(1), "k2": np.ones(1)}
        theta, hist, it = _run_adam(theta0, lambda th: depts_loss_grad(th, z, depth, hi, y),
                                    cfg, offset=total_it)
        total_it = it
        if best is None or hist[-1] < best[0]:
            best = (hist[-1], eta, theta, hist)
    _, eta, theta, hist = best
    return CalibratorParams("depts", T1=math.exp(theta["log_T1"][0]),
                            T2=math.exp(theta["log_T2"][0]), eta=eta,
                            k1=float(theta["k1"][0]), k2=float(theta["k2"][0]),
                            fit_log=_log(hist, total_it))


def reliocc_objective(theta, head: UncertaintyHead, batch_z, batch_v, y, completion_head,
                      noise, pair_i, pair_j, cfg: CalibConfig):
    """Weighted L_au + L_ru + L_calib and gradients for calibrator and head params.

    ``theta`` holds the calibrator scalars/vectors plus ``head.*`` entries that
    mirror ``head.params``; the noise and pairing are supplied explicitly so
    the objective is a deterministic function of ``theta``.
    """
    for k in head.params:
        head.params[k] = theta["head." + k]
    width = batch_z.shape[1]
    sigma, cache = head.forward(batch_v)

    l_calib, grads, dsigma_calib = reliocc_calib_loss_grad(theta, batch_z, sigma, y)
    l_au, _, dsigma_au = loss_absolute_grad(batch_z, sigma, noise, y)
    pairs = mix(batch_v, sigma, y, pair_i, pair_j, width)
    m, mcache = completion_head.forward(pairs.mixed)
    l_ru, dm = loss_relative_grad(m, pairs.target)
    dmixed = completion_head.backward_input(mcache, dm)
    dsigma_ru = mix_backward(dmixed, pairs, batch_v, sigma, len(y))

    dsigma = cfg.au_weight * dsigma_au + cfg.ru_weight * dsigma_ru + cfg.calib_weight * dsigma_calib
    head_grads, _ = head.backward(cache, dsigma)
    total = cfg.au_weight * l_au + cfg.ru_weight * l_ru + cfg.calib_weight * l_calib
    out = {k: cfg.calib_weight * v for k, v in grads.items()}
    out.update({"head." + k: v for k, v in head_grads.items()})
    return total, out, {"au": l_au, "ru": l_ru, "calib": l_calib}


def _fit_reliocc(batch: VoxelBatch, cfg: CalibConfig, completion_head=None):
    z = batch.logits.astype(np.float64)
    v = batch.features.astype(np.float64)
    y = batch.labels
    n, width = z.shape
    if n < 2:
        raise CalibrationError("ReliOcc calibrator needs at least 2 labelled voxels")
    if completion_head is None:
        completion_head = LinearHead.fit(v, z)
    rng = np.random.default_rng(cfg.seed)
    head = UncertaintyHead(v.shape[1], rng=rng)
    theta = {"k1": np.zeros(1), "k2": np.ones(1), "w": np.ones(width), "b": np.zeros(width)}
    theta.update({"head." + k: p.copy() for k, p in head.params.items()})

    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, it, parts = [], 0, {}
    for _ in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            noise = rng.standard_normal(z.shape)
            pi, pj = pair_indices(y, rng)
            loss, grads, parts = reliocc_objective(theta, head, z, v, y, completion_head,
                                                   noise, pi, pj, cfg)
            if not np.isfinite(loss):
                raise DivergenceError(it, "ReliOcc objective")
            opt.step(theta, grads)
            it += 1
        sigma = head(v)
        history.append(reliocc_calib_loss_grad(theta, z, sigma, y)[0])
        if not np.isfinite(history[-1]):
            raise DivergenceError(it)
    head.params = {k: theta["head." + k].copy() for k in head.params}
    return CalibratorParams("reliocc", k1=float(theta["k1"][0]), k2=float(theta["k2"][0]),
                            W=theta["w"].copy(), b=theta["b"].copy(), head=head.params,
                            fit_log=_log(history, it, last_au=parts.get("au"),
                                         last_ru=parts.get("ru")))


# -- application ------------------------------------------------------------------

def calibrated_probs(params: CalibratorParams, batch: VoxelBatch) -> np.ndarray:
    z = batch.logits.astype(np.float64)
    width = z.shape[1]
    kind = params.kind
    if kind == "temps":
        return temp_scale(z, params.T)
    if kind == "diris":
        W = np.eye(width) if params.W is None else params.W
        b = np.zeros(width) if params.b is None else params.b
        return diri_scale(z, W, b)
    if kind == "metac":
        return meta_scale_probs(z, params.T, params.eta)
    if kind == "depts":
        if batch.depths is None:
            raise CalibrationError("DeptS needs depths")
        return depts_scale(z, batch.depths.astype(np.float64), params.k1, params.k2,
                           params.T1, params.T2, params.eta)
    w = np.ones(width) if params.W is None else params.W
    b = np.zeros(width) if params.b is None else params.b
    return reliocc_scale(z, reliocc_sigma(params, batch), params.k1, params.k2, w, b)


def reliocc_sigma(params: CalibratorParams, batch: VoxelBatch) -> np.ndarray:
    if params.head is not None:
        if batch.features is None:
            raise CalibrationError("ReliOcc calibrator needs features to compute sigma")
        W1 = params.head["W1"]
        head = UncertaintyHead(W1.shape[0], params.head["W2"].shape[1], W1.shape[1],
                               params=params.head)
        return head(batch.features)
    if batch.sigmas is None:
        raise CalibrationError("ReliOcc calibrator needs sigmas or a trained head")
    return batch.sigmas.astype(np.float64)


def apply_calibrator(params: CalibratorParams, batch: VoxelBatch) -> ProbBatch:
    """Calibrated distribution with the raw-logit argmax kept as the label."""
    probs = calibrated_probs(params, batch)
    label = argmax_lowest(batch.logits.astype(np.float64))
    return ProbBatch(probs, label)


# -- serialisation --------------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def _arr_lines(key, arr):
    arr = np.asarray(arr, dtype=np.float64)
    return [f"{key}.shape = {' '.join(str(s) for s in arr.shape)}",
            f"{key} = {' '.join(_fmt(x) for x in arr.ravel())}"]


def save_params(params: CalibratorParams, path) -> None:
    lines = ["# occrel calibrator parameters",
             f"format_version = {PARAMS_FORMAT_VERSION}",
             f"kind = {params.kind}"]
    for name in ("T", "T1", "T2", "eta", "k1", "k2"):
        lines.append(f"{name} = {_fmt(getattr(params, name))}")
    if params.W is not None:
        lines += _arr_lines("W", params.W)
    if params.b is not None:
        lines += _arr_lines("b", params.b)
    if params.head is not None:
        for k in sorted(params.head):
            lines += _arr_lines("head." + k, params.head[k])
    for k in ("final_nll", "iterations"):
        if k in params.fit_log:
            lines.append(f"fit.{k} = {_fmt(params.fit_log[k])}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> CalibratorParams:
    entries = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    version = int(entries.get("format_version", -1))
    if version != PARAMS_FORMAT_VERSION:
        raise CalibrationError(f"unsupported params format version {version}")

    def arr(key):
        if key not in entries:
            return None
        shape = tuple(int(s) for s in entries[key + ".shape"].split())
        vals = [float(x) for x in entries[key].split()]
        return np.array(vals, dtype=np.float64).reshape(shape)

    head = {k[len("head."):]: arr(k) for k in entries
            if k.startswith("head.") and not k.endswith(".shape")}
    fit_log = {k[len("fit."):]: float(v) for k, v in entries.items() if k.startswith("fit.")}
    if "iterations" in fit_log:
        fit_log["iterations"] = int(fit_log["iterations"])
    return CalibratorParams(entries["kind"], **{k: float(entries[k]) for k in
                                                ("T", "T1", "T2", "eta", "k1", "k2")},
                            W=arr("W"), b=arr("b"), head=head or None, fit_log=fit_log)
