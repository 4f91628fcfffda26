"""Accuracy and reliability metrics for occupancy predictions.

Geometric metrics treat the task as occupied-vs-empty; semantic metrics use
the full (S+1)-way prediction. Reliability is measured two ways:

* ECE: equal-width confidence bins over [0, 1] (last bin closed), weighted
  mean of |accuracy - confidence| per bin.
* PRR: rejection curves. Samples are rejected most-uncertain first; equal
  uncertainties are rejected together as one block and the curve is linear
  inside a block. The retained error count is normalised by the total error
  count, so a random ranking has AUC 0.5 and the oracle has AUC e0 / 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import EMPTY, IGNORE, ProbBatch, VoxelBatch, geometric_view, predict

DEFAULT_BINS = 15


class MetricUndefined(ValueError):
    """The metric has no defined value on this input (e.g. PRR with no errors)."""


@dataclass(frozen=True)
class BinStats:
    bin_index: int
    count: int
    mean_conf: float
    mean_acc: float


@dataclass
class RejectionCurve:
    rates: np.ndarray
    errors: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.rates.tolist(), self.errors.tolist()))


def _as_bool(x) -> np.ndarray:
    return np.asarray(x).astype(bool).reshape(-1)


# -- accuracy ---------------------------------------------------------------

def iou_binary(pred_occupied, gt_occupied, mask=None) -> float:
    pred, gt = _as_bool(pred_occupied), _as_bool(gt_occupied)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt lengths differ")
    mask = np.ones_like(pred) if mask is None else _as_bool(mask)
    if not mask.any():
        raise MetricUndefined("empty evaluation set")
    pred, gt = pred[mask], gt[mask]
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    if tp + fp + fn == 0:
        raise MetricUndefined("IoU undefined: no occupied voxels in prediction or ground truth")
    return tp / (tp + fp + fn)


def miou_semantic(pred_labels, gt_labels, num_classes: int, mask=None):
    """Per-class IoU over classes 1..S and their mean.

    Classes absent from both prediction and ground truth get NaN and are left
    out of the mean.
    """
    pred = np.asarray(pred_labels).reshape(-1)
    gt = np.asarray(gt_labels).reshape(-1)
    if mask is None:
        mask = gt != IGNORE
    mask = _as_bool(mask)
    if not mask.any():
        raise MetricUndefined("empty evaluation set")
    pred, gt = pred[mask].astype(np.int64), gt[mask].astype(np.int64)
    width = num_classes + 1
    if pred.size and (pred.max() >= width or gt.max() >= width or pred.min() < 0 or gt.min() < 0):
        raise ValueError("label out of range")
    conf = np.bincount(gt * width + pred, minlength=width * width).reshape(width, width)
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.full(num_classes, np.nan)
    present = denom[1:] > 0
    per_class[present] = tp[1:][present] / denom[1:][present]
    if not present.any():
        raise MetricUndefined("mIoU undefined: no semantic class present")
    return per_class, float(np.mean(per_class[present]))


# -- calibration ------------------------------------------------------------

def bin_indices(confidences, num_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Bin m holds m/M <= c < (m+1)/M; c == 1 goes to the last bin."""
    edges = np.arange(num_bins + 1) / num_bins
    idx = np.searchsorted(edges, confidences, side="right") - 1
    return np.minimum(idx, num_bins - 1)


def _check_conf(confidences, correct):
    c = np.asarray(confidences, dtype=np.float64).reshape(-1)
    ok = _as_bool(correct)
    if c.shape != ok.shape:
        raise ValueError("confidences and correct differ in length")
    if c.size == 0:
        raise MetricUndefined("empty evaluation set")
    if np.any(~np.isfinite(c)) or c.min() < 0 or c.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    return c, ok


def reliability_diagram(confidences, correct, num_bins: int = DEFAULT_BINS) -> List[BinStats]:
    """Per-bin counts, mean confidence and accuracy (NaN means for empty bins)."""
    c, ok = _check_conf(confidences, correct)
    idx = bin_indices(c, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    # bincount accumulates in input order, which keeps the sums reproducible.
    conf_sum = np.bincount(idx, weights=c, minlength=num_bins)
    hits = np.bincount(idx[ok], minlength=num_bins)
    out = []
    for m in range(num_bins):
        k = int(counts[m])
        if k:
            out.append(BinStats(m, k, float(conf_sum[m]) / k, int(hits[m]) / k))
        else:
            out.append(BinStats(m, 0, float("nan"), float("nan")))
    return out


def ece_from_bins(bins: List[BinStats]) -> float:
    n = sum(b.count for b in bins)
    if n == 0:
        raise MetricUndefined("empty evaluation set")
    total = 0.0
    for b in bins:
        if b.count:
            total += (b.count / n) * abs(b.mean_acc - b.mean_conf)
    return total


def ece(confidences, correct, num_bins: int = DEFAULT_BINS) -> float:
    return ece_from_bins(reliability_diagram(confidences, correct, num_bins))


# -- misclassification detection -------------------------------------------

def rejection_curve(uncertainties, correct) -> RejectionCurve:
    """Normalised retained-error curve, rejecting the most uncertain first."""
    u = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    ok = _as_bool(correct)
    if u.shape != ok.shape:
        raise ValueError("uncertainties and correct differ in length")
    n = u.size
    if n == 0:
        raise MetricUndefined("empty evaluation set")
    if np.any(np.isnan(u)):
        raise ValueError("uncertainties contain NaN")
    total_err = int(np.count_nonzero(~ok))
    if total_err == 0:
        raise MetricUndefined("PRR undefined: zero base error")
    order = np.argsort(-u, kind="stable")
    u_sorted = u[order]
    err_sorted = (~ok[order]).astype(np.int64)
    # block ends: positions where the next uncertainty differs
    ends = np.flatnonzero(np.diff(u_sorted) != 0) + 1
    ends = np.concatenate([[0], ends, [n]])
    rejected_err = np.concatenate([[0], np.cumsum(err_sorted)])[ends]
    rates = ends / n
    errors = (total_err - rejected_err) / total_err
    auc = trapezoid(rates, errors)
    return RejectionCurve(rates, errors, auc)


def trapezoid(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return 0.0
    pieces = (x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0
    # cumsum is a strict left-to-right sum (np.sum would be pairwise)
    return float(np.cumsum(pieces)[-1])


def oracle_auc(correct) -> float:
    """AUC of the curve that rejects every error before any correct sample."""
    ok = _as_bool(correct)
    return rejection_curve((~ok).astype(np.float64), ok).auc


def prr(uncertainties, correct) -> float:
    ok = _as_bool(correct)
    if ok.size and not ok.any():
        raise MetricUndefined("PRR undefined: every sample is an error")
    auc_u = rejection_curve(uncertainties, ok).auc
    auc_o = oracle_auc(ok)
    return (0.5 - auc_u) / (0.5 - auc_o)


# -- composite report --------------------------------------------------------

@dataclass
class ViewReport:
    """Reliability numbers for one view (semantic or geometric)."""

    ece: float
    prr: Optional[float]
    diagram: List[BinStats]
    curve: Optional[RejectionCurve]
    n: int
    error_rate: float
    prr_error: Optional[str] = None


@dataclass
class MetricReport:
    iou: Optional[float]
    miou: Optional[float]
    per_class_iou: np.ndarray
    sem: ViewReport
    geo: ViewReport
    num_bins: int = DEFAULT_BINS
    notes: dict = field(default_factory=dict)

    @property
    def ece_sem(self):
        return self.sem.ece

    @property
    def ece_geo(self):
        return self.geo.ece

    @property
    def prr_sem(self):
        return self.sem.prr

    @property
    def prr_geo(self):
        return self.geo.prr

    def as_rows(self):
        """Flat (name, value) pairs; undefined values come out as NaN."""
        nan = float("nan")
        val = lambda v: nan if v is None else float(v)
        rows = [
            ("iou", val(self.iou)),
            ("miou", val(self.miou)),
            ("ece_geo", val(self.geo.ece)),
            ("ece_sem", val(self.sem.ece)),
            ("prr_geo", val(self.geo.prr)),
            ("prr_sem", val(self.sem.prr)),
            ("auc_geo", val(self.geo.curve.auc if self.geo.curve else None)),
            ("auc_sem", val(self.sem.curve.auc if self.sem.curve else None)),
            ("error_rate_geo", self.geo.error_rate),
            ("error_rate_sem", self.sem.error_rate),
            ("n_geo", float(self.geo.n)),
            ("n_sem", float(self.sem.n)),
            ("num_bins", float(self.num_bins)),
        ]
        for k, v in enumerate(self.per_class_iou, start=1):
            rows.append((f"iou_class_{k}", float(v)))
        return rows


def _view(conf, correct, uncertainty, num_bins) -> ViewReport:
    diagram = reliability_diagram(conf, correct, num_bins)
    e = ece_from_bins(diagram)
    curve, p, why = None, None, None
    try:
        curve = rejection_curve(uncertainty, correct)
        p = prr(uncertainty, correct)
    except MetricUndefined as exc:
        why = str(exc)
    err = 1.0 - float(np.mean(correct))
    return ViewReport(e, p, diagram, curve, int(len(conf)), err, why)


def evaluate(batch: VoxelBatch, uncertainty_source: str = "one_minus_confidence",
             probs: Optional[ProbBatch] = None, num_bins: int = DEFAULT_BINS,
             semantic_scope: str = "all") -> MetricReport:
    """Compute every accuracy/reliability metric on a batch.

    Args:
        batch: voxels with labels and raw logits.
        uncertainty_source: ``"one_minus_confidence"`` ranks by 1 - c;
            ``"explicit_sigma"`` ranks both views by ``batch.sigmas``.
        probs: calibrated prediction to evaluate instead of ``softmax(logits)``.
        semantic_scope: ``"all"`` evaluates semantic ECE/PRR on every
            non-IGNORE voxel, ``"occupied"`` only on ground-truth-occupied ones.
    """
    if uncertainty_source not in ("one_minus_confidence", "explicit_sigma"):
        raise ValueError(f"unknown uncertainty source {uncertainty_source!r}")
    if uncertainty_source == "explicit_sigma" and batch.sigmas is None:
        raise ValueError("explicit_sigma requested but the batch has no sigmas")
    if semantic_scope not in ("all", "occupied"):
        raise ValueError(f"unknown semantic scope {semantic_scope!r}")
    p = predict(batch) if probs is None else probs
    valid = batch.valid_mask
    if not valid.any():
        raise MetricUndefined("empty evaluation set")
    labels = batch.labels

    gt_occ = labels != EMPTY
    pred_occ, geo_conf = geometric_view(p)
    try:
        iou = iou_binary(pred_occ, gt_occ, valid)
    except MetricUndefined:
        iou = None
    try:
        per_class, miou = miou_semantic(p.pred_label, labels, batch.num_classes, valid)
    except MetricUndefined:
        per_class, miou = np.full(batch.num_classes, np.nan), None

    if uncertainty_source == "explicit_sigma":
        u_sem = u_geo = batch.sigmas.astype(np.float64)
    else:
        u_sem = 1.0 - p.confidence
        u_geo = 1.0 - geo_conf

    geo_ok = pred_occ == gt_occ
    geo = _view(geo_conf[valid], geo_ok[valid], u_geo[valid], num_bins)

    sem_mask = valid if semantic_scope == "all" else valid & gt_occ
    sem_ok = p.pred_label == labels
    sem = _view(p.confidence[sem_mask], sem_ok[sem_mask], u_sem[sem_mask], num_bins)
    return MetricReport(iou, miou, per_class, sem, geo, num_bins,
                        {"uncertainty_source": uncertainty_source, "semantic_scope": semantic_scope})
