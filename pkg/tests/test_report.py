import re

import numpy as np

from occrel.core import IGNORE, VoxelBatch
from occrel.metrics import ece_from_bins, evaluate
from occrel.report import (emit_reports, format_table, read_diagram_csv, read_metrics_csv,
                           reliability_svg)
from occrel.metrics import BinStats

FILES = ["metrics.csv", "reliability_sem.csv", "reliability_sem.svg", "reliability_geo.csv",
         "reliability_geo.svg", "rejection_sem.csv", "rejection_sem.svg", "rejection_geo.csv",
         "rejection_geo.svg"]


def batch(seed=0, n=500):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, n)
    labels[:10] = IGNORE
    return VoxelBatch(labels, rng.normal(0, 2, (n, 4)), 3)


def test_emit_writes_all_files(tmp_path):
    emit_reports(evaluate(batch()), tmp_path)
    for f in FILES:
        assert (tmp_path / f).stat().st_size > 0, f
    for f in FILES:
        if f.endswith(".svg"):
            text = (tmp_path / f).read_text()
            assert text.startswith("<svg") and "<script" not in text


def test_csv_roundtrip_reproduces_metrics(tmp_path):
    b = batch(1)
    r = evaluate(b)
    emit_reports(r, tmp_path)
    bins = read_diagram_csv(tmp_path / "reliability_sem.csv")
    assert sum(x.count for x in bins) == int(b.valid_mask.sum())
    assert abs(ece_from_bins(bins) - r.ece_sem) <= 1e-12
    m = read_metrics_csv(tmp_path / "metrics.csv")
    assert m["ece_sem"] == r.ece_sem and m["miou"] == r.miou and m["prr_geo"] == r.prr_geo


def test_perfectly_calibrated_diagram_has_zero_gap():
    bins = [BinStats(m, 10, (m + 0.5) / 15, (m + 0.5) / 15) for m in range(15)]
    svg = reliability_svg(bins, "t")
    gaps = [float(g) for g in re.findall(r'data-gap="([^"]+)"', svg)]
    assert len(gaps) == 15 and all(g == 0.0 for g in gaps)


def test_undefined_prr_is_reported(tmp_path):
    labels = np.array([0, 1, 2])
    r = evaluate(VoxelBatch(labels, np.eye(3)[labels] * 40, 2))
    emit_reports(r, tmp_path)
    assert "undefined" in (tmp_path / "rejection_sem.svg").read_text()
    assert (tmp_path / "rejection_sem.csv").read_text().strip() == "rejection_rate,normalized_error"
    assert np.isnan(read_metrics_csv(tmp_path / "metrics.csv")["prr_sem"])


def test_format_table():
    text = format_table([("a", evaluate(batch(2)))], "T")
    assert text.splitlines()[0] == "T" and "miou" in text
