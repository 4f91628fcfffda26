"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is printed in the pytest
terminal summary (and directly when this file is run as a script).
"""
import time

import numpy as np
import pytest

import conftest
from oracles import central_diff, ece_bruteforce, prr_bruteforce, rel_err
from occrel import calib
from occrel.calib import apply_calibrator, fit_calibrator
from occrel.cli import main as cli
from occrel.config import CalibConfig, TrainConfig
from occrel.core import IGNORE, VoxelBatch, softmax
from occrel.dump import encode, read_dump, write_dump
from occrel.experiments import logit_noise_sweep, run_offline, run_online
from occrel.metrics import ece, evaluate, prr
from occrel.toynet import ToyNet
from occrel.toynet.training import MODES, class_weights, draw, loss_and_grads, make_streams
from occrel.uncert import (UncertaintyHead, loss_absolute_grad, loss_relative_grad, mix,
                           mix_backward, mix_weight, pair_indices)


def record(num, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {detail}"
    conftest.ACCEPTANCE[num] = line
    print(line)
    return ok


@pytest.fixture(scope="session")
def reference():
    t0 = time.perf_counter()
    ref = run_online(("baseline", "reliocc"))
    ref.seconds = time.perf_counter() - t0
    return ref


# 1 -------------------------------------------------------------------------------

def test_01_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    ece_bad = prr_worst = 0.0
    count = 0
    while count < 500:
        n = int(rng.integers(1, 1001))
        if rng.random() < 0.5:
            conf = rng.integers(0, 31, n) / 30
        else:
            conf = rng.random(n)
        ok = rng.random(n) < conf
        if ece(conf, ok) != ece_bruteforce(conf, ok):
            ece_bad += 1
        if ok.any() and not ok.all():
            prr_worst = max(prr_worst, abs(prr(1 - conf, ok) - prr_bruteforce(1 - conf, ok)))
        count += 1
    secs = time.perf_counter() - t0
    good = ece_bad == 0 and prr_worst <= 1e-12 and secs < 10
    record(1, good, f"{count} instances, ECE mismatches {int(ece_bad)}, "
                    f"max |dPRR| {prr_worst:.2e}, {secs:.1f}s")
    assert good


# 2 -------------------------------------------------------------------------------

def test_02_closed_form_prr():
    rng = np.random.default_rng(7)
    ok = rng.random(1000) < 0.8
    p_oracle = prr(np.where(ok, 0.0, 1.0) + 0.001 * rng.random(1000) * ok, ok)
    p_anti = prr([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    ok2 = rng.random(100_000) < 0.7
    p_ind = prr(rng.random(100_000), ok2)
    good = abs(p_oracle - 1) <= 1e-9 and abs(p_anti + 1) <= 1e-9 and abs(p_ind) <= 0.02
    record(2, good, f"oracle {p_oracle:.12f}, anti-oracle {p_anti:.12f}, independent {p_ind:+.4f}")
    assert good


# 3 -------------------------------------------------------------------------------

def _grad_checks():
    rng = np.random.default_rng(3)
    worst = {}

    def note(name, analytic, numeric):
        worst[name] = max(worst.get(name, 0.0), rel_err(analytic, numeric))

    # toy network, every mode, every parameter tensor
    x = rng.normal(size=(10, 16))
    y = rng.integers(0, 5, 10)
    cfg = TrainConfig()
    for mode in MODES:
        net = ToyNet(16, 4, seed=1, with_dul=mode == "dul")
        w = class_weights(y, 4)
        d = draw(net, x, y, mode, make_streams(0), cfg)
        _, g = loss_and_grads(net, x, y, mode, cfg, w, d)
        f = lambda: loss_and_grads(net, x, y, mode, cfg, w, d)[0]["total"]
        for k, p in net.all_params().items():
            note(f"toynet/{mode}", g.get(k, np.zeros_like(p)), central_diff(f, p))

    # sigma head
    head = UncertaintyHead(6, rng=rng)
    v = rng.normal(size=(10, 6))
    wv = rng.normal(size=10)
    g, dv = head.backward(head.forward(v)[1], wv)
    f = lambda: float(wv @ head(v))
    for k, p in head.params.items():
        note("sigma head", g[k], central_diff(f, p))
    note("sigma head", dv, central_diff(f, v))

    # absolute loss
    z = rng.normal(size=(10, 5))
    s = rng.random(10) + 0.2
    eps = rng.standard_normal((10, 5))
    yz = rng.integers(0, 5, 10)
    _, dz, ds = loss_absolute_grad(z, s, eps, yz)
    f = lambda: loss_absolute_grad(z, s, eps, yz)[0]
    note("L_au", dz, central_diff(f, z))
    note("L_au", ds, central_diff(f, s))

    # relative loss through lambda
    A = rng.normal(size=(6, 5))
    i, j = pair_indices(yz, rng)

    def lru():
        p = mix(v, s, yz, i, j, 5)
        return loss_relative_grad(p.mixed @ A, p.target)[0]

    p = mix(v, s, yz, i, j, 5)
    _, dm = loss_relative_grad(p.mixed @ A, p.target)
    note("L_ru via lambda", mix_backward(dm @ A.T, p, v, s, 10), central_diff(lru, s))

    # calibrator objectives
    zc = rng.normal(size=(30, 4))
    yc = rng.integers(0, 4, 30)
    depth = rng.random(30) * 30
    hi = rng.random(30) < 0.5
    sig = rng.random(30) + 0.1
    cases = [
        ("temps", lambda th: calib.temps_loss_grad(th, zc, yc), {"log_T": np.array([0.2])}),
        ("diris", lambda th: calib.diris_loss_grad(th, np.log(softmax(zc)), yc),
         {"W": np.eye(4) + 0.1 * rng.normal(size=(4, 4)), "b": 0.1 * rng.normal(size=4)}),
        ("depts", lambda th: calib.depts_loss_grad(th, zc, depth, hi, yc),
         {"log_T1": np.array([0.3]), "log_T2": np.array([0.0]), "k1": np.array([0.01]),
          "k2": np.array([1.0])}),
        ("reliocc", lambda th: calib.reliocc_calib_loss_grad(th, zc, sig, yc)[:2],
         {"k1": np.array([0.4]), "k2": np.array([0.9]), "w": np.ones(4) + 0.1 * rng.normal(size=4),
          "b": 0.1 * rng.normal(size=4)}),
    ]
    for name, lg, theta in cases:
        _, g = lg(theta)
        for k, val in theta.items():
            note(f"calib/{name}", g[k], central_diff(lambda: lg(theta)[0], val))
    return worst


def test_03_gradient_suite():
    t0 = time.perf_counter()
    worst = _grad_checks()
    secs = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    good = max(worst.values()) <= 1e-4 and secs < 30
    record(3, good, f"{len(worst)} groups, worst {top} rel err {worst[top]:.2e}, {secs:.1f}s")
    assert good


# 4 -------------------------------------------------------------------------------

def test_04_temperature_consistency():
    rng = np.random.default_rng(4)
    z = rng.normal(0, 2.0, (5000, 5))
    y = (rng.random((5000, 1)) < np.cumsum(softmax(z), axis=1)).argmax(axis=1)
    T1 = fit_calibrator("temps", VoxelBatch(y, z, 4)).T
    T2 = fit_calibrator("temps", VoxelBatch(y, 2 * z, 4)).T
    good = 0.95 <= T1 <= 1.05 and 1.8 <= T2 <= 2.2
    record(4, good, f"T(z) = {T1:.4f}, T(2z) = {T2:.4f}")
    assert good


# 5 -------------------------------------------------------------------------------

def test_05_accuracy_preservation(reference):
    bad = []
    fast = CalibConfig(epochs=5, steps_per_epoch=40)
    for mode, run in reference.runs.items():
        before = evaluate(run.test)
        for kind in calib.KINDS:
            after = evaluate(run.test, probs=apply_calibrator(fit_calibrator(kind, run.val, fast), run.test))
            if not (before.iou == after.iou and before.miou == after.miou):
                bad.append(f"{mode}/{kind}")
    good = not bad
    record(5, good, f"{len(calib.KINDS)} calibrators x {len(reference.runs)} dumps, "
                    f"IoU/mIoU changed for: {bad or 'none'}")
    assert good


# 6 -------------------------------------------------------------------------------

def test_06_online_reliocc_claim(reference):
    b = reference.runs["baseline"].report
    r = reference.runs["reliocc"].report
    d_miou = 100 * (r.miou - b.miou)
    parts = {
        "ECE_sem lower": r.ece_sem < b.ece_sem,
        "PRR_sem higher": r.prr_sem > b.prr_sem,
        "|dmIoU| <= 1": abs(d_miou) <= 1.0,
        "< 5 min": reference.seconds < 300,
    }
    good = all(parts.values())
    failed = [k for k, v in parts.items() if not v]
    record(6, good, f"ECE_sem {100 * b.ece_sem:.2f} -> {100 * r.ece_sem:.2f}, "
                    f"PRR_sem {100 * b.prr_sem:.2f} -> {100 * r.prr_sem:.2f}, "
                    f"mIoU {100 * b.miou:.2f} -> {100 * r.miou:.2f} ({d_miou:+.2f}), "
                    f"{reference.seconds:.0f}s" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert good, failed


# 7 -------------------------------------------------------------------------------

def test_07_offline_calibration_claim(reference):
    reports = run_offline(reference.runs["baseline"], ("temps", "diris", "reliocc"))
    base = reports["uncalibrated"].ece_sem
    good = all(reports[k].ece_sem < base for k in ("temps", "diris", "reliocc"))
    record(7, good, f"ECE_sem uncalibrated {100 * base:.2f}, " +
           ", ".join(f"{k} {100 * reports[k].ece_sem:.2f}" for k in ("temps", "diris", "reliocc")))
    assert good


# 8 -------------------------------------------------------------------------------

def test_08_robustness_claim(reference):
    deltas = {}
    for mode in ("baseline", "reliocc"):
        run = reference.runs[mode]
        sweep = logit_noise_sweep(run, (0.5, 1.0))
        deltas[mode] = {m: rep.ece_sem - run.report.ece_sem for m, rep in sweep.items()}
    good = all(deltas["reliocc"][m] < deltas["baseline"][m] for m in (0.5, 1.0))
    record(8, good, "ECE_sem change baseline " +
           ", ".join(f"{m}: {100 * v:+.2f}" for m, v in deltas["baseline"].items()) +
           " | reliocc " + ", ".join(f"{m}: {100 * v:+.2f}" for m, v in deltas["reliocc"].items()))
    assert good


# 9 -------------------------------------------------------------------------------

def test_09_lambda_invariance():
    rng = np.random.default_rng(9)
    si = rng.uniform(1e-3, 5.0, 10_000)
    sj = rng.uniform(1e-3, 5.0, 10_000)
    base = mix_weight(si, sj)
    violations = {c: int(np.count_nonzero(mix_weight(c * si, c * sj) != base)) for c in (0.1, 1.0, 10.0)}
    half = bool(np.all(mix_weight(si, si) == 0.5))
    good = half and not any(violations.values())
    record(9, good, f"lambda(s,s) == 0.5: {half}; inexact pairs out of 10000 per c: {violations}")
    assert good


# 10 ------------------------------------------------------------------------------

def _random_batch(rng):
    n = int(rng.integers(0, 300))
    S = int(rng.integers(1, 8))
    labels = rng.integers(0, S + 1, n)
    labels[rng.random(n) < 0.05] = IGNORE
    flags = rng.random(3) < 0.5
    return VoxelBatch(labels, rng.normal(0, 4, (n, S + 1)), S,
                      features=rng.normal(size=(n, int(rng.integers(1, 12)))) if flags[0] else None,
                      sigmas=rng.random(n) + 1e-3 if flags[1] else None,
                      depths=rng.random(n) * 80 if flags[2] else None)


def _pipeline(root):
    data = root / "data"
    assert cli(["gen-scenes", "--seed", "0", "--out", str(data)]) == 0
    assert cli(["train", "--data", str(data), "--mode", "reliocc", "--seed", "0",
                "--out-model", str(root / "m.json"), "--out-dump", str(root / "test.occd"),
                "--out-val-dump", str(root / "val.occd")]) == 0
    assert cli(["eval", "--dump", str(root / "test.occd"), "--uncertainty", "sigma",
                "--out-dir", str(root / "eval")]) == 0
    assert cli(["calibrate", "--kind", "temps", "--fit-dump", str(root / "val.occd"),
                "--apply-dump", str(root / "test.occd"), "--out-dir", str(root / "cal")]) == 0
    return sorted(p for p in root.rglob("*") if p.is_file())


def test_10_roundtrip_and_determinism(tmp_path):
    rng = np.random.default_rng(10)
    mismatches = 0
    for k in range(100):
        b = _random_batch(rng)
        path = tmp_path / f"r{k}.occd"
        write_dump(b, path)
        if encode(read_dump(path)) != path.read_bytes():
            mismatches += 1
    a = _pipeline(tmp_path / "run_a")
    b = _pipeline(tmp_path / "run_b")
    rel_a = [p.relative_to(tmp_path / "run_a") for p in a]
    rel_b = [p.relative_to(tmp_path / "run_b") for p in b]
    differ = [str(r) for r, pa, pb in zip(rel_a, a, b) if pa.read_bytes() != pb.read_bytes()]
    good = mismatches == 0 and rel_a == rel_b and not differ
    record(10, good, f"round-trip mismatches {mismatches}/100; pipeline files {len(a)}, differing: {differ or 'none'}")
    assert good


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
