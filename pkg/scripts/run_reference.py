#!/usr/bin/env python3
"""Desk-scale reference experiment.

Trains the toy network under every uncertainty-learning mode on the seeded
default scenes, then prints three tables:

* online methods on the test split,
* offline calibrators fitted on the baseline's val dump,
* ECE_sem under logit noise and input corruptions (weak / strong presets).

Optionally writes each mode's test dump, reports and loss curve to --out.
"""
import argparse
import time
from pathlib import Path

from occrel.calib import DISPLAY_NAMES, KINDS
from occrel.cli import write_curve
from occrel.config import REFERENCE_SEED
from occrel.dump import write_dump
from occrel.experiments import (input_perturbation_sweep, logit_noise_sweep, run_offline,
                                run_online)
from occrel.report import emit_reports, format_table
from occrel.toynet.perturb import PRESETS
from occrel.toynet.training import MODES


def robustness_rows(ref, modes):
    lines = [f"{'method':<12}{'kind':<15}{'clean':>9}{'weak':>9}{'strong':>9}"]
    for mode in modes:
        run = ref.runs[mode]
        clean = 100 * run.report.ece_sem
        for kind, (weak, strong) in PRESETS.items():
            if kind == "logit_noise":
                sweep = logit_noise_sweep(run, (weak, strong), ref.seed)
            else:
                sweep = input_perturbation_sweep(ref, run, kind, (weak, strong))
            lines.append(f"{mode:<12}{kind:<15}{clean:>9.2f}{100 * sweep[weak].ece_sem:>9.2f}"
                         f"{100 * sweep[strong].ece_sem:>9.2f}")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=REFERENCE_SEED)
    ap.add_argument("--out", type=Path, help="directory for dumps, reports and loss curves")
    args = ap.parse_args()

    t0 = time.perf_counter()
    ref = run_online(MODES, seed=args.seed)
    print(format_table([(m, r.report) for m, r in ref.runs.items()],
                       f"online methods, test split, seed {args.seed} (percent)"))
    print()
    offline = run_offline(ref.runs["baseline"], KINDS)
    print(format_table([(DISPLAY_NAMES.get(k, k), r) for k, r in offline.items()],
                       "offline calibrators on the baseline model (percent)"))
    print()
    print("ECE_sem under corruption (percent)")
    print(robustness_rows(ref, ("baseline", "reliocc")))
    print(f"\n{time.perf_counter() - t0:.1f}s")

    if args.out:
        for mode, run in ref.runs.items():
            d = args.out / mode
            d.mkdir(parents=True, exist_ok=True)
            write_dump(run.test, d / "test.occd")
            emit_reports(run.report, d / "report")
            write_curve(run.curve, d / "loss_curve.csv")


if __name__ == "__main__":
    main()
