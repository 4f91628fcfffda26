#!/usr/bin/env python3
"""Baseline vs reliocc on the test split over several seeds.

Prints per-seed differences in ECE_sem, PRR_sem and mIoU (reliocc minus
baseline, percentage points) and their means.
"""
import argparse

import numpy as np

from occrel.experiments import run_online


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    args = ap.parse_args()
    rows = []
    print(f"{'seed':>4}{'dECE_sem':>10}{'dPRR_sem':>10}{'dmIoU':>9}")
    for seed in args.seeds:
        ref = run_online(("baseline", "reliocc"), seed=seed)
        b, r = ref.runs["baseline"].report, ref.runs["reliocc"].report
        row = (100 * (r.ece_sem - b.ece_sem), 100 * (r.prr_sem - b.prr_sem), 100 * (r.miou - b.miou))
        rows.append(row)
        print(f"{seed:>4}{row[0]:>+10.2f}{row[1]:>+10.2f}{row[2]:>+9.2f}", flush=True)
    m = np.mean(rows, axis=0)
    print(f"{'mean':>4}{m[0]:>+10.2f}{m[1]:>+10.2f}{m[2]:>+9.2f}")


if __name__ == "__main__":
    main()
