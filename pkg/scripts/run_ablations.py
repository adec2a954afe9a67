#!/usr/bin/env python3
"""Quantizer and constraint ablations on the maze pipeline: codebook-size
robustness, state-conditioned vs state-blinded codebooks, and the
conservatism-weight sweep. Writes one ExperimentReport directory per
experiment and exits 0 only if every verdict holds."""

import argparse
import os
import sys

from saq.diagnostics import (
    run_codebook_ablation,
    run_constraint_sweep,
    run_state_conditioning_ablation,
)

EXPERIMENTS = {
    "codebook": lambda a: run_codebook_ablation(
        seeds=tuple(a.seeds), gradient_steps=a.steps),
    "state-cond": lambda a: run_state_conditioning_ablation(
        seeds=tuple(a.seeds), gradient_steps=a.steps),
    "constraint-sweep": lambda a: run_constraint_sweep(
        seeds=tuple(a.seeds), gradient_steps=a.steps),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("experiments", nargs="*", default=list(EXPERIMENTS),
                        choices=list(EXPERIMENTS) + [[]],
                        help="which ablations to run (default: all)")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--steps", type=int, default=20000)
    parser.add_argument("--out", default="runs/ablations")
    args = parser.parse_args()

    all_ok = True
    for name in args.experiments or list(EXPERIMENTS):
        report = EXPERIMENTS[name](args)
        out = os.path.join(args.out, name)
        report.save(out)
        for verdict, ok in sorted(report.verdicts.items()):
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {verdict}")
        all_ok &= report.passed()
    print(f"reports written under {args.out}")
    return 0 if all_ok else 3


if __name__ == "__main__":
    sys.exit(main())
