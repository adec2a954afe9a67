#!/usr/bin/env python3
"""Head-to-head experiment: discrete CQL with the exactly-computed
conservative penalty vs continuous CQL with the sampled estimator, on the
3-demonstration maze. Writes an ExperimentReport directory and exits 0 only
if every verdict holds."""

import argparse
import sys

from saq.diagnostics import run_penalty_gap_diagnostic


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--saq-steps", type=int, default=20000)
    parser.add_argument("--cont-steps", type=int, default=6000)
    parser.add_argument("--out", default="runs/penalty_gap")
    args = parser.parse_args()

    report = run_penalty_gap_diagnostic(
        seeds=tuple(args.seeds), saq_steps=args.saq_steps,
        cont_steps=args.cont_steps)
    report.save(args.out)
    for name, ok in sorted(report.verdicts.items()):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    print(f"report written to {args.out}")
    return 0 if report.passed() else 3


if __name__ == "__main__":
    sys.exit(main())
