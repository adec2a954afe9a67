#!/usr/bin/env python3
"""Exactness checks that need no training: the randomized identity suite
(conservative penalty == behavioral-cloning NLL, exact KL / exact backup vs
Monte-Carlo, Gibbs' inequality, policy normalization) and the numeric
KL-budget oracle for the closed-form constrained policy. Exits 0 only if
every verdict holds."""

import argparse
import os
import sys

from saq.diagnostics import run_identity_suite, run_iql_oracle_check


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--instances", type=int, default=100,
                        help="random instances for the KL-budget oracle")
    parser.add_argument("--out", default="runs/oracles")
    args = parser.parse_args()

    all_ok = True
    for name, report in (
            ("identities", run_identity_suite(seed=args.seed)),
            ("iql-oracle", run_iql_oracle_check(n_instances=args.instances,
                                                seed=args.seed))):
        report.save(os.path.join(args.out, name))
        for verdict, ok in sorted(report.verdicts.items()):
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {verdict}")
        all_ok &= report.passed()
    print(f"reports written under {args.out}")
    return 0 if all_ok else 3


if __name__ == "__main__":
    sys.exit(main())
