#!/usr/bin/env python3
"""End-to-end maze pipeline via the command-line interface: generate
demonstrations, fit the action quantizer, discretize the dataset, train a
discrete offline-RL agent, and evaluate it. Equivalent to running the saq
subcommands by hand; useful as a smoke test and a usage reference."""

import argparse
import os
import sys

from saq.cli import main as saq


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--algo", default="cql",
                        choices=["cql", "iql", "brac", "bc"])
    parser.add_argument("--demos", type=int, default=3)
    parser.add_argument("--k", type=int, default=32)
    parser.add_argument("--steps", type=int, default=20000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/maze_pipeline")
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    data = os.path.join(args.out, "demos.saqd")
    discrete = os.path.join(args.out, "demos_discrete.saqd")
    qdir = os.path.join(args.out, "quantizer")
    adir = os.path.join(args.out, args.algo)
    quantizer = os.path.join(qdir, "quantizer.saqm")
    force = ["--force"] if args.force else []

    steps = [
        ["gen-data", "--env", "maze", "--n", str(args.demos),
         "--seed", "7", "--out", data],
        ["train-quantizer", "--dataset", data, "--k", str(args.k),
         "--seed", str(args.seed), "--out", qdir] + force,
        ["quantize", "--dataset", data, "--model", quantizer,
         "--out", discrete],
        ["train", "--algo", args.algo, "--dataset", discrete,
         "--quantizer", quantizer, "--steps", str(args.steps),
         "--seed", str(args.seed), "--out", adir] + force,
        ["eval", "--agent", os.path.join(adir, "agent.saqa"),
         "--quantizer", quantizer, "--episodes", "10"],
    ]
    for argv in steps:
        print("+ saq " + " ".join(argv))
        code = saq(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
