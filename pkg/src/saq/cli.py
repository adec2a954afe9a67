"""Command-line pipeline: dataset generation, quantizer training, action
discretization, agent training, evaluation, and diagnostics.

Every training command writes a reproducible run directory containing the
fully resolved configuration (config.resolved, key=value), metrics.csv, the
model binaries, and a MANIFEST listing each emitted file with its CRC32.
Exit codes: 0 success, 1 usage error, 2 data/model error, 3 failed
diagnostic verdict.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import zlib

import numpy as np

from .continuous_rl import ContinuousAgent, ContinuousConfig, train_continuous_cql
from .data import (
    DatasetFormatError,
    DiscreteTransitionDataset,
    TransitionDataset,
    load_dataset,
    save_dataset,
)
from .discrete_rl import AGENT_MAGIC, AlgoConfig, DiscreteAgent, evaluate_success, train_agent
from .envs import default_maze, generate_bimodal_bandit, generate_demonstrations
from .quantizer import (
    QUANTIZER_MAGIC,
    QuantizerModel,
    QuantizerTrainConfig,
    quantize_dataset,
    reconstruction_mse,
    train_quantizer,
)
from .serialize import ModelFormatError
from . import diagnostics
from .continuous_rl import CONTINUOUS_MAGIC
from .metrics import MetricTrace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERDICT = 3

DIAGNOSTIC_RUNNERS = {
    "penalty-gap": diagnostics.run_penalty_gap_diagnostic,
    "iql-oracle": diagnostics.run_iql_oracle_check,
    "codebook": diagnostics.run_codebook_ablation,
    "state-cond": diagnostics.run_state_conditioning_ablation,
    "constraint-sweep": diagnostics.run_constraint_sweep,
    "identities": diagnostics.run_identity_suite,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the exit-code contract
    instead of calling sys.exit itself."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---- config files -------------------------------------------------------------


def parse_kv_file(path) -> dict[str, str]:
    """key=value per line; blank lines and #-comments ignored."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
    except OSError as e:
        raise DataError(f"cannot read config file {path}: {e}") from e
    return values


def _coerce(value: str, template):
    if isinstance(template, bool):
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        return tuple(int(x) for x in value.split(",") if x)
    return value


def resolve_config(cls, config_file: str | None, overrides: list[str],
                   named: dict | None = None):
    """Build a config dataclass from defaults < key=value file < --set
    overrides < named command-line flags. Returns (instance, resolved dict)."""
    defaults = cls()
    fields = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(cls)}
    values = dict(parse_kv_file(config_file)) if config_file else {}
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise UsageError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(raw, fields[key])
    for key, val in (named or {}).items():
        if val is not None:
            kwargs[key] = val
    try:
        instance = cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e
    resolved = {f.name: getattr(instance, f.name) for f in dataclasses.fields(cls)}
    return instance, resolved


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---- run directories -----------------------------------------------------------


def _resolve_out(path: str) -> str:
    root = os.environ.get("SAQ_RUN_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def write_run_dir(out_dir: str, resolved: dict, artifacts: dict, force: bool) -> str:
    """Create a run directory: config.resolved, each artifact (name -> writer
    callable taking a path), and a MANIFEST of CRC32 checksums. Refuses to
    touch an existing non-empty directory unless force is set."""
    out_dir = _resolve_out(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise DataError(f"output directory {out_dir} is not empty (use --force)")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out_dir}: {e}") from e
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8",
              newline="\n") as f:
        for key in sorted(resolved):
            f.write(f"{key}={_format_value(resolved[key])}\n")
    for name, writer in artifacts.items():
        writer(os.path.join(out_dir, name))
    entries = []
    for root, _, files in os.walk(out_dir):
        for fname in files:
            if fname == "MANIFEST":
                continue
            full = os.path.join(root, fname)
            with open(full, "rb") as f:
                crc = zlib.crc32(f.read())
            entries.append((os.path.relpath(full, out_dir), crc))
    with open(os.path.join(out_dir, "MANIFEST"), "w", encoding="utf-8",
              newline="\n") as f:
        for rel, crc in sorted(entries):
            f.write(f"{crc:08x}  {rel}\n")
    return out_dir


# ---- subcommands ----------------------------------------------------------------


def _load_continuous(path) -> TransitionDataset:
    dataset = load_dataset(path)
    if isinstance(dataset, DiscreteTransitionDataset):
        raise DataError(f"{path} holds discretized actions; expected continuous")
    return dataset


def _load_discrete(path) -> DiscreteTransitionDataset:
    dataset = load_dataset(path)
    if not isinstance(dataset, DiscreteTransitionDataset):
        raise DataError(f"{path} holds continuous actions; run `saq quantize` first")
    return dataset


def cmd_gen_data(args) -> int:
    if args.env == "maze":
        dataset = generate_demonstrations(default_maze(), args.n, args.noise, args.seed)
    else:
        dataset = generate_bimodal_bandit(args.n, args.noise, args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} transitions to {args.out}")
    return EXIT_OK


def cmd_train_quantizer(args) -> int:
    dataset = _load_continuous(args.dataset)
    named = {"codebook_size": args.k, "embedding_dim": args.d,
             "epochs": args.epochs, "seed": args.seed,
             "state_conditioned": args.state_conditioned}
    config, resolved = resolve_config(QuantizerTrainConfig, args.config, args.set, named)
    trace = MetricTrace(["epoch", "total", "reconstruction", "codebook",
                         "commitment", "utilization"])
    model = train_quantizer(dataset, config, trace)
    mse = reconstruction_mse(model, dataset)
    out = write_run_dir(args.out, resolved,
                        {"quantizer.saqm": model.save, "metrics.csv": trace.to_csv},
                        args.force)
    print(f"trained K={config.codebook_size} quantizer, "
          f"reconstruction mse {mse:.6g}; run dir {out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    dataset = _load_continuous(args.dataset)
    model = QuantizerModel.load(args.model)
    discrete = quantize_dataset(dataset, model)
    save_dataset(discrete, args.out)
    print(f"wrote {len(discrete)} discretized transitions to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    eval_env = default_maze() if args.env == "maze" else None
    if args.algo in ("cont-cql", "cont-bc"):
        dataset = _load_continuous(args.dataset)
        named = {"algorithm": args.algo.removeprefix("cont-"), "alpha": args.alpha,
                 "gradient_steps": args.steps, "seed": args.seed}
        config, resolved = resolve_config(ContinuousConfig, args.config, args.set, named)
        agent, trace = train_continuous_cql(dataset, config, eval_env=eval_env)
        artifacts = {"agent.saqc": agent.save, "metrics.csv": trace.to_csv}
    else:
        if not args.quantizer:
            raise UsageError(f"--quantizer is required for algo {args.algo}")
        dataset = _load_discrete(args.dataset)
        model = QuantizerModel.load(args.quantizer)
        named = {"algorithm": args.algo, "alpha": args.alpha,
                 "gradient_steps": args.steps, "seed": args.seed}
        config, resolved = resolve_config(AlgoConfig, args.config, args.set, named)
        agent, trace = train_agent(dataset, model, config, eval_env=eval_env)
        artifacts = {"agent.saqa": agent.save, "metrics.csv": trace.to_csv}
    out = write_run_dir(args.out, resolved, artifacts, args.force)
    evals = [v for v in trace.column("eval_success")
             if not np.isnan(v)] if trace.rows else []
    tail = f", final eval success {evals[-1]}" if evals else ""
    print(f"trained {args.algo} for {config.gradient_steps} steps{tail}; run dir {out}")
    return EXIT_OK


def _read_magic(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read(4)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def cmd_eval(args) -> int:
    spec = default_maze()
    magic = _read_magic(args.agent)
    if magic == AGENT_MAGIC:
        if not args.quantizer:
            raise UsageError("--quantizer is required for discrete agents")
        agent = DiscreteAgent.load(args.agent)
        model = QuantizerModel.load(args.quantizer)
        success = evaluate_success(agent, model, spec, args.episodes)
    elif magic == CONTINUOUS_MAGIC:
        agent = ContinuousAgent.load(args.agent)
        from .continuous_rl import _evaluate_continuous
        success = _evaluate_continuous(agent, spec, args.episodes)
    else:
        raise DataError(f"{args.agent} is not an agent file (magic {magic!r})")
    print(f"success rate {success} over {args.episodes} episodes")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    runner = DIAGNOSTIC_RUNNERS[args.experiment]
    kwargs = {}
    if args.seeds is not None:
        if args.experiment in ("penalty-gap", "codebook", "state-cond", "constraint-sweep"):
            kwargs["seeds"] = tuple(args.seeds)
        else:
            kwargs["seed"] = args.seeds[0]
    if args.steps is not None:
        if args.experiment == "penalty-gap":
            kwargs["saq_steps"] = args.steps
            kwargs["cont_steps"] = max(1, args.steps // 3)
        elif args.experiment in ("codebook", "state-cond", "constraint-sweep"):
            kwargs["gradient_steps"] = args.steps
    report = runner(**kwargs)
    out = _resolve_out(args.out)
    report.save(out)
    for name, verdict in sorted(report.verdicts.items()):
        print(f"[{'PASS' if verdict else 'FAIL'}] {name}")
    print(f"report written to {out}")
    return EXIT_OK if report.passed() else EXIT_VERDICT


# ---- argument parsing ----------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="saq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    p.add_argument("--env", choices=["maze", "bandit"], required=True)
    p.add_argument("--n", type=int, required=True,
                   help="trajectories (maze) or samples (bandit)")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-quantizer", help="fit an action quantizer")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=None, help="codebook size")
    p.add_argument("--d", type=int, default=None, help="embedding dimension")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--state-conditioned", type=lambda s: _coerce(s, True), default=None)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train_quantizer)

    p = sub.add_parser("quantize", help="discretize a dataset's actions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True, help="quantizer file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("train", help="train an offline RL agent")
    p.add_argument("--algo", required=True,
                   choices=["cql", "iql", "brac", "bc", "cont-cql", "cont-bc"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--quantizer", help="quantizer file (discrete algos)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=None, help="gradient steps")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--env", choices=["maze", "none"], default="maze",
                   help="evaluation environment during training")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained agent on the maze")
    p.add_argument("--agent", required=True)
    p.add_argument("--quantizer")
    p.add_argument("--env", choices=["maze"], default="maze")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", help="run a scripted experiment")
    p.add_argument("experiment", choices=sorted(DIAGNOSTIC_RUNNERS))
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(fn=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetFormatError, ModelFormatError, FileNotFoundError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
