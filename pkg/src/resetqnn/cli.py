"""Operator entry point: verify | gradcheck | train | eval.

The config file is the source of truth; flags override single fields. Every
command is deterministic for a fixed config and seed on the exact backend.
Exit codes: 0 success, 1 check failure or aborted run, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .channels import KRAUS_MAX_QUBITS, format_report, run_verification
from .errors import ConfigError, DivergenceError, ToolkitError
from .gradcheck import DEFAULT_FD_STEP, compare_all, write_grad_csv
from .pipeline import (
    TrainConfig,
    datasets_from_config,
    evaluate,
    load_checkpoint,
    parameter_counts,
    run_training,
)

GRADCHECK_TOL = 1e-6


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _thread_cap(workers: int):
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=workers)
    except ImportError:
        return contextlib.nullcontext()


def _load_config(args) -> TrainConfig:
    config = TrainConfig.from_json_file(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "backend", None) is not None:
        if args.backend == "direct":
            overrides["backend"] = "exact"
        elif config.backend == "exact":
            overrides["backend"] = "surrogate-train"
    if overrides:
        d = config.to_dict()
        d.update(overrides)
        config = TrainConfig.from_dict(d)
    return config


def _write_manifest(out_dir: Path, command: str, config: TrainConfig, outputs: dict, finished=None):
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "git_describe": _git_describe(),
        "seed": config.seed,
        "package_version": __version__,
        "started_at": outputs.pop("_started_at"),
        "finished_at": finished,
        "outputs": outputs,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def cmd_verify(args) -> int:
    config = _load_config(args)
    spec = config.spec()
    if spec.n > KRAUS_MAX_QUBITS:
        raise ConfigError(
            f"verification builds dense unitaries; geometry capped at {KRAUS_MAX_QUBITS} qubits"
        )
    with _thread_cap(config.workers):
        records = run_verification(
            spec, seed=config.seed, trials=args.trials, corrupt_kraus=args.inject_fault == "kraus"
        )
    print(format_report(records))
    failing = [r.name for r in records if not r.passed]
    if failing:
        print(f"FAILED checks: {', '.join(failing)}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    config = _load_config(args)
    spec = config.spec()
    rng = np.random.default_rng(config.seed)
    theta = rng.uniform(-np.pi, np.pi, spec.param_count)
    weights = rng.normal(size=spec.n_main)
    with _thread_cap(config.workers):
        reports = compare_all(spec, theta, obs=weights, h=args.fd_step)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "gradcheck.csv"
    write_grad_csv(reports, csv_path)
    worst = max(r.abs_err for r in reports)
    print(f"{len(reports)} parameters checked; max |shift - fd| = {worst:.3e}")
    print(f"report: {csv_path}")
    if worst >= GRADCHECK_TOL:
        bad = [r.index for r in reports if r.abs_err >= GRADCHECK_TOL]
        print(f"FAILED indices (err >= {GRADCHECK_TOL}): {bad[:20]}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    outputs = {
        "_started_at": _now(),
        "metrics": str(out_dir / "metrics.csv"),
        "checkpoint": str(out_dir / "ckpt_last.npz"),
    }
    _write_manifest(out_dir, "train", config, dict(outputs))
    try:
        with _thread_cap(config.workers):
            state, records = run_training(config, out_dir, resume=args.resume)
    except DivergenceError as exc:
        print(f"aborted: {exc}; last good checkpoint kept at {outputs['checkpoint']}", file=sys.stderr)
        return 1
    outputs["parameter_counts"] = parameter_counts(state, config)
    _write_manifest(out_dir, "train", config, dict(outputs), finished=_now())
    test_rows = [r for r in records if r.split == "test"]
    if test_rows:
        last = test_rows[-1]
        print(
            f"trained {config.epochs} epochs ({config.method}); "
            f"test accuracy {last.accuracy:.4f}, test loss {last.loss:.4f}"
        )
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    state = load_checkpoint(args.checkpoint, config)
    _, test_ds = datasets_from_config(config)
    if len(test_ds) == 0:
        raise ConfigError("evaluation dataset is empty")
    with _thread_cap(config.workers):
        result = evaluate(test_ds, state, config)
    print(f"samples:  {len(test_ds)}")
    print(f"accuracy: {result.accuracy:.6f}")
    print(f"loss:     {result.mean_loss:.6f}")
    print("confusion (rows = true class):")
    for row in result.confusion:
        print("  " + " ".join(f"{v:6d}" for v in row))
    record = {
        "config_hash": config.config_hash(),
        "checkpoint": str(args.checkpoint),
        "samples": len(test_ds),
        **result.to_record(),
    }
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval.jsonl", "a") as fh:
            fh.write(json.dumps(record) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resetqnn",
        description="Measure-and-reset circuit toolkit: verification, gradients, training.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--workers", type=int, default=None, help="cap BLAS threads")

    p = sub.add_parser("verify", parents=[common], help="run channel-math checks")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument(
        "--inject-fault",
        choices=["none", "kraus"],
        default="none",
        help="deliberately corrupt one check (reporting-path test hook)",
    )
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gradcheck", parents=[common], help="shift rule vs finite differences")
    p.add_argument("--fd-step", type=float, default=DEFAULT_FD_STEP)
    p.add_argument("--out", default=".", help="directory for gradcheck.csv")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--backend", choices=["surrogate", "direct"], default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="directory for eval.jsonl")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
