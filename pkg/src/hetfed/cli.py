"""Command line entry point: ``hetfed <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import harness
from .federation import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--preset", help="named preset used when --config is absent")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="run directory (must be new or empty)")
    common.add_argument("--runs", type=int)

    p = argparse.ArgumentParser(prog="hetfed", description="Federated learning simulator under heterogeneous data.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("partition", parents=[common], help="partition the training set and report KS skewness")
    sub.add_parser("train", parents=[common], help="train the configured strategy")
    sub.add_parser("replay-train", parents=[common], help="train with CWT plus generative replay")
    sub.add_parser("fedreplay", parents=[common], help="one-shot latent upload, server-side training")
    att = sub.add_parser("attack", parents=[common], help="reconstruction attack report")
    att.add_argument("--kind", choices=("gradient", "model"))
    att.add_argument("--alpha", type=_alphas, help="TV weight; a comma-separated list runs a sweep")
    att.add_argument("--iters", type=int)
    att.add_argument("--count", type=int)
    sub.add_parser("compare", parents=[common], help="compare strategies against the central benchmark")
    rep = sub.add_parser("report", help="print a run directory's summary and verify its manifest")
    rep.add_argument("directory", type=Path)
    sub.add_parser("schema", help="print the config JSON schema")
    sub.add_parser("presets", help="list preset names")
    return p


def _alphas(text: str):
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _load(args) -> harness.ExperimentConfig:
    if args.config is not None:
        cfg = harness.load_config(args.config)
    elif args.preset is not None:
        cfg = harness.preset_config(args.preset)
    else:
        cfg = harness.ExperimentConfig()
    changes = {"seed": args.seed, "runs": args.runs}
    if args.command == "replay-train":
        changes["strategy.kind"] = "cwt_replay"
    elif args.command == "fedreplay":
        changes["strategy.kind"] = "fedreplay"
    elif args.command == "attack":
        changes.update({"attack.kind": args.kind, "attack.max_iters": args.iters, "attack.count": args.count})
    try:
        return cfg.with_overrides(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _report(directory: Path) -> int:
    if not (directory / "manifest.csv").exists():
        print(f"no manifest in {directory}", file=sys.stderr)
        return EXIT_RUNTIME
    for name in ("summary.csv", "forgetting.csv", "psnr.csv", "partition.json"):
        path = directory / name
        if path.exists():
            print(f"== {name}")
            print(path.read_text().rstrip())
    bad = harness.verify_manifest(directory)
    for rel in bad:
        print(f"manifest mismatch: {rel}", file=sys.stderr)
    return EXIT_RUNTIME if bad else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        if args.command == "schema":
            print(harness.SCHEMA_PATH.read_text().rstrip())
            return EXIT_OK
        if args.command == "presets":
            print("\n".join(harness.preset_names()))
            return EXIT_OK
        if args.command == "report":
            return _report(args.directory)
        cfg = _load(args)
        if args.command == "partition":
            plan, ks = harness.run_partition(cfg, args.out)
            print(f"K={len(plan.assignments)} ks_skewness={ks:.6f}")
        elif args.command == "attack":
            alphas = args.alpha or [cfg.attack.alpha]
            for alpha in alphas:
                acfg = cfg.with_overrides(**{"attack.alpha": alpha})
                out = args.out
                if len(alphas) > 1:
                    out = (out or Path("runs") / cfg.name) / f"alpha_{alpha:g}"
                report = harness.run_attack(acfg, out)
                if len(alphas) > 1:
                    print(f"# alpha={alpha:g}")
                print(report.to_csv().rstrip())
        elif args.command == "compare":
            outcome = harness.compare_strategies(cfg, args.out)
            print((outcome.directory / "summary.csv").read_text().rstrip())
        else:
            outcome = harness.run_experiment(cfg, args.out)
            print((outcome.directory / "summary.csv").read_text().rstrip())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.RunError, ValueError, FloatingPointError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
