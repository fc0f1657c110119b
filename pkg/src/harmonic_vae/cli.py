"""Command-line entry point: ``harmonic-vae <subcommand>``.

Exit codes: 0 on success, 1 for configuration or usage errors, 2 when a stage
fails at run time (numerical trouble, unreadable checkpoint, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, SweepConfig, load_config
from .data import KINDS, gen_dataset, write_dataset
from .experiment import RunResult, load_run, run_experiment, run_sweep, trend_table, write_trend

log = logging.getLogger("harmonic_vae")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

ANALYSES = {
    "spectrum": "spectrum",
    "hermite": "hermite",
    "lipschitz": "lipschitz",
    "attack": "attack",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--seed", type=int, default=default, help="overrides the training (or dataset) seed")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--config", default=default, help="JSON experiment or sweep config")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="harmonic-vae", description=__doc__.splitlines()[0])
    _global_flags(parser, None)
    parser.add_argument("-v", "--verbose", action="store_true")
    # the same flags after the subcommand; SUPPRESS keeps values given before it
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset CSV")
    g.add_argument("kind", choices=KINDS)
    g.add_argument("--size", type=int)
    g.add_argument("--unnormalized-sinc", action="store_true", help="use sin(u)/u instead of sin(pi u)/(pi u)")

    sub.add_parser("train", parents=[common], help="generate the dataset and train a model")
    sub.add_parser("run", parents=[common], help="train and run every configured analysis")
    for name in ANALYSES:
        sub.add_parser(name, parents=[common], help=f"run the {name} analysis on a trained run directory")
    sub.add_parser("sweep", parents=[common], help="run a sweep config and write trend.csv")

    r = sub.add_parser("report", parents=[common], help="rebuild trend.csv from finished run directories")
    r.add_argument("dirs", nargs="+", help="run directories or sweep directories")
    return parser


def _experiment_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if isinstance(cfg, SweepConfig):
        raise ConfigError(f"{args.config} is a sweep config; use the sweep subcommand")
    if args.seed is not None:
        cfg = cfg.with_overrides({"train.seed": args.seed})
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _report_run(result: RunResult) -> int:
    failed = [s for s in result.manifest["stages"] if s["status"] == "failed"]
    for s in failed:
        log.error("stage %s failed: %s", s["stage"], s["error"])
    print(result.out)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    ds = gen_dataset(args.kind, args.size, seed, normalized_sinc=not args.unnormalized_sinc)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.csv"
    write_dataset(ds, path)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    return _report_run(run_experiment(cfg, stages=("dataset", "train", "summary")))


def cmd_run(args) -> int:
    return _report_run(run_experiment(_experiment_config(args)))


def cmd_analysis(args) -> int:
    cfg = _experiment_config(args)
    ckpt = Path(cfg.output_dir) / "checkpoint.json"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint in {cfg.output_dir}; run the train subcommand first")
    stages = ("dataset", "train", ANALYSES[args.command], "summary")
    return _report_run(run_experiment(cfg, stages=stages, reuse_model=ckpt))


def cmd_sweep(args) -> int:
    if args.config is None:
        raise ConfigError("--config is required")
    sweep = load_config(args.config)
    if isinstance(sweep, ExperimentConfig):
        sweep = SweepConfig(base=sweep, name=sweep.name, output_dir=sweep.output_dir)
    if args.seed is not None:
        sweep = replace(sweep, seeds=(args.seed,))
    if args.out is not None:
        sweep = replace(sweep, output_dir=args.out)
    result = run_sweep(sweep)
    print(result.out / "trend.csv")
    return EXIT_OK if all(r.ok for _, r in result.runs) else EXIT_RUNTIME


def cmd_report(args) -> int:
    runs = []
    for d in map(Path, args.dirs):
        if (d / "sweep.json").exists():
            with open(d / "sweep.json") as fh:
                entries = json.load(fh)["runs"]
            runs += [(e["point"], _finished(d / e["dir"])) for e in entries]
        elif (d / "manifest.json").exists():
            runs.append(({"run": d.name}, _finished(d)))
        else:
            raise ConfigError(f"{d} is neither a run nor a sweep directory")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_trend(trend_table(runs), out / "trend.csv")
    print(out / "trend.csv")
    return EXIT_OK


def _finished(d: Path) -> RunResult:
    manifest, metrics = load_run(d)
    return RunResult(d, manifest, metrics)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
    **{name: cmd_analysis for name in ANALYSES},
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (CheckpointError, ArithmeticError, RuntimeError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
