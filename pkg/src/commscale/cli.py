"""Command-line entry point: ``commscale {train,sweep,analyze,report}``.

Exit codes: 0 success, 1 invalid input, 2 a run failed or results fall
outside their acceptance bounds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .analysis import analyze
from .model import config_from_params, load_checkpoint
from .trainer import TrainConfig

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

log = logging.getLogger("commscale")


class InvalidInput(Exception):
    pass


def _run_options(p: argparse.ArgumentParser, single: bool) -> None:
    if single:
        p.add_argument("--agents", type=int, help="number of agents N")
        p.add_argument("--labels", type=int, help="number of labels L")
        p.add_argument("--encoder", choices=["mean", "attention", "none"])
    p.add_argument("--message-size", type=int)
    p.add_argument("--comm-steps", type=int)
    p.add_argument("--beta", type=float, help="entropy weight (default: per-N lookup)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--iterations", type=int, help="number of updates")
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int)
    seeds.add_argument("--seeds", type=str, help="comma-separated seeds")
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, default=Path("results"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="commscale", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration for each seed")
    _run_options(p, single=True)

    p = sub.add_parser("sweep", help="run a scaling grid for every encoder")
    _run_options(p, single=False)
    p.add_argument("--grid", choices=sorted(harness.GRIDS))
    p.add_argument("--parallelism", type=int, default=1)

    p = sub.add_parser("analyze", help="analyze the protocol stored in a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--agents", type=int)
    p.add_argument("--labels", type=int)
    p.add_argument("--dims", type=int, nargs=2, metavar=("X", "Y"))
    p.add_argument("--out", type=Path, default=Path("analysis"))

    p = sub.add_parser("report", help="summarize a results directory")
    p.add_argument("results", type=Path)
    return parser


def _merged_settings(args) -> dict:
    """Defaults < config file < command-line flags."""
    values = harness.read_config(args.config) if args.config else {}
    flags = {
        "n_agents": getattr(args, "agents", None),
        "n_labels": getattr(args, "labels", None),
        "encoder_kind": getattr(args, "encoder", None),
        "message_size": args.message_size,
        "n_comm_steps": args.comm_steps,
        "beta": args.beta,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "total_updates": args.iterations,
        "optimizer": args.optimizer,
        "grid": getattr(args, "grid", None),
    }
    if args.seed is not None:
        flags["seeds"] = [args.seed]
    elif args.seeds:
        flags["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def _spec_from(values: dict, single: bool) -> harness.RunSpec:
    train_keys = ("learning_rate", "discount", "batch_size", "beta", "total_updates", "optimizer",
                  "eval_window_fraction")
    train = TrainConfig(**{k: values[k] for k in train_keys if k in values})
    encoder = values.get("encoder_kind", "mean")
    return harness.make_spec(
        values.get("n_agents", 3) if single else 3,
        values.get("n_labels", 3) if single else 3,
        encoder if single else "mean",
        values.get("message_size", 16),
        values.get("n_comm_steps"),
        train,
        values.get("seeds", list(harness.DEFAULT_SEEDS)),
        "train" if single else values.get("grid", "scale-labels"),
    )


def _report_runs(results) -> int:
    failed = 0
    for run_id, seed, summary, error in results:
        if error:
            failed += 1
            print(f"{run_id} seed={seed} FAILED: {error}")
        else:
            print(f"{run_id} seed={seed} updates={summary['updates']} "
                  f"final={float(summary['final_mean']):.4f} +- {float(summary['final_std']):.4f}")
    return failed


def cmd_train(args) -> int:
    try:
        spec = _spec_from(_merged_settings(args), single=True)
    except (ValueError, OSError) as exc:
        raise InvalidInput(str(exc)) from exc
    results = harness.run_many([spec], args.out)
    return EXIT_FAILED if _report_runs(results) else EXIT_OK


def cmd_sweep(args) -> int:
    try:
        values = _merged_settings(args)
        base = _spec_from(values, single=False)
        specs = harness.sweep_specs(base.grid, base)
        if args.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
    except (ValueError, OSError) as exc:
        raise InvalidInput(str(exc)) from exc
    results = harness.run_many(specs, args.out, args.parallelism)
    failed = _report_runs(results)
    rows = [
        {"n_agents": s["n_agents"], "n_labels": s["n_labels"], "encoder": s["encoder"],
         "seed": s["seed"], "final_mean": float(s["final_mean"]), "final_std": float(s["final_std"])}
        for _, _, s, err in results if not err
    ]
    table = harness.aggregate(rows)
    out = Path(args.out) / base.grid
    out.mkdir(parents=True, exist_ok=True)
    harness.write_aggregate(out / "aggregate.csv", table)
    text, _ = harness.format_report(table)
    print(text)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_analyze(args) -> int:
    try:
        params = load_checkpoint(args.checkpoint)
        config = config_from_params(params)
    except (ValueError, KeyError) as exc:
        raise InvalidInput(f"malformed checkpoint: {exc}") from exc
    if args.agents is not None and args.agents != config.n_agents:
        raise InvalidInput(f"checkpoint is for {config.n_agents} agents, not {args.agents}")
    if args.labels is not None and args.labels != config.n_labels:
        raise InvalidInput(f"checkpoint is for {config.n_labels} labels, not {args.labels}")
    M = config.message_size
    if args.dims and not all(0 <= d < M for d in args.dims):
        raise InvalidInput(f"dims must lie in [0, {M})")
    report = analyze(params, tuple(args.dims) if args.dims else None)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "analysis.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    fit = report.get("fit")
    dims = fit["dims"] if fit else (list(args.dims) if args.dims else [0, min(1, M - 1)])
    with open(args.out / "points.txt", "w", encoding="utf-8") as fh:
        for entry in report["mean_points"]:
            i, j = entry["pair"]
            fh.write(f"{entry['point'][dims[0]]!r} {entry['point'][dims[1]]!r} {i}-{j}\n")
    print(f"min pairwise-mean distance: {report['min_distance']:.6g}")
    if fit:
        print(f"x = {fit['a']:.4g} * 2^tau + {fit['b']:.4g}  (R^2 = {fit['r2_x']:.4f})")
        print(f"y = {fit['c']:.4g} * ln(tau + 1) + {fit['d']:.4g}  (R^2 = {fit['r2_y']:.4f})")
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.results.is_dir():
        raise InvalidInput(f"{args.results} is not a directory")
    rows = [r for r in harness.collect_summaries(args.results) if r["final_mean"] == r["final_mean"]]
    if not rows:
        print(f"no completed runs under {args.results}", file=sys.stderr)
        return EXIT_FAILED
    table = harness.aggregate(rows)
    text, failures = harness.format_report(table)
    print(text)
    return EXIT_FAILED if failures else EXIT_OK


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "analyze": cmd_analyze, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
