"""Experiment runs, sweeps over the scaling grids, and result aggregation.

On-disk layout::

    out/<grid>/<N>x<L>/<encoder>/seed<k>/metrics.csv
                                        /checkpoint.json
                                        /summary.txt
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import EnvConfig, bayes_optimal_no_comm_reward, random_policy_reward
from .model import ModelConfig, init_params, save_checkpoint
from .trainer import TrainConfig, evaluate, final_window_score, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["run_id", "seed", "update", "episodes", "mean_norm_reward", "policy_entropy", "loss"]
AGGREGATE_COLUMNS = ["n_agents", "n_labels", "encoder", "mean_reward", "std_reward", "delta_vs_mean_pct"]
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
GREEDY_EVAL_EPISODES = 2000

GRIDS = {
    "scale-labels": [(3, 3), (3, 8), (3, 16), (3, 24)],
    "scale-agents": [(3, 3), (8, 3), (16, 3), (24, 3)],
}
GRIDS["all"] = sorted(set(GRIDS["scale-labels"]) | set(GRIDS["scale-agents"]))
ENCODER_ORDER = ("none", "mean", "attention")


@dataclass
class RunSpec:
    env: EnvConfig
    model: ModelConfig
    train: TrainConfig
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    grid: str = "train"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if (self.env.n_agents, self.env.n_labels) != (self.model.n_agents, self.model.n_labels):
            raise ValueError("env and model configs disagree on agents/labels")

    @property
    def run_id(self) -> str:
        return f"{self.grid}/{self.env.n_agents}x{self.env.n_labels}/{self.model.encoder_kind}"

    def run_dir(self, out_dir, seed: int) -> Path:
        return Path(out_dir) / self.run_id / f"seed{seed}"


def make_spec(n_agents: int, n_labels: int, encoder: str = "mean", message_size: int = 16,
              n_comm_steps: int | None = None, train: TrainConfig | None = None,
              seeds=DEFAULT_SEEDS, grid: str = "train") -> RunSpec:
    if n_comm_steps is None:
        n_comm_steps = 0 if encoder == "none" else 1
    env = EnvConfig(n_agents, n_labels)
    model = ModelConfig(n_agents, n_labels, message_size, n_comm_steps, encoder)
    return RunSpec(env, model, train or TrainConfig(), list(seeds), grid)


def sweep_specs(grid: str, base: RunSpec) -> list[RunSpec]:
    """Every (cell, encoder) of a named grid, inheriting everything else from ``base``."""
    if grid not in GRIDS:
        raise ValueError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    specs = []
    for n_agents, n_labels in GRIDS[grid]:
        for encoder in ENCODER_ORDER:
            steps = 0 if encoder == "none" else max(base.model.n_comm_steps, 1)
            specs.append(make_spec(n_agents, n_labels, encoder, base.model.message_size, steps,
                                   replace(base.train), base.seeds, grid))
    return specs


# ---------------------------------------------------------------------------
# config files


_KEYS = {
    "n_agents": int, "n_labels": int, "message_size": int, "n_comm_steps": int,
    "encoder_kind": str, "learning_rate": float, "discount": float, "batch_size": int,
    "beta": float, "total_updates": int, "optimizer": str, "eval_window_fraction": float,
    "seeds": lambda s: [int(x) for x in s.replace(",", " ").split()],
    "grid": str,
}


def read_config(path) -> dict:
    """Flatten a ``key = value`` file with optional [env]/[model]/[train]/[run] sections."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    parser.read_string(text)
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in _KEYS:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                values[key] = _KEYS[key](raw.strip())
            except ValueError as exc:
                raise ValueError(f"{path}: bad value for {key}: {raw!r}") from exc
    return values


# ---------------------------------------------------------------------------
# single runs


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(path, run_id: str, seed: int, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for update, episodes, reward, entropy, loss in history.rows():
            writer.writerow([run_id, seed, update, episodes, _fmt(reward), _fmt(entropy), _fmt(loss)])


def write_summary(path, values: dict) -> None:
    lines = [f"{k}={v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def run_one(spec: RunSpec, seed: int, out_dir) -> dict:
    """Train one seed and write its artifacts. Returns the summary values."""
    run_dir = spec.run_dir(out_dir, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = replace(spec.train, seed=seed)
    params, history = train(spec.env, spec.model, train_cfg)
    if len(history) == 0:
        params = init_params(spec.model, np.random.default_rng(seed))
    write_metrics(run_dir / "metrics.csv", spec.run_id, seed, history)
    save_checkpoint(params, run_dir / "checkpoint.json")
    summary = {
        "run_id": spec.run_id,
        "n_agents": spec.env.n_agents,
        "n_labels": spec.env.n_labels,
        "encoder": spec.model.encoder_kind,
        "seed": seed,
        "updates": len(history),
        "episodes": len(history) * train_cfg.batch_size,
        "beta": train_cfg.resolved_beta(spec.env.n_agents),
    }
    if len(history):
        mean, std = final_window_score(history, train_cfg.eval_window_fraction)
        greedy = evaluate(spec.env, params, spec.model, GREEDY_EVAL_EPISODES,
                          np.random.default_rng([seed, 1]), greedy=True)
        summary.update(final_mean=_fmt(mean), final_std=_fmt(std), greedy_reward=_fmt(greedy))
    else:
        summary.update(final_mean="nan", final_std="nan", greedy_reward="nan")
    write_summary(run_dir / "summary.txt", summary)
    return summary


def _run_job(job):
    spec, seed, out_dir = job
    try:
        return spec.run_id, seed, run_one(spec, seed, out_dir), None
    except Exception as exc:  # recorded per cell, reported by the caller
        log.exception("run %s seed %s failed", spec.run_id, seed)
        return spec.run_id, seed, None, f"{type(exc).__name__}: {exc}"


def run_many(specs: list[RunSpec], out_dir, parallelism: int = 1):
    """Run every (spec, seed); results are ordered by (run_id, seed) regardless of scheduling."""
    jobs = [(spec, seed, out_dir) for spec in specs for seed in spec.seeds]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]
    return sorted(results, key=lambda r: (r[0], r[1]))


# ---------------------------------------------------------------------------
# aggregation


def delta_pct(attention: float, mean: float) -> float:
    """Relative change going from the mean encoder to another encoder, in percent."""
    return (attention - mean) / mean * 100.0


def collect_summaries(results_dir) -> list[dict]:
    rows = []
    for path in sorted(Path(results_dir).rglob("summary.txt")):
        s = read_summary(path)
        try:
            rows.append({
                "n_agents": int(s["n_agents"]), "n_labels": int(s["n_labels"]),
                "encoder": s["encoder"], "seed": int(s["seed"]),
                "final_mean": float(s["final_mean"]), "final_std": float(s["final_std"]),
                "path": str(path.parent),
            })
        except (KeyError, ValueError):
            log.warning("skipping unreadable summary %s", path)
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Per (N, L, encoder): mean and std over seeds of the final-window reward."""
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r["n_agents"], r["n_labels"], r["encoder"]), []).append(r["final_mean"])
    order = {e: i for i, e in enumerate(ENCODER_ORDER)}
    out = []
    for (n, l, enc), vals in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1], order.get(kv[0][2], 9))):
        v = np.asarray(vals)
        out.append({"n_agents": n, "n_labels": l, "encoder": enc, "mean_reward": float(v.mean()),
                    "std_reward": float(v.std()), "n_seeds": len(vals)})
    means = {(r["n_agents"], r["n_labels"]): r["mean_reward"] for r in out if r["encoder"] == "mean"}
    for r in out:
        ref = means.get((r["n_agents"], r["n_labels"]))
        r["delta_vs_mean_pct"] = delta_pct(r["mean_reward"], ref) if ref else float("nan")
    return out


def write_aggregate(path, table: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for r in table:
            writer.writerow([r["n_agents"], r["n_labels"], r["encoder"], f"{r['mean_reward']:.6f}",
                             f"{r['std_reward']:.6f}", f"{r['delta_vs_mean_pct']:.3f}"])


def acceptance_bounds(n_agents: int, n_labels: int, encoder: str):
    """Expected reward interval for a cell, or None when no bound is asserted.

    No-communication agents must land between random guessing and the best
    blind answer. Communicating agents on the small N=3 cells should solve
    the task.
    """
    env = EnvConfig(n_agents, n_labels)
    if encoder == "none":
        return random_policy_reward(env) - 0.01, bayes_optimal_no_comm_reward(env) + 0.01
    if n_agents == 3 and n_labels <= 8:
        return 0.95, 1.0
    return None


def format_report(table: list[dict]) -> tuple[str, int]:
    """Render a Table-3 style grid (No Comm. / Mean / Attention / delta) and count out-of-bounds cells."""
    by_cell: dict[tuple, dict] = {}
    for r in table:
        by_cell.setdefault((r["n_agents"], r["n_labels"]), {})[r["encoder"]] = r
    header = f"{'cell':<12}{'No Comm.':>18}{'Mean':>18}{'Attention':>18}{'Delta':>11}"
    lines = [header, "-" * len(header)]
    failures = 0
    for (n, l), encs in sorted(by_cell.items()):
        cols = []
        for enc in ENCODER_ORDER:
            r = encs.get(enc)
            if r is None:
                cols.append(f"{'-':>18}")
                continue
            flag = ""
            bounds = acceptance_bounds(n, l, enc)
            if bounds and not bounds[0] <= r["mean_reward"] <= bounds[1]:
                flag = "!"
                failures += 1
            cols.append(f"{r['mean_reward']:.3f} +- {r['std_reward']:.3f}{flag:1}".rjust(18))
        att = encs.get("attention")
        delta = f"{att['delta_vs_mean_pct']:.3f}%" if att and not math.isnan(att["delta_vs_mean_pct"]) else "-"
        lines.append(f"{f'N={n}, L={l}':<12}{''.join(cols)}{delta:>11}")
    if failures:
        lines.append(f"{failures} cell(s) outside acceptance bounds (marked !)")
    return "\n".join(lines), failures
