import csv
import json

import numpy as np
import pytest

from commscale import harness
from commscale.analysis import parametric_table
from commscale.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main
from commscale.model import ModelConfig, save_checkpoint, zero_params


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_train_zero_iterations(tmp_path):
    code = main(["train", "--agents", "3", "--labels", "3", "--encoder", "mean", "--seed", "1",
                 "--iterations", "0", "--out", str(tmp_path)])
    assert code == EXIT_OK
    run = tmp_path / "train" / "3x3" / "mean" / "seed1"
    assert _read_csv(run / "metrics.csv") == [harness.METRIC_COLUMNS]
    ck = json.loads((run / "checkpoint.json").read_text())
    assert list(ck) == sorted(ck)
    assert "final_mean=nan" in (run / "summary.txt").read_text()


def test_train_writes_artifacts_and_is_reproducible(tmp_path):
    args = ["train", "--agents", "3", "--labels", "4", "--encoder", "attention", "--seed", "2",
            "--iterations", "6", "--batch-size", "8", "--message-size", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    rel = "train/3x4/attention/seed2/metrics.csv"
    first = (tmp_path / "a" / rel).read_bytes()
    assert first == (tmp_path / "b" / rel).read_bytes()
    rows = _read_csv(tmp_path / "a" / rel)
    assert rows[0] == harness.METRIC_COLUMNS
    assert len(rows) == 7
    assert rows[1][:4] == ["train/3x4/attention", "2", "0", "8"]
    assert first.endswith(b"\n")


@pytest.mark.parametrize("bad", [
    ["--agents", "1"],
    ["--labels", "1"],
    ["--encoder", "lstm"],
    ["--lr", "-1"],
    ["--batch-size", "1"],
    ["--encoder", "none", "--comm-steps", "1"],
])
def test_train_rejects_invalid_input_without_writing(tmp_path, bad):
    out = tmp_path / "out"
    assert main(["train", "--iterations", "1", "--out", str(out)] + bad) == EXIT_INVALID
    assert not out.exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[env]\nn_agents = 4\nn_labels = 5\n[train]\nbatch_size = 6\ntotal_updates = 2\n"
                   "[run]\nseeds = 3, 4\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--labels", "3", "--out", str(out)]) == EXIT_OK
    for seed in (3, 4):
        summary = harness.read_summary(out / "train" / "4x3" / "mean" / f"seed{seed}" / "summary.txt")
        assert summary["episodes"] == "12"


def test_config_file_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n_agents = 3\nwarp_factor = 9\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_delta_examples():
    assert harness.delta_pct(0.941, 0.999) == pytest.approx(-5.806, abs=5e-4)
    assert harness.delta_pct(0.8, 0.8) == 0.0


def test_grids_cover_seven_cells():
    assert len(harness.GRIDS["all"]) == 7
    base = harness.make_spec(3, 3, seeds=[0])
    assert len(harness.sweep_specs("all", base)) == 21
    assert len(harness.sweep_specs("scale-agents", base)) == 12


def test_sweep_full_grid(tmp_path):
    code = main(["sweep", "--grid", "all", "--iterations", "2", "--batch-size", "4", "--seeds", "0",
                 "--message-size", "4", "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = _read_csv(tmp_path / "all" / "aggregate.csv")
    assert rows[0] == harness.AGGREGATE_COLUMNS
    assert len(rows) == 22
    by_cell = {}
    for n, l, enc, mean, std, delta in rows[1:]:
        by_cell[(n, l, enc)] = (float(mean), float(delta))
    for n, l in harness.GRIDS["all"]:
        att, d = by_cell[(str(n), str(l), "attention")]
        mean, _ = by_cell[(str(n), str(l), "mean")]
        if mean > 0:
            assert d == pytest.approx((att - mean) / mean * 100, abs=1e-3)


def test_sweep_parallel_matches_serial(tmp_path):
    args = ["sweep", "--grid", "scale-labels", "--iterations", "2", "--batch-size", "4", "--seeds", "0,1",
            "--message-size", "4"]
    assert main(args + ["--out", str(tmp_path / "s")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "p"), "--parallelism", "2"]) == EXIT_OK
    for path in sorted((tmp_path / "s").rglob("*.csv")):
        twin = tmp_path / "p" / path.relative_to(tmp_path / "s")
        assert path.read_bytes() == twin.read_bytes()


def test_aggregate_deltas_are_exact():
    rows = [
        {"n_agents": 3, "n_labels": 16, "encoder": "mean", "seed": s, "final_mean": v, "final_std": 0.0}
        for s, v in enumerate([0.998, 1.0])
    ] + [
        {"n_agents": 3, "n_labels": 16, "encoder": "attention", "seed": s, "final_mean": v, "final_std": 0.0}
        for s, v in enumerate([0.9, 0.982])
    ]
    table = harness.aggregate(rows)
    att = next(r for r in table if r["encoder"] == "attention")
    assert att["mean_reward"] == pytest.approx(0.941, abs=1e-12)
    assert att["delta_vs_mean_pct"] == pytest.approx(-5.806, abs=5e-4)
    mean = next(r for r in table if r["encoder"] == "mean")
    assert mean["delta_vs_mean_pct"] == 0.0


def _write_summary(root, n, l, enc, seed, mean):
    run = root / "g" / f"{n}x{l}" / enc / f"seed{seed}"
    run.mkdir(parents=True)
    harness.write_summary(run / "summary.txt", {
        "run_id": f"g/{n}x{l}/{enc}", "n_agents": n, "n_labels": l, "encoder": enc, "seed": seed,
        "final_mean": mean, "final_std": 0.0,
    })


def test_report_single_run(tmp_path, capsys):
    _write_summary(tmp_path, 3, 3, "mean", 0, 1.0)
    assert main(["report", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "No Comm." in out and "Mean" in out and "Attention" in out and "Delta" in out
    assert sum(1 for line in out.splitlines() if line.startswith("N=")) == 1


def test_report_flags_failing_cells(tmp_path, capsys):
    _write_summary(tmp_path, 3, 3, "mean", 0, 1.0)
    _write_summary(tmp_path, 3, 3, "none", 0, 0.9)  # above the blind-answer ceiling
    assert main(["report", str(tmp_path)]) == EXIT_FAILED
    assert "!" in capsys.readouterr().out


def test_report_empty_dir(tmp_path):
    assert main(["report", str(tmp_path)]) != EXIT_OK
    assert main(["report", str(tmp_path / "missing")]) == EXIT_INVALID


def test_analyze_zero_checkpoint(tmp_path):
    ck = tmp_path / "ck.json"
    save_checkpoint(zero_params(ModelConfig(3, 8, 4, 1, "mean")), ck)
    assert main(["analyze", str(ck), "--agents", "3", "--labels", "8", "--out", str(tmp_path / "a")]) == EXIT_OK
    report = json.loads((tmp_path / "a" / "analysis.json").read_text())
    assert report["min_distance"] == 0.0
    lines = (tmp_path / "a" / "points.txt").read_text().splitlines()
    assert len(lines) == 36 and lines[0].split()[2] == "0-0"


def test_analyze_synthetic_checkpoint_recovers_curve(tmp_path):
    a, b, c, d = 0.37, 1.25, 2.5, 0.75
    params = zero_params(ModelConfig(3, 8, 2, 1, "mean"))
    params["encoder.weight"][:] = parametric_table(a, b, c, d, 8)  # label i sends row i
    ck = tmp_path / "ck.json"
    save_checkpoint(params, ck)
    assert main(["analyze", str(ck), "--dims", "0", "1", "--out", str(tmp_path / "a")]) == EXIT_OK
    fit = json.loads((tmp_path / "a" / "analysis.json").read_text())["fit"]
    np.testing.assert_allclose([fit["a"], fit["b"], fit["c"], fit["d"]], [a, b, c, d], atol=1e-9)
    assert fit["tau_order"] == list(range(8))


def test_analyze_rejects_malformed_checkpoint(tmp_path):
    ck = tmp_path / "ck.json"
    ck.write_text("{broken")
    out = tmp_path / "a"
    assert main(["analyze", str(ck), "--out", str(out)]) == EXIT_INVALID
    assert not out.exists()
    save_checkpoint(zero_params(ModelConfig(3, 8, 4, 1, "mean")), ck)
    assert main(["analyze", str(ck), "--labels", "5", "--out", str(out)]) == EXIT_INVALID
    assert not out.exists()
