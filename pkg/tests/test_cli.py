import csv

import pytest

from par_lab import cli
from par_lab.config import load_config

SMALL = """\
model: {n_layers: 4, d_model: 16, n_heads: 2, d_ff: 32, grid_side: 4, max_text_len: 6, palette_size: 3}
pretrain: {steps: 20, eval_every: 10, warmup: 5}
data: {n_train: 200, n_eval: 30, n_pref: 60, n_router_eval: 30}
router: {n_heads: 2, d_ff: 32}
train: {epochs: 1}
budgets: {K: 1, M: 8, drop_at_layer: 1}
prefs: {rank_layer: 1, margin: 0.0}
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.yaml"
    cfg.write_text(SMALL)
    return d, ["--config", str(cfg), "--out", str(d / "runs"), "--no-plot"]


def run_dir(workspace):
    d, args = workspace
    return d / "runs" / load_config(args[1]).hash()


def read_csv(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("# ")]
    return list(csv.DictReader(lines))


def test_missing_prerequisite_names_command(workspace, capsys):
    d, args = workspace
    assert cli.main(["pretrain", *args, "--out", str(d / "empty")]) == 2
    assert "par-lab gen-data" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  d_model: 16\n  depth: 3\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_pipeline_and_idempotence(workspace, capsys):
    _, args = workspace
    root = run_dir(workspace)
    assert cli.main(["gen-data", *args]) == 0
    assert cli.main(["pretrain", *args]) == 0
    first = (root / "model/host.bin").read_bytes()
    capsys.readouterr()
    assert cli.main(["pretrain", *args]) == 0
    assert "up-to-date" in capsys.readouterr().out
    assert (root / "model/host.bin").read_bytes() == first
    metrics = (root / "model/metrics.csv").read_text()
    assert "# config_hash: " + root.name in metrics and "# host_hash: " in metrics
    assert (root / "config.yaml").exists()
    assert (root / "data/train.jsonl").read_text().startswith('{"header"')


def test_run_par_rows_per_strategy(workspace):
    _, args = workspace
    assert cli.main(["run-par", *args, "--draws", "2"]) == 0
    rows = read_csv(run_dir(workspace) / "K1_M8_at1/run_par.csv")
    assert [r["strategy"] for r in rows] == ["baseline", "router", "attention", "random_0", "random_1"]
    assert {(r["K"], r["M"], r["T_kept"], r["L_kept"]) for r in rows[1:]} == {("1", "8", "8", "3")}
    text = (run_dir(workspace) / "K1_M8_at1/run_par.csv").read_text()
    assert "# host_hash: " in text and "# seed: 0" in text


def test_run_par_zero_budget_equals_baseline(workspace):
    _, args = workspace
    assert cli.main(["run-par", *args, "-T", "16", "-L", "4"]) == 0
    rows = read_csv(run_dir(workspace) / "K0_M0_at1/run_par.csv")
    assert [r["strategy"] for r in rows] == ["baseline", "router", "attention", "random"]
    strip = [{k: v for k, v in r.items() if k != "strategy"} for r in rows]
    assert all(r == strip[0] for r in strip)


def test_eval_router_single_axis_modes(workspace):
    _, args = workspace
    assert cli.main(["eval-router", *args, "--mode", "token"]) == 0
    rows = read_csv(run_dir(workspace) / "K1_M8_at1/eval_router_token.csv")
    assert {r["K"] for r in rows} == {"0"} and rows[1]["strategy"] == "router"
    text = (run_dir(workspace) / "K1_M8_at1/eval_router_token.csv").read_text()
    assert "# router: joint-then-token" in text
    assert cli.main(["eval-router", *args, "--mode", "layer", "--specialist"]) == 2


def test_build_prefs_rejects_empty_budget(workspace, capsys):
    _, args = workspace
    assert cli.main(["build-prefs", *args, "-T", "16", "-L", "4"]) == 2
    assert "nothing to prefer" in capsys.readouterr().err


def test_flops_output(workspace, capsys):
    _, args = workspace
    assert cli.main(["flops", *args]) == 0
    out = capsys.readouterr().out
    assert out.startswith("T=8 L=3 flops=")
    row = read_csv(run_dir(workspace) / "flops_K1_M8_at1.csv")[0]
    assert row["T_kept"] == "8" and 0 < float(row["ratio"]) < 1
    assert cli.main(["flops", *args, "--large-scale", "576", "32"]) == 0
    out = capsys.readouterr().out
    assert "large-scale (convention-dependent): T=576 L=32" in out and "ratio=1.000000" in out


def test_seed_override_changes_run_dir(workspace):
    d, args = workspace
    assert cli.main(["flops", *args, "--seed", "5"]) == 0
    dirs = [p.name for p in (d / "runs").iterdir()]
    assert len(dirs) == 2
