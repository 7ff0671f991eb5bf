"""Experiment runner: config validation, CSV determinism, manifests, CLI."""

import csv
import io
import json
import math

import numpy as np
import pytest

from cotlab.attention import load_params
from cotlab.expcli import (
    ConfigError,
    Experiment,
    FIG1_METHODS,
    GridWindow,
    Preset,
    RESULT_COLUMNS,
    config_from_manifest,
    load_config,
    main,
    parse_config,
    parse_result_csv,
    prop3_scan,
    run_experiment,
)
from cotlab.theory import cot_optimal, cot_optimal_loss, icl_optimal_loss, prop3_cubic


def _write_config(path, text):
    path.write_text(text)
    return str(path)


TINY_TT = """
[experiment]
kind = "THEORY_TABLE"
output = "{out}"
seeds = [0, 1]
n = 2000

[task]
d = 3
sigma2 = 0.25
D_sweep = [20, 40]
"""


def test_parse_config_full_document():
    doc = {
        "experiment": {
            "kind": "GRID_SEARCH",
            "output": "runs/g",
            "preset": "PAPER",
            "seeds": [3, 4],
            "n": 5000,
            "sigma_eps2": 2.0,
        },
        "task": {"d": 4, "sigma2": 0.5, "D_sweep": [10, 20]},
        "grid": {"a_min": 0.0, "a_max": 2.0, "b_min": -1.0, "b_max": 1.0, "step": 0.5},
        "train": {"steps": 100, "learning_rate": 0.05, "optimizer": "ADAM"},
    }
    cfg = parse_config(doc)
    assert cfg.experiment is Experiment.GRID_SEARCH
    assert cfg.preset is Preset.PAPER
    assert cfg.seeds == (3, 4)
    assert cfg.n == 5000
    assert cfg.sigma_eps2 == 2.0
    assert cfg.D_sweep == (10, 20)
    assert cfg.grid == GridWindow(0.0, 2.0, -1.0, 1.0, 0.5)
    assert cfg.train.steps == 100
    assert cfg.train.optimizer == "ADAM"
    assert cfg.train.family == "coherent"


def test_parse_config_reports_every_field():
    doc = {
        "experiment": {"kind": "NOPE", "n": 1, "seeds": [0, -1]},
        "task": {"sigma2": -2.0, "D_sweep": []},
    }
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    message = str(err.value)
    for field in (
        "experiment.kind",
        "experiment.output",
        "experiment.n",
        "experiment.seeds",
        "task.d",
        "task.sigma2",
        "task.D_sweep",
    ):
        assert field in message


def test_parse_config_rejects_bad_grid_and_train():
    doc = {
        "experiment": {"kind": "TRAIN", "output": "x"},
        "task": {"d": 2, "sigma2": 0.1, "D_sweep": [10]},
        "grid": {"step": -0.1, "a_min": 2.0, "a_max": 1.0},
        "train": {"family": "unknown", "optimizer": "sgd"},
    }
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    message = str(err.value)
    assert "grid.step" in message
    assert "grid.a_max" in message
    assert "train.family" in message
    assert "train.optimizer" in message


def test_load_config_rejects_broken_toml(tmp_path):
    path = _write_config(tmp_path / "broken.toml", "[experiment\nkind=")
    with pytest.raises(ConfigError, match="not valid TOML"):
        load_config(path)


def test_theory_table_rows_and_roundtrip(tmp_path):
    out = tmp_path / "tt"
    path = _write_config(tmp_path / "tt.toml", TINY_TT.format(out=out))
    cfg = load_config(path)
    run_experiment(cfg)

    with open(out / "theory_table.csv") as fp:
        rows = parse_result_csv(fp)
    # 2 theory rows + 2 seeds * 2 mc rows, per D
    assert len(rows) == 2 * (2 + 4)

    for row in rows:
        assert row.experiment == "THEORY_TABLE"
        assert row.d == 3 and row.sigma2 == 0.25
        if row.n == 0:
            assert row.stderr == 0.0
            assert row.mean == row.theory == row.lo90 == row.hi90
        else:
            assert row.n == 2000
            assert row.stderr > 0
            assert row.lo90 == pytest.approx(row.mean - 1.645 * row.stderr)
            assert row.theory is not None

    cot = cot_optimal_loss(3, 0.25, 20).total
    icl = icl_optimal_loss(3, 0.25, 20).total
    by_key = {(r.method, r.D, r.n == 0): r for r in rows if r.seed == 0}
    assert by_key[("coherent_opt", 20, True)].mean == cot
    assert by_key[("stepwise", 20, True)].mean == icl
    # mc estimates within 5 stderr of their closed forms at this tiny n
    for r in rows:
        if r.n > 0:
            assert abs(r.mean - r.theory) < 5 * r.stderr


def test_rerun_is_byte_identical(tmp_path):
    path = _write_config(tmp_path / "tt.toml", TINY_TT.format(out=tmp_path / "a"))
    cfg = load_config(path)
    run_experiment(cfg)
    run_experiment(cfg, tmp_path / "b")
    first = (tmp_path / "a" / "theory_table.csv").read_bytes()
    second = (tmp_path / "b" / "theory_table.csv").read_bytes()
    assert first == second


def test_extending_sweep_keeps_existing_streams(tmp_path):
    base = _write_config(
        tmp_path / "one.toml",
        TINY_TT.format(out=tmp_path / "one").replace("[20, 40]", "[20]"),
    )
    wide = _write_config(tmp_path / "two.toml", TINY_TT.format(out=tmp_path / "two"))
    run_experiment(load_config(base))
    run_experiment(load_config(wide))

    def rows_at_20(out):
        lines = (tmp_path / out / "theory_table.csv").read_text().splitlines()
        return [ln for ln in lines[1:] if ln.split(",")[2] == "20"]

    assert rows_at_20("one") == rows_at_20("two")


def test_manifest_reexecutes_and_echoes(tmp_path):
    out = tmp_path / "tt"
    path = _write_config(tmp_path / "tt.toml", TINY_TT.format(out=out))
    cfg = load_config(path)
    run_experiment(cfg)
    with open(out / "manifest.json") as fp:
        manifest = json.load(fp)
    assert manifest["experiment"] == "THEORY_TABLE"
    assert manifest["outputs"] == ["theory_table.csv"]
    assert manifest["aborted"] is False
    assert manifest["seeds"] == [0, 1]
    assert manifest["wall_time_s"] > 0
    assert config_from_manifest(manifest) == cfg


FIG_TASK = """
[task]
d = 2
sigma2 = 0.5
D_sweep = [20]

[train]
steps = 200
batch_size = 32
"""


def test_fig1_schema_and_method_filter(tmp_path):
    out = tmp_path / "fig1"
    path = _write_config(
        tmp_path / "fig1.toml",
        f"""
[experiment]
kind = "FIG1"
output = "{out}"
seeds = [0]
n = 2000
methods = ["coherent_theory", "coherent_mc", "coherent_trained"]
{FIG_TASK}
""",
    )
    run_experiment(load_config(path))
    with open(out / "fig1.csv") as fp:
        header = fp.readline().strip()
        assert header == ",".join(RESULT_COLUMNS)
        fp.seek(0)
        rows = parse_result_csv(fp)
    assert [r.method for r in rows] == ["coherent_theory", "coherent_mc", "coherent_trained"]
    trained = rows[-1]
    assert trained.theory is None
    assert trained.n == 2000
    assert 0 < trained.mean < 5.0


def test_fig1_rejects_unknown_method(tmp_path):
    path = _write_config(
        tmp_path / "bad.toml",
        f"""
[experiment]
kind = "FIG1"
output = "x"
methods = ["coherent_theory", "mystery"]
{FIG_TASK}
""",
    )
    with pytest.raises(ConfigError, match="experiment.methods"):
        load_config(path)
    assert "mystery" not in FIG1_METHODS


def test_fig2_theory_lines_coincide_for_none_and_y(tmp_path):
    out = tmp_path / "fig2"
    path = _write_config(
        tmp_path / "fig2.toml",
        f"""
[experiment]
kind = "FIG2"
output = "{out}"
seeds = [0]
n = 2000
sigma_eps2 = 1.0
{FIG_TASK}
""",
    )
    run_experiment(load_config(path))
    with open(out / "fig2.csv") as fp:
        rows = parse_result_csv(fp)
    theory = {r.target: r for r in rows if r.n == 0}
    assert set(theory) == {"NONE", "X", "Y", "Z"}
    assert theory["NONE"].mean == theory["Y"].mean
    assert theory["X"].mean > theory["NONE"].mean
    assert theory["Z"].mean > theory["NONE"].mean
    assert theory["NONE"].sigma_eps2 == 0.0
    assert theory["X"].sigma_eps2 == 1.0

    trained = {r.target: r for r in rows if r.n > 0}
    assert set(trained) == {"NONE", "X", "Y", "Z"}
    # clean batches shared across targets, so every perturbation can only hurt
    assert trained["X"].mean > trained["NONE"].mean
    assert trained["Z"].mean > trained["NONE"].mean


def test_grid_experiment_marks_single_best(tmp_path):
    out = tmp_path / "grid"
    path = _write_config(
        tmp_path / "grid.toml",
        f"""
[experiment]
kind = "GRID_SEARCH"
output = "{out}"
seeds = [0]
n = 3000

[task]
d = 3
sigma2 = 0.25
D_sweep = [50]

[grid]
a_min = 1.0
a_max = 2.0
b_min = -1.0
b_max = 0.0
step = 0.2
""",
    )
    run_experiment(load_config(path))
    with open(out / "grid_search.csv") as fp:
        rows = list(csv.DictReader(fp))
    assert len(rows) == 36
    best = [r for r in rows if r["best"] == "1"]
    assert len(best) == 1
    ratios = cot_optimal(3, 0.25)
    assert abs(float(best[0]["a"]) - ratios.vx_over_vy) <= 0.4
    assert abs(float(best[0]["b"]) - ratios.vz_over_vy) <= 0.4
    surfaced = min(float(r["mean"]) for r in rows)
    assert float(best[0]["mean"]) == surfaced


def test_train_experiment_curves_and_checkpoint(tmp_path):
    out = tmp_path / "train"
    path = _write_config(
        tmp_path / "train.toml",
        f"""
[experiment]
kind = "TRAIN"
output = "{out}"
seeds = [0]

[task]
d = 2
sigma2 = 0.25
D_sweep = [20]

[train]
family = "stepwise_pair"
steps = 150
batch_size = 32
""",
    )
    run_experiment(load_config(path))
    with open(out / "train.csv") as fp:
        rows = list(csv.DictReader(fp))
    stages = {r["stage"] for r in rows}
    assert stages == {"f1", "f2"}
    f1_steps = [int(r["step"]) for r in rows if r["stage"] == "f1"]
    assert f1_steps == [0, 100, 149]
    assert all(math.isfinite(float(r["loss"])) for r in rows)

    ckpt = out / "checkpoint_stepwise_pair_D20_seed0.json"
    with open(ckpt) as fp:
        rec = json.load(fp)
    assert set(rec) == {"f1", "f2"}
    f1 = load_params(io.StringIO(json.dumps(rec["f1"])))
    f2 = load_params(io.StringIO(json.dumps(rec["f2"])))
    assert f1.m == 3 and f2.m == 2

    with open(out / "manifest.json") as fp:
        manifest = json.load(fp)
    assert manifest["outputs"] == ["train.csv", ckpt.name]


def test_prop3_scan_verdicts_cover_both_conventions():
    rows, verdicts = prop3_scan(
        d=2, sigma2_values=[0.1], sigma_eps2=1.0, D_values=[100], n=20_000, seeds=[0]
    )
    assert len(rows) == len(verdicts) == 1
    row = rows[0]
    assert row["predicted_sign"] == (1 if prop3_cubic(2, 0.1) > 0 else -1)
    assert row["root_a"] == pytest.approx(0.2984, abs=1e-3)
    assert row["root_b"] == pytest.approx(6.702, abs=1e-3)
    # below the first root the conventions disagree about the sign
    assert row["delta_theorem"] < 0 < row["delta_appendix"]
    verdict = verdicts[0]
    assert verdict["sign_theorem"] == -1
    assert verdict["sign_appendix"] == 1
    if verdict["resolved"]:
        assert verdict["mc_sign"] == verdict["predicted_sign"]
        assert verdict["matches_appendix"]
    json.dumps(verdicts)  # manifest-safe types


def test_parse_result_csv_detects_missing_columns():
    broken = io.StringIO("experiment,d,D\nFIG1,2,10\n")
    with pytest.raises(ValueError, match="missing columns"):
        parse_result_csv(broken)


def test_cli_run_and_exit_codes(tmp_path, capsys):
    bad = _write_config(
        tmp_path / "bad.toml",
        '[experiment]\nkind = "FIG7"\n\n[task]\nd = 2\n',
    )
    assert main(["run", bad]) == 2
    err = capsys.readouterr().err
    assert "experiment.kind" in err and "task.sigma2" in err

    good = _write_config(tmp_path / "tt.toml", TINY_TT.format(out=tmp_path / "out"))
    assert main(["run", good]) == 0
    assert (tmp_path / "out" / "manifest.json").exists()


def test_cli_theory_and_roots(capsys):
    assert main(["theory", "5", "0.25", "200"]) == 0
    output = capsys.readouterr().out
    assert "icl_optimal_loss = 0.31125000000000003" in output
    assert "cot_optimal_loss = 0.28458333333333335" in output
    assert "gap = 0.026666666666666672" in output

    assert main(["roots", "2"]) == 0
    output = capsys.readouterr().out
    root_a = float(output.splitlines()[0].split("=")[1])
    assert root_a == pytest.approx(0.29843788, abs=1e-6)

    assert main(["roots", "1"]) == 2


def test_cli_prop3_writes_manifest(tmp_path):
    out = tmp_path / "p3"
    code = main(
        [
            "prop3",
            "--d", "2",
            "--sigma2", "0.1",
            "--D", "100",
            "--n", "10000",
            "--output", str(out),
        ]
    )
    assert code == 0
    with open(out / "manifest.json") as fp:
        manifest = json.load(fp)
    assert manifest["prop3_agreement"][0]["sigma2"] == 0.1
    assert (out / "prop3_scan.csv").exists()


def test_float_formatting_is_reversible(tmp_path):
    out = tmp_path / "tt"
    run_experiment(load_config(_write_config(tmp_path / "c.toml", TINY_TT.format(out=out))))
    with open(out / "theory_table.csv") as fp:
        rows = parse_result_csv(fp)
    cot = cot_optimal_loss(3, 0.25, 40).total
    matched = [r for r in rows if r.D == 40 and r.n == 0 and r.method == "coherent_opt"]
    assert matched[0].mean == cot  # 17 significant digits round-trip doubles exactly
    mc = [r for r in rows if r.D == 40 and r.n > 0 and r.method == "coherent_opt"]
    assert np.isfinite([r.stderr for r in mc]).all()
