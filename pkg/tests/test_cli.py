"""Exit codes, file outputs, resolved-config replay, golden-run parity."""

import json

import numpy as np
import pytest

from gapcraft import cli, models, pipeline, synthtasks
from gapcraft.cli import main
from gapcraft.pipeline import PipelineConfig, RunLog


def test_no_arguments_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_exit_2(capsys):
    assert main(["verify-theorem", "--nonsense", "--out", "x"]) == 2


def test_unknown_subcommand_exit_2():
    assert main(["frobnicate", "--out", "x"]) == 2


def test_missing_input_exit_1(tmp_path, capsys):
    code = main(
        ["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
    )
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_verify_theorem_reports_zero_violations(tmp_path, capsys):
    out = tmp_path / "vt"
    code = main(["verify-theorem", "--instances", "25", "--seed", "0", "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "verify_theorem.json").read_text())
    assert summary["violations"] == 0
    assert summary["proof_term_violations"] == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == summary


def test_gen_writes_bundle(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--family", "rotated", "--seed", "4", "--out", str(out)]) == 0
    for name in ("source", "proxy", "target", "target_test"):
        assert (out / f"{name}.csv").exists()
    ds, meta = synthtasks.load_dataset(out / "target.csv")
    assert meta["family"] == "rotated"
    assert len(ds) == 48
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["subcommand"] == "gen" and resolved["seed"] == 4


def test_bound_report_bars(tmp_path):
    out = tmp_path / "br"
    assert main(["bound-report", "--tasks", "4", "--seed", "2", "--out", str(out), "--bars"]) == 0
    payload = json.loads((out / "bound_report.json").read_text())
    assert len(payload) == 4
    lines = (out / "bars.csv").read_text().strip().splitlines()
    assert len(lines) == 5
    for row in payload.values():
        segments = row["err_s"] + row["fa"] + row["e_fld"] + row["e_tf"]
        assert segments == pytest.approx(row["rhs"], abs=1e-9)


def test_parse_grid():
    assert cli._parse_grid("0.1:1.0:0.1") == pytest.approx(
        [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    )
    with pytest.raises(cli.DomainError):
        cli._parse_grid("1.0:0.1:0.1")
    with pytest.raises(cli.DomainError):
        cli._parse_grid("nonsense")


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """gen + pretrain + recalibrate once; several tests build on it."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    m1 = root / "m1"
    m2 = root / "m2"
    assert main(["gen", "--family", "rotated", "--seed", "3", "--out", str(data)]) == 0
    assert (
        main(
            ["pretrain", "--data", str(data), "--out", str(m1), "--seed", "3",
             "--scale", "0.5"]
        )
        == 0
    )
    assert (
        main(
            ["recalibrate", "--data", str(data), "--models", str(m1), "--out",
             str(m2), "--seed", "3", "--epochs", "50"]
        )
        == 0
    )
    return root


def test_recalibrate_outputs(cli_workspace):
    summary = json.loads((cli_workspace / "m2" / "recalibrate_summary.json").read_text())
    assert summary["final_penalty"] <= summary["initial_penalty"]


def test_stage1_cli_matches_library(cli_workspace, tmp_path):
    """Golden-run comparison: the subcommand is a thin wrapper."""
    out = tmp_path / "s1"
    args = ["stage1", "--data", str(cli_workspace / "data"), "--models",
            str(cli_workspace / "m2"), "--out", str(out), "--seed", "3",
            "--scale", "0.2"]
    assert main(args) == 0
    cli_phi, _ = models.load_params(out / "phi.json")

    bundle = cli._load_bundle(cli_workspace / "data")
    theta, _ = models.load_params(cli_workspace / "m2" / "theta.json")
    head, _ = models.load_params(cli_workspace / "m2" / "source_head.json")
    cfg = PipelineConfig(seed=3, scale=0.2)
    rng = np.random.default_rng(np.random.SeedSequence([3, 4]))
    phi = models.init_mlp([12, 16, theta.output_dim], "tanh", rng)
    lib_phi, lib_log = pipeline.stage1(
        phi, theta, head, bundle.proxy, bundle.target, cfg, bundle.target_test, 3
    )
    assert all(
        np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b)
        for a, b in zip(cli_phi.layers, lib_phi.layers)
    )
    cli_log = RunLog.from_jsonl(out / "runlog.jsonl")
    assert cli_log.comparable() == lib_log.comparable()


def test_resolved_config_replay_bitwise(cli_workspace, tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    base = ["stage1", "--data", str(cli_workspace / "data"), "--models",
            str(cli_workspace / "m2"), "--seed", "3", "--scale", "0.2"]
    assert main(base + ["--out", str(out1)]) == 0
    assert (
        main(
            ["stage1", "--config", str(out1 / "resolved_config.json"), "--out", str(out2)]
        )
        == 0
    )
    assert (out1 / "phi.json").read_text() == (out2 / "phi.json").read_text()
    a = RunLog.from_jsonl(out1 / "runlog.jsonl")
    b = RunLog.from_jsonl(out2 / "runlog.jsonl")
    assert a.comparable() == b.comparable()


def test_stage2_and_correlate_cli(cli_workspace, tmp_path):
    s1 = tmp_path / "s1"
    s2 = tmp_path / "s2"
    corr = tmp_path / "corr"
    data = str(cli_workspace / "data")
    assert main(["stage1", "--data", data, "--models", str(cli_workspace / "m2"),
                 "--out", str(s1), "--seed", "3", "--scale", "0.2"]) == 0
    assert main(["stage2", "--data", data, "--models", str(cli_workspace / "m2"),
                 "--phi", str(s1 / "phi.json"), "--out", str(s2), "--seed", "3",
                 "--scale", "0.2"]) == 0
    summary = json.loads((s2 / "stage2_summary.json").read_text())
    assert 0.0 <= summary["holdout_error"] <= 1.0
    assert main(["correlate", "--runlog", str(s1 / "runlog.jsonl"), "--out", str(corr)]) == 0
    r = json.loads((corr / "correlation.json").read_text())["pearson_r"]
    assert -1.0 <= r <= 1.0
    series = (corr / "gap_error_series.csv").read_text().strip().splitlines()
    assert series[0] == "epoch,phase,semantic_gap,holdout_error"


def test_correlate_undefined_is_domain_error(tmp_path, capsys):
    log = RunLog()
    from gapcraft.pipeline import RunRecord

    for i in range(1, 6):
        log.append(RunRecord(i, "fa", 1.0, 0.0, 1.0, 0.25, float("nan"), 0.0))
    path = tmp_path / "flat.jsonl"
    log.to_jsonl(path)
    assert main(["correlate", "--runlog", str(path), "--out", str(tmp_path / "o")]) == 1


def test_gen_all_families(tmp_path):
    for family in ("rotated", "permuted_labels", "gap_dial"):
        out = tmp_path / family
        assert main(["gen", "--family", family, "--seed", "1", "--out", str(out)]) == 0
        _, meta = synthtasks.load_dataset(out / "target.csv")
        assert meta["family"] == family


def test_log_level_env_var(monkeypatch):
    # any of the documented values (and junk) must configure without raising
    for value in ("quiet", "info", "debug", "nonsense"):
        monkeypatch.setenv("GAPCRAFT_LOG", value)
        cli._setup_logging()


def test_sweep_omega_cli(cli_workspace, tmp_path):
    out = tmp_path / "sweep"
    code = main(
        ["sweep-omega", "--data", str(cli_workspace / "data"), "--out", str(out),
         "--grid", "0.3:0.5:0.2", "--epochs", "40", "--seed", "3", "--scale", "0.3"]
    )
    assert code == 0
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert lines[0] == "omega,proxy_error,penalty_residual"
    assert len(lines) == 3
