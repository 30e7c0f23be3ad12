"""Harness tests: config round-trips, CLI exit codes, artifacts, verify."""

import hashlib
import json
from pathlib import Path

import pytest

from wagma.harness.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGENCE,
    EXIT_OK,
    main,
)
from wagma.harness.config import RunConfig, load_config
from wagma.harness.runner import (
    apply_override,
    config_for_mode,
    execute_run,
    resolve_out_dir,
    run_compare,
)
from wagma.optim import ConfigError


BASE_CONFIG = {
    "P": 4,
    "S": 2,
    "tau": 3,
    "T": 6,
    "mode": "wagma",
    "eta": {"kind": "constant", "value": 0.05},
    "b": 1,
    "problem": {"kind": "quadratic", "d": 8, "condition_number": 4.0, "seed": 2},
    "delay": {"base_compute_ms": 5.0, "jitter_max_ms": 0.0, "link_latency_ms": 0.5},
    "seed": 21,
}


def write_config(tmp_path, overrides=None, name="cfg.json"):
    raw = json.loads(json.dumps(BASE_CONFIG))
    raw["out_dir"] = str(tmp_path / "out")
    if overrides:
        raw.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_config_roundtrip_identity(tmp_path):
    cfg = load_config(write_config(tmp_path))
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert RunConfig.from_dict(again.to_dict()) == again


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, {"bogus_key": 1}))


def test_config_rejects_alpha_and_beta(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, {"alpha": True, "beta": True}))


def test_config_rejects_bad_mode(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, {"mode": "psgd"}))


def test_config_missing_keys(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text(json.dumps({"P": 4}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_out_dir_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv("WAGMA_OUT_ROOT", str(tmp_path / "root"))
    assert resolve_out_dir("runs/x", None) == tmp_path / "root" / "runs" / "x"
    assert resolve_out_dir(str(tmp_path / "abs"), None) == tmp_path / "abs"
    assert resolve_out_dir("runs/x", str(tmp_path / "cli")) == tmp_path / "cli"


# ---------------------------------------------------------------------------
# run command
# ---------------------------------------------------------------------------

def test_cli_run_writes_artifacts(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["run", str(path)]) == EXIT_OK
    out = tmp_path / "out"
    csv_lines = (out / "metrics.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + BASE_CONFIG["T"]
    assert csv_lines[0].startswith("iteration,sim_time_ms,loss_mu")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["metrics_rows"] == BASE_CONFIG["T"]
    digest = hashlib.sha256((out / "metrics.csv").read_bytes()).hexdigest()
    assert manifest["metrics_sha256"] == digest
    assert manifest["config"]["P"] == 4


def test_cli_run_config_error_leaves_no_artifacts(tmp_path):
    path = write_config(tmp_path, {"alpha": True, "beta": True})
    assert main(["run", str(path)]) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_cli_run_divergence_exit(tmp_path):
    path = write_config(tmp_path, {"eta": {"kind": "constant", "value": 1e9}, "T": 40})
    assert main(["run", str(path)]) == EXIT_DIVERGENCE


def test_cli_run_same_seed_same_hash(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["run", str(path), "--out", str(tmp_path / "b")]) == EXIT_OK
    ha = hashlib.sha256((tmp_path / "a" / "metrics.csv").read_bytes()).hexdigest()
    hb = hashlib.sha256((tmp_path / "b" / "metrics.csv").read_bytes()).hexdigest()
    assert ha == hb


def test_cli_run_seed_override_changes_hash(tmp_path):
    path = write_config(tmp_path, {"delay": {"base_compute_ms": 5.0, "jitter_max_ms": 1.0,
                                             "link_latency_ms": 0.5}})
    assert main(["run", str(path), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["run", str(path), "--out", str(tmp_path / "b"), "--seed", "99"]) == EXIT_OK
    ha = (tmp_path / "a" / "metrics.csv").read_bytes()
    hb = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert ha != hb


# ---------------------------------------------------------------------------
# compare command
# ---------------------------------------------------------------------------

def test_compare_identical_modes_identical_rows(tmp_path):
    cfg = load_config(write_config(tmp_path))
    rows = run_compare(cfg, ["wagma", "wagma"], tmp_path / "cmp")
    assert rows[0]["final_loss"] == rows[1]["final_loss"]
    assert rows[0]["sim_time_ms"] == rows[1]["sim_time_ms"]
    assert rows[0]["mode"] == "wagma" and rows[1]["mode"] == "wagma#2"


def test_compare_protocols_coincide_without_stragglers(tmp_path):
    # tau=1 and S=P make the group path a per-step global average, so the
    # wagma and local SGD rows must match to high precision.
    cfg = load_config(write_config(tmp_path, {"tau": 1, "S": 4}))
    rows = {r["mode"]: r for r in run_compare(cfg, ["wagma", "local_sgd"], tmp_path / "cmp")}
    assert abs(rows["wagma"]["final_loss"] - rows["local_sgd"]["final_loss"]) <= 1e-9


def test_compare_straggler_direction(tmp_path):
    cfg = load_config(
        write_config(
            tmp_path,
            {
                "P": 8, "S": 2, "tau": 5, "T": 15,
                "delay": {
                    "base_compute_ms": 20.0, "jitter_max_ms": 0.0, "link_latency_ms": 0.5,
                    "straggler": {"victims_per_iteration": 2, "extra_delay_ms": 60.0,
                                  "selection_seed": 7},
                },
            },
        )
    )
    rows = {r["mode"]: r for r in run_compare(cfg, ["wagma", "local_sgd"], tmp_path / "cmp")}
    assert rows["wagma"]["sim_time_ms"] < rows["local_sgd"]["sim_time_ms"]


def test_cli_compare_bad_mode(tmp_path):
    path = write_config(tmp_path)
    assert main(["compare", str(path), "--modes", "wagma,flying"]) == EXIT_CONFIG


def test_config_for_mode_fields():
    cfg = RunConfig.from_dict(dict(BASE_CONFIG))
    lcl = config_for_mode(cfg, "local_sgd")
    assert lcl.tau == 1 and not lcl.alpha and not lcl.beta
    wag = config_for_mode(cfg, "wagma")
    assert wag.alpha and not wag.beta and wag.tau == cfg.tau
    blocking = config_for_mode(cfg.with_overrides(alpha=False, beta=True), "wagma")
    assert blocking.beta and not blocking.alpha


# ---------------------------------------------------------------------------
# sweep command
# ---------------------------------------------------------------------------

def test_cli_sweep_runs_all_values(tmp_path):
    path = write_config(tmp_path)
    assert main(["sweep", str(path), "--vary", "S=1,2", "--out", str(tmp_path / "sw")]) == EXIT_OK
    assert (tmp_path / "sw" / "S=1" / "metrics.csv").exists()
    assert (tmp_path / "sw" / "S=2" / "metrics.csv").exists()


def test_sweep_dotted_override(tmp_path):
    cfg = load_config(write_config(tmp_path))
    out = apply_override(cfg, "delay.base_compute_ms", 42.0)
    assert out.delay["base_compute_ms"] == 42.0
    assert cfg.delay["base_compute_ms"] == 5.0  # original untouched


def test_cli_sweep_bad_vary(tmp_path):
    path = write_config(tmp_path)
    assert main(["sweep", str(path), "--vary", "nonsense"]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# verify command
# ---------------------------------------------------------------------------

def test_cli_verify_passes(capsys):
    assert main(["verify"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "mask-rule-divergence" in out
    assert "FAIL" not in out


# ---------------------------------------------------------------------------
# manifest reproducibility
# ---------------------------------------------------------------------------

def test_execute_run_manifest_matches_rerun(tmp_path):
    cfg = load_config(write_config(tmp_path))
    a = execute_run(cfg, tmp_path / "m1")
    b = execute_run(cfg, tmp_path / "m2")
    assert a.metrics_sha256 == b.metrics_sha256
    ma = json.loads(Path(a.manifest_path).read_text())
    mb = json.loads(Path(b.manifest_path).read_text())
    assert ma["metrics_sha256"] == mb["metrics_sha256"]
    assert ma["sim_time_end_ms"] == mb["sim_time_end_ms"]
