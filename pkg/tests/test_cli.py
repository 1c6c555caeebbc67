"""End-to-end command tests, run in-process against temp run directories."""

import json
import subprocess
import sys

import numpy as np
import pytest

from specdiff.cli import main
from specdiff.engine import RelaxProfile, profile_to_json, trace_to_csv
from specdiff.models import mlp_init, net_from_json


def _run(tmp_path, name, argv):
    out = tmp_path / name
    code = main(argv + ["--out", str(out)])
    return code, out


def test_train_writes_checkpoints_and_curves(tmp_path):
    code, out = _run(
        tmp_path,
        "train",
        [
            "train", "--what", "both", "--T", "10", "--epochs", "3",
            "--drafter-epochs", "3", "--batch-size", "32", "--hidden", "8", "--seed", "2",
        ],
    )
    assert code == 0
    for name in (
        "target.json", "target_loss.csv", "drafter.json", "drafter_loss.csv",
        "schedule.json", "config.json", "manifest.json",
    ):
        assert (out / name).is_file()
    lines = (out / "target_loss.csv").read_text().strip().splitlines()
    assert lines[0].startswith("epoch,") and len(lines) == 4
    net = net_from_json((out / "target.json").read_text())
    assert net.t_scale == 10 and net.out_dim == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert sorted(manifest["artifacts"]) == manifest["artifacts"]


def test_train_zero_epochs_keeps_init(tmp_path):
    code, out = _run(
        tmp_path,
        "train0",
        ["train", "--what", "target", "--T", "10", "--epochs", "0", "--hidden", "8", "--seed", "5"],
    )
    assert code == 0
    net = net_from_json((out / "target.json").read_text())
    fresh = mlp_init([5, 8, 8, 2], seed=5, t_scale=10)
    for w1, w2 in zip(net.weights + net.biases, fresh.weights + fresh.biases):
        assert np.array_equal(w1, w2)
    # nothing was trained, so there is no curve to plot
    assert not (out / "target_loss.png").exists()


def test_train_drafter_requires_net_teacher(tmp_path, capsys):
    code, _ = _run(tmp_path, "traind", ["train", "--what", "drafter", "--T", "10"])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_selfspec_trace_and_summary(tmp_path):
    code, out = _run(
        tmp_path,
        "selfspec",
        ["selfspec", "--T", "10", "--L", "2", "--num-runs", "3", "--seed", "1"],
    )
    assert code == 0
    rows = (out / "trace.csv").read_text().strip().splitlines()
    assert rows[0] == "step,eps_delta,accept_prob"
    assert 1 <= len(rows) - 1 <= 3 * 9
    summary = json.loads((out / "summary.json").read_text())
    for key in ("runs", "rows", "trend_spearman_rho", "mean_accept_prob"):
        assert key in summary
    assert summary["rows"] == len(rows) - 1


def test_selfspec_rejects_epsilon(tmp_path, capsys):
    code, _ = _run(tmp_path, "ss_eps", ["selfspec", "--T", "10", "--epsilon", "1.0"])
    assert code == 2
    assert "epsilon" in capsys.readouterr().err


def test_fit_relax_constant_trace_gives_identity(tmp_path):
    trace_path = tmp_path / "trace.csv"
    trace_path.write_text(trace_to_csv([(k, 0.7, 1.0) for k in range(1, 6)]))
    code, out = _run(
        tmp_path, "fitrelax", ["fit-relax", "--trace", str(trace_path), "--T", "5"]
    )
    assert code == 0
    doc = json.loads((out / "profile.json").read_text())
    assert doc["lambda"] == [1.0] * 5
    assert doc["floor"] == 0.05


def test_fit_relax_from_real_trace_is_valid(tmp_path):
    code, ss = _run(
        tmp_path, "ss", ["selfspec", "--T", "12", "--L", "3", "--num-runs", "4", "--seed", "3"]
    )
    assert code == 0
    code, out = _run(
        tmp_path, "fr", ["fit-relax", "--trace", str(ss / "trace.csv"), "--T", "12"]
    )
    assert code == 0
    lam = np.asarray(json.loads((out / "profile.json").read_text())["lambda"])
    assert lam.shape == (12,)
    assert np.all(lam <= 1.0) and np.all(lam >= 0.05 - 1e-12)
    assert np.all(np.diff(lam) <= 1e-12)


def test_sample_vanilla_metrics(tmp_path):
    code, out = _run(
        tmp_path,
        "vanilla",
        ["sample", "--mode", "vanilla", "--T", "10", "--num-samples", "3", "--no-plot"],
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["mode"] == "vanilla"
    assert metrics["efficiency"] == 1.0
    assert len((out / "samples.csv").read_text().strip().splitlines()) == 4
    assert (out / "last_trajectory.bin").is_file()
    assert not (out / "samples.png").exists()


def test_sample_free_oracle_hits_round_efficiency(tmp_path):
    code, out = _run(
        tmp_path,
        "free",
        [
            "sample", "--mode", "free", "--drafter", "oracle", "--T", "10", "--L", "4",
            "--num-samples", "1", "--no-plot",
        ],
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["efficiency"] == 2.5
    assert abs(metrics["modeled_speedup"] - 7.0 / 3.0) < 1e-12
    assert metrics["acceptance_rate"] == 1.0


def test_free_relax_identity_profile_matches_free(tmp_path):
    profile_path = tmp_path / "ones.json"
    profile_path.write_text(profile_to_json(RelaxProfile(lam=np.ones(10))))
    common = ["--T", "10", "--L", "3", "--num-samples", "2", "--seed", "9", "--no-plot"]
    code, free = _run(tmp_path, "plain", ["sample", "--mode", "free"] + common)
    assert code == 0
    code, relaxed = _run(
        tmp_path,
        "relaxed",
        ["sample", "--mode", "free-relax", "--relax", str(profile_path)] + common,
    )
    assert code == 0
    assert (free / "samples.csv").read_bytes() == (relaxed / "samples.csv").read_bytes()
    m1 = json.loads((free / "metrics.json").read_text())
    m2 = json.loads((relaxed / "metrics.json").read_text())
    m1.pop("mode"), m2.pop("mode")
    assert m1 == m2


def test_free_relax_without_profile_fails(tmp_path, capsys):
    code, _ = _run(tmp_path, "norelax", ["sample", "--mode", "free-relax", "--T", "10"])
    assert code == 2
    assert "relax" in capsys.readouterr().err


def test_sample_is_deterministic(tmp_path):
    argv = ["sample", "--mode", "free", "--T", "10", "--L", "2", "--num-samples", "3", "--no-plot"]
    _, a = _run(tmp_path, "det_a", argv)
    _, b = _run(tmp_path, "det_b", argv)
    assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()


def test_default_run_renders_figures(tmp_path):
    code, out = _run(
        tmp_path, "figs", ["sample", "--mode", "vanilla", "--T", "10", "--num-samples", "2"]
    )
    assert code == 0
    assert (out / "samples.png").stat().st_size > 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert "samples.png" in manifest["artifacts"]


def test_sweep_over_L(tmp_path):
    code, out = _run(
        tmp_path,
        "sweepL",
        ["sweep", "--axis", "L", "--values", "1,2", "--T", "10", "--num-runs", "2", "--no-plot"],
    )
    assert code == 0
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert lines[0] == "L,efficiency,speedup,acceptance"
    assert len(lines) == 3
    first = [float(v) for v in lines[1].split(",")]
    assert first[0] == 1.0
    assert 0.0 < first[1] <= 1.0 + 1e-9


def test_sweep_single_relax_point(tmp_path):
    code, out = _run(
        tmp_path,
        "sweepR",
        [
            "sweep", "--axis", "relax", "--values", "0.5", "--T", "10", "--L", "2",
            "--num-runs", "2", "--no-plot",
        ],
    )
    assert code == 0
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("0.5,")


def test_sweep_bad_values(tmp_path, capsys):
    code, _ = _run(tmp_path, "sweepbad", ["sweep", "--axis", "L", "--values", "1,x", "--T", "10"])
    assert code == 2
    assert "sweep values" in capsys.readouterr().err


def test_certify_subset(tmp_path, capsys):
    code, out = _run(tmp_path, "cert", ["certify", "--checks", "oracle-identity"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "[PASS] oracle-identity" in stdout
    doc = json.loads((out / "certify_report.json").read_text())
    assert doc["all_passed"] is True
    assert doc["checks"][0]["name"] == "oracle-identity"
    assert doc["checks"][0]["passed"] is True


def test_certify_unknown_check(tmp_path, capsys):
    code, _ = _run(tmp_path, "certbad", ["certify", "--checks", "nope"])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_bad_config_path(tmp_path, capsys):
    code = main(["sample", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "no such file" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    code = main(["sample", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"T": 10, "seed": 3, "L": 2, "num_samples": 1}))
    code, out = _run(
        tmp_path, "cfgrun", ["sample", "--config", str(cfg), "--L", "3", "--no-plot"]
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["T"] == 10
    assert manifest["config"]["seed"] == 3
    assert manifest["config"]["L"] == 3  # flag wins over the file


def test_invalid_drafter_path(tmp_path, capsys):
    code, _ = _run(
        tmp_path,
        "baddrafter",
        ["sample", "--mode", "free", "--drafter", str(tmp_path / "no.json"), "--T", "10"],
    )
    assert code == 2
    assert "no such file" in capsys.readouterr().err


def test_out_root_env_is_honored(tmp_path, monkeypatch):
    root = tmp_path / "envroot"
    monkeypatch.setenv("SPECDIFF_OUT", str(root))
    code = main(
        ["sample", "--mode", "vanilla", "--T", "10", "--num-samples", "1", "--seed", "4", "--no-plot"]
    )
    assert code == 0
    assert (root / "sample-4" / "manifest.json").is_file()


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "specdiff", "certify", "--checks", "gradient-certification",
         "--out", "/tmp/specdiff-cli-entry"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "[PASS] gradient-certification" in proc.stdout
