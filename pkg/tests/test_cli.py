"""Command-line tests: precedence, error reporting, end-to-end tiny runs."""

from __future__ import annotations

import numpy as np
import pytest

from fep_lidar.cli import ENV_SEED, _build_parser, _resolve, main


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(ENV_SEED, raising=False)


def resolve(argv, config_text=None, tmp_path=None):
    if config_text is not None:
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(config_text)
        argv = argv + ["--config", str(cfg_file)]
    return _resolve(_build_parser().parse_args(argv))


class TestPrecedence:
    def test_builtin_default(self):
        cfg = resolve(["collect"])
        assert cfg["seed"] == 0
        assert cfg["n"] == 13000

    def test_env_beats_default(self, monkeypatch):
        monkeypatch.setenv(ENV_SEED, "17")
        assert resolve(["collect"])["seed"] == 17

    def test_file_beats_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(ENV_SEED, "17")
        cfg = resolve(["collect"], "seed = 23\n", tmp_path)
        assert cfg["seed"] == 23

    def test_flag_beats_file_and_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(ENV_SEED, "17")
        cfg = resolve(["collect", "--seed", "31"], "seed = 23\n", tmp_path)
        assert cfg["seed"] == 31

    def test_file_sets_dotted_keys(self, tmp_path):
        text = "fep.alpha = 0.25\npf.n_particles = 7\nsensor.beam_count = 6\n"
        cfg = resolve(["bench"], text, tmp_path)
        assert cfg["fep.alpha"] == 0.25
        assert cfg.pf_config().n_particles == 7
        assert cfg.sensor().beam_count == 6

    def test_flag_beats_file_for_dotted_key(self, tmp_path):
        cfg = resolve(["bench", "--alpha", "0.5"], "fep.alpha = 0.25\n", tmp_path)
        assert cfg["fep.alpha"] == 0.5

    def test_comments_and_blanks_ignored(self, tmp_path):
        cfg = resolve(["collect"], "# header\n\nseed = 5  # trailing\n", tmp_path)
        assert cfg["seed"] == 5

    def test_bool_values_parse(self, tmp_path):
        cfg = resolve(["navigate"], "fep.reset_action = false\n", tmp_path)
        assert cfg["fep.reset_action"] is False

    def test_out_default_depends_on_command(self):
        assert resolve(["collect"])["out"] == "dataset.ds"
        assert resolve(["train"])["out"] == "model.fep"
        assert resolve(["bench"])["out"] == "."


class TestDiagnostics:
    def test_unknown_flag(self, capsys):
        rc = main(["collect", "--frobnicate", "1"])
        assert rc == 2
        err = capsys.readouterr().err
        assert err.startswith("error: argument error:")
        assert err.count("\n") == 1

    def test_bad_flag_value(self, capsys):
        rc = main(["collect", "--n", "many"])
        assert rc == 2
        assert "argument error" in capsys.readouterr().err

    def test_missing_model_file(self, capsys, tmp_path):
        rc = main(["localize", "--model", str(tmp_path / "nope.fep")])
        assert rc == 2
        assert "missing file" in capsys.readouterr().err

    def test_model_path_required(self, capsys):
        rc = main(["localize"])
        assert rc == 2
        assert "missing file" in capsys.readouterr().err

    def test_missing_config_file(self, capsys, tmp_path):
        rc = main(["show-map", "--config", str(tmp_path / "nope.cfg")])
        assert rc == 2
        assert "missing file" in capsys.readouterr().err

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("fep.warp_factor = 9\n")
        rc = main(["show-map", "--config", str(cfg), "--out", str(tmp_path)])
        assert rc == 2
        assert "invalid config value" in capsys.readouterr().err

    def test_unparsable_config_value(self, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("fep.alpha = banana\n")
        rc = main(["show-map", "--config", str(cfg), "--out", str(tmp_path)])
        assert rc == 2
        assert "invalid config value" in capsys.readouterr().err

    def test_malformed_config_line(self, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just some words\n")
        rc = main(["show-map", "--config", str(cfg), "--out", str(tmp_path)])
        assert rc == 2
        assert "expected 'key = value'" in capsys.readouterr().err

    def test_bad_env_seed(self, capsys, monkeypatch, tmp_path):
        monkeypatch.setenv(ENV_SEED, "lots")
        rc = main(["show-map", "--out", str(tmp_path)])
        assert rc == 2
        assert ENV_SEED in capsys.readouterr().err

    def test_domain_validation_failure(self, capsys, tmp_path):
        ds = tmp_path / "d.ds"
        rc_collect = main(["collect", "--n", "5", "--beam-count", "6",
                           "--out", str(ds)])
        assert rc_collect == 0
        rc = main(["train", "--dataset", str(ds), "--epochs", "0",
                   "--out", str(tmp_path / "m.fep")])
        assert rc == 1
        assert "invalid config value" in capsys.readouterr().err

    def test_corrupt_model_file(self, capsys, tmp_path):
        bad = tmp_path / "bad.fep"
        bad.write_bytes(b"not a model at all")
        rc = main(["localize", "--model", str(bad), "--out", str(tmp_path)])
        assert rc == 1
        assert "bad input file" in capsys.readouterr().err


class TestShowMap:
    def test_prints_summary_and_snapshot(self, capsys, tmp_path):
        rc = main(["show-map", "--out", str(tmp_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "bounds: [0.0, 24.0] x [0.0, 8.0] m" in out
        assert "clearance: 0.25 m" in out
        assert "identity:" in out
        snap = (tmp_path / "show-map-config.txt").read_text()
        assert "seed = 0" in snap
        assert "fep.alpha = 0.01" in snap


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    """Tiny end-to-end pipeline: dataset then a briefly trained model."""
    root = tmp_path_factory.mktemp("cli-pipeline")
    ds = root / "tiny.ds"
    model = root / "tiny.fep"
    assert main(["collect", "--map", "", "--n", "40", "--beam-count", "6",
                 "--seed", "3", "--out", str(ds)]) == 0
    assert main(["train", "--dataset", str(ds), "--epochs", "1",
                 "--batch-size", "10", "--seed", "5", "--out", str(model)]) == 0
    cfg = root / "sensor.cfg"
    cfg.write_text("sensor.beam_count = 6\npf.n_particles = 40\n")
    return {"root": root, "dataset": ds, "model": model, "config": cfg}


class TestPipeline:
    def test_collect_writes_dataset_and_snapshot(self, artifacts):
        assert artifacts["dataset"].stat().st_size > 0
        snap = artifacts["dataset"].with_name("tiny.ds.config").read_text()
        assert "n = 40" in snap
        assert "sensor.beam_count = 6" in snap
        assert "seed = 3" in snap

    def test_collect_deterministic(self, artifacts, tmp_path):
        dup = tmp_path / "dup.ds"
        assert main(["collect", "--n", "40", "--beam-count", "6", "--seed", "3",
                     "--out", str(dup)]) == 0
        assert dup.read_bytes() == artifacts["dataset"].read_bytes()

    def test_snapshot_replays_identically(self, artifacts, tmp_path):
        replay = tmp_path / "replay.ds"
        snap = artifacts["dataset"].with_name("tiny.ds.config")
        assert main(["collect", "--config", str(snap), "--out", str(replay)]) == 0
        assert replay.read_bytes() == artifacts["dataset"].read_bytes()

    def test_train_writes_init_and_final(self, artifacts):
        model, init = artifacts["model"], artifacts["root"] / "tiny.fep.init"
        assert model.stat().st_size > 0
        assert init.stat().st_size == model.stat().st_size

    def test_zero_lr_training_is_identity(self, artifacts, tmp_path, capsys):
        out = tmp_path / "frozen.fep"
        rc = main(["train", "--dataset", str(artifacts["dataset"]), "--epochs", "2",
                   "--batch-size", "10", "--lr", "0", "--out", str(out)])
        assert rc == 0
        assert out.read_bytes() == out.with_name(out.name + ".init").read_bytes()

    def test_eval_model(self, artifacts, tmp_path, capsys):
        rc = main(["eval-model", "--model", str(artifacts["model"]),
                   "--config", str(artifacts["config"]),
                   "--n", "30", "--out", str(tmp_path)])
        assert rc == 0
        assert "heldout_mean_abs_error = " in capsys.readouterr().out
        metrics = (tmp_path / "eval-metrics.txt").read_text()
        float(metrics.split("=")[1])  # parses as a number

    def test_localize_writes_trace(self, artifacts, tmp_path, capsys):
        rc = main(["localize", "--model", str(artifacts["model"]),
                   "--config", str(artifacts["config"]),
                   "--iterations", "4", "--pose", "12,4", "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "localize_trace.csv").read_text().splitlines()
        assert lines[0].startswith("trial,iter,")
        assert len(lines) == 5
        assert "localized near (12, 4)" in capsys.readouterr().out

    def test_navigate_writes_trace(self, artifacts, tmp_path, capsys):
        rc = main(["navigate", "--model", str(artifacts["model"]),
                   "--config", str(artifacts["config"]),
                   "--start", "4,4", "--goal", "20,4", "--max-iterations", "3",
                   "--out", str(tmp_path)])
        assert rc == 0
        trace = (tmp_path / "navigate_trace.csv").read_text().splitlines()
        assert 2 <= len(trace) <= 5
        msg = capsys.readouterr().out
        assert "steps; distance" in msg

    def test_navigate_needs_both_endpoints(self, artifacts, tmp_path, capsys):
        rc = main(["navigate", "--model", str(artifacts["model"]),
                   "--config", str(artifacts["config"]),
                   "--start", "4,4", "--out", str(tmp_path)])
        assert rc == 2
        assert "both --start and --goal" in capsys.readouterr().err

    def test_beam_count_mismatch_reported(self, artifacts, tmp_path, capsys):
        rc = main(["localize", "--model", str(artifacts["model"]),
                   "--out", str(tmp_path)])  # default 622-beam sensor
        assert rc == 2
        assert "622" in capsys.readouterr().err

    def test_bench_outputs(self, artifacts, tmp_path, capsys):
        out = tmp_path / "nested" / "bench"
        rc = main(["bench", "--model", str(artifacts["model"]),
                   "--config", str(artifacts["config"]),
                   "--trials", "2", "--iterations", "3", "--out", str(out)])
        assert rc == 0
        for name in ("static_summary.csv", "static_trace_fep.csv",
                     "static_trace_pf.csv", "static.svg", "bench-config.txt"):
            assert (out / name).is_file(), name
        summary = (out / "static_summary.csv").read_text().splitlines()
        assert summary[0] == "iter,method,mean_err,std_err,n_trials"
        assert len(summary) == 1 + 3 * 2
        assert "final mean error" in capsys.readouterr().out

    def test_bench_reruns_byte_identical(self, artifacts, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["bench", "--model", str(artifacts["model"]),
                         "--config", str(artifacts["config"]),
                         "--trials", "2", "--iterations", "3", "--seed", "9",
                         "--out", str(out)]) == 0
            outs.append(out)
        for name in ("static_summary.csv", "static_trace_fep.csv", "static.svg"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_bench_pf_only_needs_no_model(self, tmp_path, artifacts):
        rc = main(["bench", "--method", "pf", "--config", str(artifacts["config"]),
                   "--trials", "2", "--iterations", "2", "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "static_trace_pf.csv").is_file()
        assert not (tmp_path / "static_trace_fep.csv").exists()

    def test_bench_navigation_kind(self, artifacts, tmp_path, capsys):
        rc = main(["bench", "--model", str(artifacts["model"]),
                   "--config", str(artifacts["config"]),
                   "--experiment", "navigation", "--trials", "2",
                   "--iterations", "3", "--out", str(tmp_path)])
        assert rc == 0
        summary = (tmp_path / "navigation_summary.csv").read_text().splitlines()
        assert summary[0].endswith(",mean_dist_goal")
        assert "success rate" in capsys.readouterr().out
