"""Config-file semantics and CLI behavior: canonical serialization and
hashing, strict key validation, exit codes, the JSON summary line, and an
end-to-end smoke run at toy scale."""

import json

import numpy as np
import pytest

from vigdc.cli import main
from vigdc.config import ConfigError, PRESETS, default_config, load_config


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestConfig:
    def test_preset_geometry(self):
        full = default_config("full")
        assert (full.imaging.image_size, full.imaging.crop_size, full.imaging.tile) == (1000, 700, 352)
        assert full.model.width_multiplier == 1.0
        half = default_config("half")
        assert (half.imaging.image_size, half.imaging.crop_size, half.imaging.tile) == (500, 350, 176)

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError):
            default_config("quarter")

    def test_ini_round_trip(self, tmp_path):
        cfg = default_config("half", seed=11)
        cfg.train.max_epochs = 7
        cfg.cam.method = "score-cam"
        path = tmp_path / "run.ini"
        cfg.save(path)
        loaded = load_config(path)
        assert loaded.to_ini() == cfg.to_ini()
        assert loaded.seed == 11
        assert loaded.train.max_epochs == 7
        assert loaded.cam.method == "score-cam"

    def test_hash_stable_and_sensitive(self):
        a = default_config("half", seed=0)
        b = default_config("half", seed=0)
        assert a.config_hash() == b.config_hash()
        b.train.batch_size = 12
        assert a.config_hash() != b.config_hash()
        assert len(a.config_hash()) == 12

    def test_seed_changes_hash_and_augment_seed(self):
        a = default_config("half", seed=0)
        b = default_config("half", seed=1)
        assert a.config_hash() != b.config_hash()
        assert b.augment.seed == 1

    def test_cli_overrides_beat_file(self, tmp_path):
        cfg = default_config("half", seed=3)
        path = tmp_path / "run.ini"
        cfg.save(path)
        loaded = load_config(path, seed=9)
        assert loaded.seed == 9
        assert loaded.augment.seed == 9

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[run]\nseed = 0\n[telemetry]\nurl = x\n")
        with pytest.raises(ConfigError, match="telemetry"):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[run]\nseed = 0\n[train]\nmomentum = 0.9\n")
        with pytest.raises(ConfigError, match="momentum"):
            load_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nbatch_size = six\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_validate_rejects_bad_fields(self):
        cfg = default_config("half")
        cfg.imaging.tile = 170
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg = default_config("half")
        cfg.model.arch = "resnet50"
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg = default_config("half")
        cfg.train.test_frac = 1.5
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_tuple_fields_round_trip(self, tmp_path):
        cfg = default_config("half")
        cfg.augment.brightness_range = (0.6, 1.4)
        path = tmp_path / "run.ini"
        cfg.save(path)
        assert load_config(path).augment.brightness_range == (0.6, 1.4)

    def test_presets_cover_both_scales(self):
        assert set(PRESETS) == {"full", "half"}


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _toy_config(tmp_path, seed=0):
    """Toy-scale geometry so a full pipeline run stays in seconds."""
    cfg = default_config("half", seed=seed)
    cfg.synth.n = 12
    cfg.imaging.image_size = 200
    cfg.imaging.crop_size = 128
    cfg.imaging.tile = 64
    cfg.model.width_multiplier = 0.03125
    cfg.model.final_floor = 8
    cfg.train.max_epochs = 2
    cfg.train.folds = 2
    path = tmp_path / "toy.ini"
    cfg.save(path)
    return path


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    lines = [l for l in capsys.readouterr().out.strip().splitlines() if l.startswith("{")]
    summary = json.loads(lines[-1]) if lines else None
    return code, summary


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """synth -> preprocess -> train once; shared by the downstream commands."""
    root = tmp_path_factory.mktemp("cli")
    config = _toy_config(root)
    run_dir = root / "run"
    base = ["--config", config, "--run-dir", run_dir, "--quiet"]
    for command in ("synth", "preprocess", "train"):
        assert main([str(a) for a in base] + [command]) == 0
    return config, run_dir


class TestSmokePipeline:
    def test_synth_summary(self, tmp_path, capsys):
        config = _toy_config(tmp_path)
        code, summary = _run(["--config", config, "--run-dir", tmp_path / "r", "synth"], capsys)
        assert code == 0
        assert summary["status"] == "ok"
        assert summary["n"] == 12 and summary["n_damaged"] == 6
        assert "config_hash" in summary and "seed" in summary

    def test_preprocess_yields_four_tiles_per_image(self, pipeline_run, capsys):
        config, run_dir = pipeline_run
        code, summary = _run(["--config", config, "--run-dir", run_dir, "preprocess"], capsys)
        assert code == 0
        assert summary["tiles"] == 48

    def test_train_artifacts(self, pipeline_run):
        _, run_dir = pipeline_run
        assert (run_dir / "train" / "weights.vdcw").exists()
        assert (run_dir / "train" / "split.json").exists()
        history = json.loads((run_dir / "train" / "history.json").read_text())
        assert history["stopped_epoch"] <= 2
        assert history["config_hash"]

    def test_evaluate_uses_recorded_test_split(self, pipeline_run, capsys):
        config, run_dir = pipeline_run
        code, summary = _run(["--config", config, "--run-dir", run_dir, "evaluate"], capsys)
        assert code == 0
        split = json.loads((run_dir / "train" / "split.json").read_text())
        assert summary["n"] == len(split["test"])
        metrics = json.loads((run_dir / "evaluate" / "metrics.json").read_text())
        assert set(metrics["scores"]) == set(split["test"])

    def test_cam_renders_damaged_overlays(self, pipeline_run, capsys):
        config, run_dir = pipeline_run
        code, summary = _run(["--config", config, "--run-dir", run_dir,
                              "cam", "--limit", 2], capsys)
        assert code == 0
        out = run_dir / "cam" / "grad-cam"
        assert len(list(out.glob("*.png"))) == 2
        energy = json.loads((out / "energy.json").read_text())
        assert energy["method"] == "grad-cam"
        assert 0.0 <= min(energy["energy"].values()) <= max(energy["energy"].values()) <= 1.0

    def test_benchmark_cam_reports_ratio(self, pipeline_run, capsys):
        config, run_dir = pipeline_run
        code, summary = _run(["--config", config, "--run-dir", run_dir, "benchmark-cam"], capsys)
        assert code == 0
        assert summary["ratio"] > 0

    def test_augment_preview_contact_sheet(self, pipeline_run, capsys):
        from vigdc.imaging import load_image
        config, run_dir = pipeline_run
        code, summary = _run(["--config", config, "--run-dir", run_dir,
                              "augment-preview", "--id", "synth00000_q0", "--grid", 2], capsys)
        assert code == 0
        sheet = load_image(summary["out"])
        assert sheet.shape == (128, 128, 3)  # 2x2 grid of 64 px tiles
        assert summary["variants"] == 4

    def test_describe_model(self, pipeline_run, capsys):
        config, run_dir = pipeline_run
        code, summary = _run(["--config", config, "--run-dir", run_dir, "describe-model"], capsys)
        assert code == 0
        assert summary["conv_layers"] == 20
        assert summary["maxpool_layers"] == 4

    def test_crossval_runs_and_resumes_identically(self, pipeline_run, capsys):
        config, run_dir = pipeline_run
        argv = ["--config", config, "--run-dir", run_dir, "--quiet", "crossval"]
        code, first = _run(argv, capsys)
        assert code == 0
        assert first["k"] == 2
        report_a = (run_dir / "crossval" / "report.json").read_text()
        # folds already have metrics -> rerun must skip training and agree
        code, second = _run(argv, capsys)
        assert code == 0
        assert second == first
        assert (run_dir / "crossval" / "report.json").read_text() == report_a


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        code, summary = _run(["frobnicate"], capsys)
        assert code == 1
        assert summary["status"] == "error"

    def test_bad_flag_is_usage_error(self, capsys):
        code, _ = _run(["describe-model", "--bogus"], capsys)
        assert code == 1

    def test_invalid_config_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nmomentum = 0.9\n")
        code, summary = _run(["--config", bad, "--run-dir", tmp_path / "r",
                              "describe-model"], capsys)
        assert code == 1
        assert "momentum" in summary["error"]

    def test_missing_manifest_is_data_error(self, tmp_path, capsys):
        code, summary = _run(["--run-dir", tmp_path / "r", "train"], capsys)
        assert code == 2
        assert "manifest" in summary["error"]

    def test_numeric_failure_maps_to_three(self, tmp_path, capsys, monkeypatch):
        from vigdc import cli
        from vigdc.training import TrainingDiverged

        def boom(args, cfg, run_dir):
            raise TrainingDiverged("loss became non-finite")
        monkeypatch.setitem(cli._COMMANDS, "describe-model", boom)
        code, summary = _run(["--run-dir", tmp_path / "r", "describe-model"], capsys)
        assert code == 3
        assert "non-finite" in summary["error"]

    def test_mismatched_run_dir_snapshot_refused(self, tmp_path, capsys):
        run_dir = tmp_path / "r"
        assert _run(["--seed", 0, "--run-dir", run_dir, "describe-model"], capsys)[0] == 0
        code, summary = _run(["--seed", 1, "--run-dir", run_dir, "describe-model"], capsys)
        assert code == 1
        assert "different" in summary["error"]


class TestRunDirDefaults:
    def test_env_root_and_hash_naming(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("VIGDC_RUN_ROOT", str(tmp_path / "root"))
        code, summary = _run(["--seed", 4, "describe-model"], capsys)
        assert code == 0
        cfg = default_config("half", seed=4)
        expected = tmp_path / "root" / f"run-{cfg.config_hash()}-seed4"
        assert expected.is_dir()
        assert (expected / "config.ini").read_text() == cfg.to_ini()
