import json

import numpy as np
import pytest

from mesocast import data as D
from mesocast.cli import main
from mesocast.config import RunConfig, load_config
from mesocast.models import build_model, save_model


TINY_INI = """
[data]
seed = 7
train_days = 1
easy_days = 1
hard_windows = 1

[model]
kind = sa-lstm
s = 4
hidden = 4
attn_width = 2
horizon = 2

[training]
epochs_per_stage = 2
validate_every = 1
train_stride = 200
val_stride = 100
grad_chunk = 64
lap_depth = 0
seed = 7

[evaluation]
horizons = 2
iters = 50
warmup = 5
budget_ms = 50.0
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(TINY_INI)
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestConfig:
    def test_defaults_without_file(self):
        cfg = RunConfig()
        assert cfg.model.kind == "sa-lstm"
        assert cfg.training.lr == 0.01
        assert cfg.training.plateau_patience == 3

    def test_load_and_types(self, tiny_config):
        cfg = load_config(tiny_config)
        assert cfg.data.train_days == 1
        assert cfg.model.hidden == 4
        assert cfg.training.lap_depth == 0
        assert isinstance(cfg.training.full_batch, bool)

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[training]\nlearning_rate = 0.1\n")
        with pytest.raises(ValueError, match="unknown key"):
            load_config(bad)

    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[optimizer]\nlr = 0.1\n")
        with pytest.raises(ValueError, match="unknown config section"):
            load_config(bad)


class TestGenerate:
    def test_one_day_corpus(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "out"
        assert run_cli("generate", "--config", tiny_config, "--out", out) == 0
        train = D.read_csv(out / "train.csv")
        assert len(train) == 1440
        assert len(D.read_csv(out / "easy.csv")) == 1440
        assert len(D.read_csv(out / "hard0.csv")) == 440
        manifest = json.loads((out / "generate_manifest.json").read_text())
        assert manifest["seed"] == 7
        assert len(manifest["config_sha256"]) == 64

    def test_rerun_is_byte_identical(self, tiny_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_cli("generate", "--config", tiny_config, "--out", out1)
        run_cli("generate", "--config", tiny_config, "--out", out2)
        for name in ("train.csv", "easy.csv", "hard0.csv", "generate_manifest.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_days_flag_overrides(self, tiny_config, tmp_path):
        out = tmp_path / "out"
        # --days only changes the training split; 1 day here keeps it fast
        run_cli("generate", "--config", tiny_config, "--out", out, "--days", 1)
        assert len(D.read_csv(out / "train.csv")) == 1440

    def test_invalid_diagram_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[data]\njam_density = -5\n")
        assert run_cli("generate", "--config", bad, "--out", tmp_path) == 2
        assert "jam_density" in capsys.readouterr().err

    def test_env_var_output_dir(self, tiny_config, tmp_path, monkeypatch):
        target = tmp_path / "envout"
        monkeypatch.setenv("MESOCAST_OUT", str(target))
        run_cli("generate", "--config", tiny_config)
        assert (target / "train.csv").exists()


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    """Generate a 1-day corpus and train the tiny sa-lstm once for the
    downstream CLI tests."""
    out = tmp_path_factory.mktemp("cliout")
    cfg_path = out / "run.ini"
    cfg_path.write_text(TINY_INI)
    assert main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out, cfg_path


class TestTrain:
    def test_outputs_exist(self, trained_dir, capsys):
        out, _ = trained_dir
        assert (out / "model.bin").exists()
        assert (out / "run.ckpt").exists()
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "epoch,lr,train_loss,easy_mse,hard_mse"
        assert len(metrics) == 1 + 2  # two epochs

    def test_zero_epochs_writes_initialization(self, tiny_config, tmp_path):
        out = tmp_path / "out"
        run_cli("generate", "--config", tiny_config, "--out", out)
        code = run_cli("train", "--config", tiny_config, "--out", out, "--epochs", 0)
        assert code == 0
        assert (out / "model.bin").exists()
        assert (out / "run.ckpt").exists()

    def test_missing_corpus_exits_2(self, tiny_config, tmp_path, capsys):
        assert run_cli("train", "--config", tiny_config, "--out", tmp_path / "nope") == 2


class TestEval:
    def test_default_checkpoint(self, trained_dir, capsys):
        out, cfg = trained_dir
        assert run_cli("eval", "--config", cfg, "--out", out) == 0
        text = capsys.readouterr().out
        assert "easy" in text and "hard" in text
        lines = (out / "report.csv").read_text().splitlines()
        assert lines[0] == "model,kind,horizon,easy_mse_x1e3,hard_mse_x1e3"
        assert len(lines) == 1 + 2  # horizons 1 and 2 via the recursive wrapper

    def test_comparison_mode_three_checkpoints(self, trained_dir, capsys):
        out, cfg = trained_dir
        code = run_cli(
            "eval", "--config", cfg, "--out", out,
            "--checkpoint", out / "model.bin",
            "--checkpoint", out / "model.bin",
            "--checkpoint", out / "model.bin",
        )
        assert code == 0
        lines = (out / "report.csv").read_text().splitlines()
        assert len(lines) == 1 + 3 * 2  # three models x two horizons

    def test_missing_checkpoint_exits_2(self, trained_dir):
        out, cfg = trained_dir
        assert run_cli("eval", "--config", cfg, "--out", out,
                       "--checkpoint", out / "missing.bin") == 2


class TestForecast:
    def _fixed_point_model(self, path, s=4):
        model = build_model("sa-lstm", s=s, hidden=4, attn_width=2, seed=0)
        for t in model.blocks().values():
            t.data[:] = 0.0
        model.head_b.data[:] = 70.0 / D.V_REF_MPH
        save_model(model, path)

    def test_constant_input_three_columns_of_70(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "out"
        out.mkdir()
        model_path = out / "model.bin"
        self._fixed_point_model(model_path)
        series = D.Series(minutes=np.arange(10),
                          speeds=np.full((10, D.NUM_SEGMENTS), 70.0))
        D.write_csv(series, out / "input.csv")
        code = run_cli("forecast", "--config", tiny_config, "--out", out,
                       "--input", out / "input.csv", "--checkpoint", model_path)
        assert code == 0
        fc = D.read_csv(out / "forecast.csv")  # format closure: data module reads it
        assert len(fc) == 2  # horizons from config
        np.testing.assert_allclose(fc.speeds, 70.0, atol=1e-9)
        assert list(fc.minutes) == [10, 11]
        assert "ms" in capsys.readouterr().out

    def test_too_short_input_exits_2(self, tiny_config, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        model_path = out / "model.bin"
        self._fixed_point_model(model_path)
        series = D.Series(minutes=np.arange(3),
                          speeds=np.full((3, D.NUM_SEGMENTS), 70.0))
        D.write_csv(series, out / "short.csv")
        assert run_cli("forecast", "--config", tiny_config, "--out", out,
                       "--input", out / "short.csv", "--checkpoint", model_path) == 2


class TestBench:
    def test_quick_mode_passes_budget(self, trained_dir, capsys):
        out, cfg = trained_dir
        code = run_cli("bench", "--config", cfg, "--out", out,
                       "--iters", 100, "--warmup", 10)
        assert code == 0
        assert "PASS" in capsys.readouterr().out

    def test_budget_exceeded_nonzero_exit(self, trained_dir, capsys):
        out, cfg = trained_dir
        code = run_cli("bench", "--config", cfg, "--out", out,
                       "--iters", 50, "--warmup", 5, "--budget", 1e-9)
        assert code == 1
        assert "FAIL" in capsys.readouterr().out
