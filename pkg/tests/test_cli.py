import json
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml

from mmdiff.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from mmdiff.config import DEFAULTS, KEY_DOCS, RunConfig
from mmdiff.media import read_dataset, read_wav, sample_dirs
from mmdiff.unet import ConfigError

MICRO_CONFIG = {
    "model.base_channels": 8,
    "model.channel_mults": [1, 2],
    "model.blocks_per_scale": 1,
    "model.video_attn_scales": [2],
    "model.cross_attn_scales": [1, 2],
    "model.cross_attn_window": [2, 4],
    "model.audio_dilation_depth": 3,
    "model.video_shape": [4, 3, 8, 8],
    "model.audio_shape": [1, 64],
    "model.time_embed_dim": 16,
    "model.head_dim": 8,
    "model.norm_groups": 4,
    "train.dropout": 0.0,
    "train.batch": 2,
    "train.steps": 3,
    "train.checkpoint_every": 2,
    "schedule.T": 30,
    "data.n": 4,
    "data.tone_freq": [20.0, 40.0],
    "data.center_row": [2.5, 5.5],
    "data.center_col": [2.5, 5.5],
    "sample.n": 2,
    "sample.stride": 5,
    "guidance.stride": 5,
}


@pytest.fixture
def micro_config(tmp_path):
    path = tmp_path / "micro.yaml"
    path.write_text(yaml.safe_dump(MICRO_CONFIG))
    return path


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def trained(tmp_path, micro_config):
    assert run("make-data", "--config", micro_config, "--seed", 1, "--out", tmp_path / "data") == EXIT_OK
    assert run("train", "--config", micro_config, "--data", tmp_path / "data", "--out", tmp_path / "run") == EXIT_OK
    return tmp_path / "run" / "checkpoint.npz"


# -- config --------------------------------------------------------------------

def test_every_key_is_documented():
    assert set(DEFAULTS) == set(KEY_DOCS)
    assert all(KEY_DOCS[k] for k in KEY_DOCS)


def test_defaults_validate_and_hash_is_canonical():
    a, b = RunConfig.from_dict({}), RunConfig.from_dict({"seed": 0})
    assert a.config_hash() == b.config_hash()
    assert RunConfig.from_dict({"seed": 1}).config_hash() != a.config_hash()
    assert a.model().dropout == a["train.dropout"]


@pytest.mark.parametrize("raw", [{"mystery": 1}, {"train.lr": "fast"}, {"train.batch": 2.5},
                                 {"data.blob_freq": [0.5, 5.0]}, {"model.video_shape": [8, 3, 15, 16]},
                                 {"guidance.method": "magic"}, {"sample.use_ema": "yes"}, {"train": {"lr": 1}},
                                 {"eval.extractor": "i3d"}, {"data.fps": 7.3}])
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_config_file_and_flags(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\ntrain.lr: 0.001\n")
    cfg = RunConfig.load(path, {"seed": 9, "train.steps": None})
    assert cfg["seed"] == 9 and cfg["train.lr"] == 0.001 and cfg["train.steps"] == DEFAULTS["train.steps"]
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        RunConfig.load(path)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nope.yaml")


def test_dump_round_trips(tmp_path):
    cfg = RunConfig.from_dict(MICRO_CONFIG)
    path = tmp_path / "dump.yaml"
    path.write_text(cfg.dump())
    assert RunConfig.load(path).config_hash() == cfg.config_hash()


# -- commands --------------------------------------------------------------------

def test_make_data_writes_complete_samples(tmp_path, micro_config):
    out = tmp_path / "data"
    assert run("make-data", "--config", micro_config, "--seed", 0, "--out", out) == EXIT_OK
    dirs = sample_dirs(out)
    assert len(dirs) == 4
    for d in dirs:
        assert sorted(p.name for p in d.iterdir()) == ["audio.wav", "frame_000.png", "frame_001.png",
                                                       "frame_002.png", "frame_003.png", "manifest.json"]
        man = json.loads((d / "manifest.json").read_text())
        assert man["config_hash"] == RunConfig.load(micro_config, {"seed": 0}).config_hash()
        assert set(man["params"]) >= {"blob_freq", "tone_freq", "phase", "blob_center", "blob_color"}
        audio, sr = read_wav(d / "audio.wav")
        assert audio.shape == (1, 64) and sr == 128
    assert json.loads((out / "run.json").read_text())["n"] == 4


def test_make_data_is_byte_identical(tmp_path, micro_config):
    for name in ("a", "b"):
        assert run("make-data", "--config", micro_config, "--seed", 5, "--out", tmp_path / name) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_make_data_invalid_nyquist_leaves_nothing(tmp_path, micro_config, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(micro_config.read_text() + "data.tone_freq: [20.0, 80.0]\n")
    assert run("make-data", "--config", cfg, "--out", tmp_path / "out") == EXIT_CONFIG
    assert not (tmp_path / "out").exists()
    assert list(tmp_path.glob(".out.*")) == []
    assert "Nyquist" in capsys.readouterr().err


def test_make_data_refuses_non_empty_output(tmp_path, micro_config):
    out = tmp_path / "data"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert run("make-data", "--config", micro_config, "--out", out) == EXIT_RUNTIME
    assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]


def test_train_log_resume_and_checkpoint(tmp_path, micro_config, trained):
    log = (tmp_path / "run" / "train.log").read_text().splitlines()
    assert len(log) == 3
    assert run("train", "--config", micro_config, "--data", tmp_path / "data", "--checkpoint", trained,
               "--steps", 2, "--out", tmp_path / "run2") == EXIT_OK
    log2 = (tmp_path / "run2" / "train.log").read_text().splitlines()
    assert [ln.split()[0] for ln in log2] == ["step=4", "step=5"]


def test_sample_is_deterministic_with_duration(tmp_path, micro_config, trained):
    for name in ("s1", "s2"):
        assert run("sample", "--config", micro_config, "--checkpoint", trained, "--seed", 3,
                   "--out", tmp_path / name) == EXIT_OK
    a, b = read_dataset(tmp_path / "s1"), read_dataset(tmp_path / "s2")
    assert len(a) == 2
    for x, y in zip(a, b):
        assert np.array_equal(x.video, y.video) and np.array_equal(x.audio, y.audio)
        assert x.audio.shape[1] / x.sr == pytest.approx(x.frames / x.fps)
    assert run("sample", "--config", micro_config, "--checkpoint", trained, "--seed", 4,
               "--out", tmp_path / "s3") == EXIT_OK
    assert not np.array_equal(read_dataset(tmp_path / "s3")[0].audio, a[0].audio)


def test_sample_cond_lambda_zero_equals_replacement(tmp_path, micro_config, trained):
    common = ["--config", micro_config, "--checkpoint", trained, "--condition", tmp_path / "data", "--seed", 2,
              "--n", 2]
    assert run("sample-cond", *common, "--method", "replacement", "--out", tmp_path / "rep") == EXIT_OK
    assert run("sample-cond", *common, "--method", "gradient", "--lambda", 0, "--out", tmp_path / "g0") == EXIT_OK
    for d in ("sample_0000", "sample_0001"):
        assert (tmp_path / "rep" / d / "audio.wav").read_bytes() == (tmp_path / "g0" / d / "audio.wav").read_bytes()


def test_sample_cond_missing_condition(tmp_path, micro_config, trained, capsys):
    code = run("sample-cond", "--config", micro_config, "--checkpoint", trained, "--condition",
               tmp_path / "nowhere", "--out", tmp_path / "x")
    assert code == EXIT_RUNTIME
    assert "does not exist" in capsys.readouterr().err


def test_sample_with_mismatched_model_config_fails(tmp_path, trained):
    assert run("sample", "--checkpoint", trained, "--out", tmp_path / "x") == EXIT_RUNTIME


def test_eval_reports(tmp_path, micro_config):
    run("make-data", "--config", micro_config, "--seed", 0, "--n", 12, "--out", tmp_path / "a")
    assert run("eval", "--config", micro_config, "--gen", tmp_path / "a", "--ref", tmp_path / "a",
               "--out", tmp_path / "rep") == EXIT_OK
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert rep["fd_raw"] == pytest.approx(0.0, abs=1e-8)
    assert {"extractor_id", "n_gen", "n_ref", "d", "fd_raw", "fd_scaled", "config_hash"} <= set(rep)
    text = (tmp_path / "rep" / "report.txt").read_text()
    assert "fd_scaled = " in text


def test_eval_refuses_mixed_shapes(tmp_path, micro_config):
    run("make-data", "--config", micro_config, "--out", tmp_path / "a")
    run("make-data", "--n", 2, "--out", tmp_path / "b")
    assert run("eval", "--gen", tmp_path / "a", "--ref", tmp_path / "b", "--out", tmp_path / "r") == EXIT_RUNTIME


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("unknown.key: 1\n")
    assert run("make-data", "--config", cfg, "--out", tmp_path / "x") == EXIT_CONFIG


def test_thread_env_var(tmp_path, micro_config, monkeypatch):
    monkeypatch.setenv("MMDIFF_NUM_THREADS", "zero")
    assert run("make-data", "--config", micro_config, "--out", tmp_path / "x") == EXIT_CONFIG
    monkeypatch.setenv("MMDIFF_NUM_THREADS", "1")
    assert run("make-data", "--config", micro_config, "--out", tmp_path / "y") == EXIT_OK


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mmdiff.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "make-data" in res.stdout
    res = subprocess.run([sys.executable, "-m", "mmdiff.cli", "train", "--bogus"], capture_output=True, text=True)
    assert res.returncode == 2


def test_desk_smoke_train_and_sample(tmp_path):
    assert run("make-data", "--n", 8, "--out", tmp_path / "data") == EXIT_OK
    t0 = time.perf_counter()
    assert run("train", "--data", tmp_path / "data", "--steps", 10, "--out", tmp_path / "run") == EXIT_OK
    assert time.perf_counter() - t0 < 60
    t0 = time.perf_counter()
    assert run("sample", "--checkpoint", tmp_path / "run" / "checkpoint.npz", "--n", 2, "--stride", 10,
               "--out", tmp_path / "samples") == EXIT_OK
    assert time.perf_counter() - t0 < 120
    pairs = read_dataset(tmp_path / "samples")
    assert len(pairs) == 2 and pairs[0].video.shape == (8, 3, 16, 16)
