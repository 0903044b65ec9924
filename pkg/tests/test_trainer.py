import numpy as np
import pytest
import torch
from scipy import stats

from mmdiff.diffusion import DivergenceError, build_linear_schedule, sample_loop
from mmdiff.synth import SynthParams, SynthRanges, make_dataset
from mmdiff.trainer import (CheckpointError, TrainConfig, Trainer, load_checkpoint, new_trainer,
                            restore_trainer, save_checkpoint, smoothed, stack_batch)
from mmdiff.unet import ModelConfig, build_model

MICRO_BASE = SynthParams(F=4, H=8, W=8, T_a=64, fps=8.0, sr=128)
MICRO_RANGES = SynthRanges(tone_freq=(20.0, 40.0), center_row=(2.5, 5.5), center_col=(2.5, 5.5))


def micro_data(n=8, seed=0):
    return make_dataset(n, seed=seed, ranges=MICRO_RANGES, base=MICRO_BASE)


@pytest.fixture
def sched():
    return build_linear_schedule(100)


def params(model):
    return torch.cat([p.detach().flatten() for p in model.parameters()])


@pytest.mark.parametrize("kwargs", [dict(lr=-1.0), dict(ema_decay=1.0), dict(ema_decay=-0.1), dict(batch=0),
                                    dict(lr=float("inf")), dict(grad_clip=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs).validate()


def test_stack_batch_checks_shapes():
    data = micro_data(2)
    a, v = stack_batch(data)
    assert a.shape == (2, 1, 64) and v.shape == (2, 4, 3, 8, 8)
    assert v.min() >= -1 and v.max() <= 1
    with pytest.raises(ValueError):
        stack_batch([])
    with pytest.raises(ValueError):
        stack_batch([data[0], make_dataset(1)[0]])


def test_zero_ema_decay_copies_parameters(sched):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(ema_decay=0.0, batch=2, lr=1e-3))
    tr.run(micro_data(4), 1)
    assert torch.equal(params(tr.ema), params(tr.model))


def test_ema_update_formula(sched):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(ema_decay=0.9, batch=2, lr=1e-2))
    before = params(tr.model).clone()
    tr.run(micro_data(4), 1)
    after = params(tr.model)
    torch.testing.assert_close(params(tr.ema), 0.9 * before + 0.1 * after)
    assert all(not p.requires_grad for p in tr.ema.parameters())


def test_zero_lr_leaves_parameters(sched):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(lr=0.0, batch=2))
    before = params(tr.model).clone()
    res = tr.run(micro_data(4), 2)
    assert torch.equal(before, params(tr.model))
    assert all(np.isfinite(r.loss) for r in res)


def test_timesteps_are_uniform(sched):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=50, lr=0.0))
    draws = torch.cat([tr.run(micro_data(4), 1)[0].t for _ in range(40)])
    counts = torch.bincount(draws - 1, minlength=100).numpy()
    assert draws.min() >= 1 and draws.max() <= 100
    assert np.array_equal(counts, tr.t_counts.numpy())
    assert stats.chisquare(counts).pvalue > 1e-3


def test_divergence_dumps_diagnostic(sched):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=2))
    a, v = stack_batch(micro_data(2))
    a[0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError, match="t=\\[.*param_norm="):
        tr.train_step(a, v)


def test_log_has_one_line_per_step(sched, tmp_path):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=2))
    tr.run(micro_data(4), 3, log_path=tmp_path / "log")
    tr.run(micro_data(4), 2, log_path=tmp_path / "log")
    lines = (tmp_path / "log").read_text().splitlines()
    assert [ln.split()[0] for ln in lines] == [f"step={i}" for i in range(1, 6)]
    assert all("loss=" in ln and "grad_norm=" in ln and "wall=" in ln for ln in lines)


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(smoothed([2.0] * 5), [2.0] * 5)


def test_checkpoint_round_trip(sched, tmp_path):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=2, ema_decay=0.5))
    tr.run(micro_data(4), 2)
    path = tmp_path / "ck.npz"
    save_checkpoint(tr, path)
    ck = load_checkpoint(path, expected=ModelConfig.micro())
    assert ck.step == 2 and ck.manifest["config_hash"] == ModelConfig.micro().config_hash()
    for k, v in tr.model.state_dict().items():
        assert torch.equal(v, ck.params[k])
    for k, v in tr.ema.state_dict().items():
        assert torch.equal(v, ck.ema[k])
    assert torch.equal(params(ck.build(use_ema=True)), params(tr.ema))


def test_checkpoint_bytes_are_deterministic(sched, tmp_path):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=2))
    save_checkpoint(tr, tmp_path / "a.npz")
    save_checkpoint(tr, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_checkpoint_rejects_mismatch_and_corruption(sched, tmp_path):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=2))
    path = tmp_path / "ck.npz"
    save_checkpoint(tr, path)
    other = ModelConfig(**{**ModelConfig.micro().to_dict(), "base_channels": 16})
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path, expected=other)
    bad = tmp_path / "bad.npz"
    bad.write_bytes(path.read_bytes()[:200])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")


def test_checkpoint_schema_version_checked(sched, tmp_path, monkeypatch):
    import mmdiff.trainer as trainer_mod
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=2))
    monkeypatch.setattr(trainer_mod, "SCHEMA_VERSION", 99)
    save_checkpoint(tr, tmp_path / "v99.npz")
    monkeypatch.undo()
    with pytest.raises(CheckpointError, match="schema"):
        load_checkpoint(tmp_path / "v99.npz")


def test_resume_matches_uninterrupted_run(sched, tmp_path):
    data = micro_data(6)
    cfg = TrainConfig(batch=3, lr=1e-3, seed=4)
    straight = new_trainer(ModelConfig.micro(), sched, cfg)
    ref = straight.run(data, 4)

    first = new_trainer(ModelConfig.micro(), sched, cfg)
    first.run(data, 2)
    save_checkpoint(first, tmp_path / "ck.npz")
    resumed = restore_trainer(load_checkpoint(tmp_path / "ck.npz"), sched)
    rest = resumed.run(data, 2)

    assert [r.step for r in rest] == [3, 4]
    assert [r.loss for r in rest] == [r.loss for r in ref[2:]]
    assert torch.equal(params(resumed.model), params(straight.model))
    assert torch.equal(params(resumed.ema), params(straight.ema))


def test_sampling_from_reloaded_ema_is_identical(sched, tmp_path):
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=2, lr=1e-3))
    tr.run(micro_data(4), 2)
    save_checkpoint(tr, tmp_path / "ck.npz")
    reloaded = load_checkpoint(tmp_path / "ck.npz").build()
    cfg = ModelConfig.micro()
    outs = [sample_loop(m, cfg.audio_shape, cfg.video_shape, 2, sched, torch.Generator().manual_seed(5),
                        stride=10) for m in (tr.ema, reloaded)]
    assert torch.equal(outs[0][0], outs[1][0]) and torch.equal(outs[0][1], outs[1][1])


def test_trainer_without_model_config_cannot_checkpoint(sched, tmp_path):
    tr = Trainer(build_model(ModelConfig.micro()), sched, TrainConfig())
    with pytest.raises(CheckpointError):
        save_checkpoint(tr, tmp_path / "x.npz")


def test_micro_model_loss_halves():
    sched = build_linear_schedule(1000)
    tr = new_trainer(ModelConfig.micro(), sched, TrainConfig(batch=8, lr=1e-3, seed=0))
    losses = [r.loss for r in tr.run(micro_data(32), 2000)]
    s = smoothed(losses)
    assert np.isfinite(losses).all()
    assert s[-1] < 0.5 * s[99]
