import math

import numpy as np
import pytest
import torch

from mmdiff.diffusion import (DivergenceError, JointState, NoisePair, build_linear_schedule, eps_loss,
                              eps_loss_terms, forward_marginal, forward_step, implicit_update,
                              posterior_mean, reverse_step, sample_joint, sample_loop, timesteps)

# np.cumprod(1 - np.linspace(1e-4, 0.02, 1000)) at t = 1, 500, 1000
ABAR_1 = 0.9999
ABAR_500 = 0.07858724288177824
ABAR_1000 = 4.035829765375676e-05
# (1 - abar_1) / (1 - abar_2) * beta_2
POSTERIOR_VAR_2 = 5.4531876613021935e-05


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(1000)


def test_linear_schedule_values(sched):
    assert sched.T == 1000
    assert float(sched.beta[0]) == pytest.approx(1e-4)
    assert float(sched.beta[-1]) == pytest.approx(0.02)
    assert sched.abar(1) == pytest.approx(ABAR_1, rel=1e-12)
    assert sched.abar(500) == pytest.approx(ABAR_500, rel=1e-10)
    assert sched.abar(1000) == pytest.approx(ABAR_1000, rel=1e-9)
    assert sched.abar(0) == 1.0
    assert torch.all(sched.alpha_bar[1:] < sched.alpha_bar[:-1])
    assert torch.equal(sched.sigma2, sched.beta)


def test_posterior_variance_option():
    s = build_linear_schedule(1000, variance="posterior")
    assert float(s.sigma2[1]) == pytest.approx(POSTERIOR_VAR_2, rel=1e-9)
    assert float(s.sigma2[0]) == 0.0


def test_single_step_schedule():
    s = build_linear_schedule(1)
    assert s.beta.tolist() == [1e-4]


@pytest.mark.parametrize("args", [(0,), (1.5,), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_input(args):
    with pytest.raises(ValueError):
        build_linear_schedule(*args)


def test_schedule_rejects_unknown_variance():
    with pytest.raises(ValueError):
        build_linear_schedule(10, variance="learned")


def test_step_bounds(sched):
    with pytest.raises(ValueError):
        sched.abar(1001)
    x = torch.zeros(3)
    with pytest.raises(ValueError):
        forward_marginal(x, 0, x, sched)
    with pytest.raises(ValueError):
        forward_marginal(x, torch.tensor([1, 2, 1001]), x, sched)


def test_forward_marginal_closed_form(sched):
    x0 = torch.tensor([[0.5, -1.0]], dtype=torch.float64)
    eps = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
    out = forward_marginal(x0, 500, eps, sched)
    expected = math.sqrt(ABAR_500) * x0 + math.sqrt(1 - ABAR_500) * eps
    torch.testing.assert_close(out, expected, rtol=1e-12, atol=0)


def test_forward_marginal_per_example_steps(sched):
    x0 = torch.ones(2, 3, dtype=torch.float64)
    eps = torch.zeros(2, 3, dtype=torch.float64)
    out = forward_marginal(x0, torch.tensor([1, 1000]), eps, sched)
    assert out[0, 0].item() == pytest.approx(math.sqrt(ABAR_1))
    assert out[1, 0].item() == pytest.approx(math.sqrt(ABAR_1000))


def test_forward_marginal_shape_mismatch(sched):
    with pytest.raises(ValueError):
        forward_marginal(torch.zeros(2), 1, torch.zeros(3), sched)


def test_forward_step_moments(sched, gen):
    x = torch.full((20000,), 2.0, dtype=torch.float64)
    y = forward_step(x, 1000, sched, gen)
    assert y.mean().item() == pytest.approx(2.0 * math.sqrt(1 - 0.02), abs=4 * math.sqrt(0.02 / 20000))
    assert y.var().item() == pytest.approx(0.02, rel=0.05)


class ZeroModel:
    def __call__(self, audio, video, t, generator=None):
        return torch.zeros_like(audio), torch.zeros_like(video)


def test_zero_predictor_loss_is_one_per_modality(sched, gen):
    a0 = torch.zeros(64, 1, 4096)
    v0 = torch.zeros(64, 4, 3, 8, 8)
    la, lv = eps_loss_terms(ZeroModel(), a0, v0, 10, sched, gen)
    assert la.item() == pytest.approx(1.0, abs=0.02)
    assert lv.item() == pytest.approx(1.0, abs=0.02)
    total = eps_loss(ZeroModel(), a0, v0, 10, sched, torch.Generator().manual_seed(1234))
    assert total.item() == pytest.approx(la.item() + lv.item(), rel=1e-6)


def test_loss_weight_callable(sched, gen):
    from mmdiff.diffusion import LossConfig
    a0, v0 = torch.zeros(4, 1, 8), torch.zeros(4, 2, 1, 2, 2)
    base = eps_loss(ZeroModel(), a0, v0, 5, sched, torch.Generator().manual_seed(0))
    doubled = eps_loss(ZeroModel(), a0, v0, 5, sched, torch.Generator().manual_seed(0),
                       LossConfig(lambda_t=lambda t: torch.full_like(t, 2.0, dtype=torch.float64)))
    assert doubled.item() == pytest.approx(2 * base.item(), rel=1e-6)
    with pytest.raises(ValueError):
        eps_loss(ZeroModel(), a0, v0, 5, sched, gen, LossConfig(lambda_t=lambda t: torch.zeros_like(t)))


class NaNModel:
    def __call__(self, audio, video, t, generator=None):
        return torch.full_like(audio, float("nan")), torch.zeros_like(video)


def test_non_finite_loss_raises(sched, gen):
    with pytest.raises(DivergenceError):
        eps_loss(NaNModel(), torch.zeros(2, 1, 4), torch.zeros(2, 1, 1, 2, 2), 3, sched, gen)


def test_loss_rejects_bad_output_shape(sched, gen):
    bad = lambda a, v, t, generator=None: (a[..., :1], v)  # noqa: E731
    with pytest.raises(ValueError):
        eps_loss(bad, torch.zeros(2, 1, 4), torch.zeros(2, 1, 1, 2, 2), 3, sched, gen)


def test_posterior_mean_recovers_x0_at_step_one(sched, gen):
    # abar_1 = alpha_1, so the reverse mean with the true noise returns x0 exactly.
    x0 = torch.randn(5, 7, generator=gen, dtype=torch.float64)
    eps = torch.randn(5, 7, generator=gen, dtype=torch.float64)
    x1 = forward_marginal(x0, 1, eps, sched)
    torch.testing.assert_close(posterior_mean(x1, eps, 1, sched), x0, rtol=1e-9, atol=1e-12)


def test_reverse_step_adds_no_noise_at_step_one(sched, gen):
    state = JointState(torch.ones(2, 1, 4), torch.ones(2, 1, 1, 2, 2), 1)
    eps = NoisePair(torch.zeros(2, 1, 4), torch.zeros(2, 1, 1, 2, 2))
    out1 = reverse_step(eps, state, sched, torch.Generator().manual_seed(0))
    out2 = reverse_step(eps, state, sched, torch.Generator().manual_seed(1))
    assert out1.t == 0
    assert torch.equal(out1.audio, out2.audio) and torch.equal(out1.video, out2.video)
    with pytest.raises(ValueError):
        reverse_step(eps, out1, sched, gen)


def test_reverse_step_noise_scale(sched):
    n = 20000
    state = JointState(torch.zeros(n, 1, 1, dtype=torch.float64), torch.zeros(n, 1, 1, 1, 1, dtype=torch.float64), 500)
    eps = NoisePair(torch.zeros_like(state.audio), torch.zeros_like(state.video))
    out = reverse_step(eps, state, sched, torch.Generator().manual_seed(3))
    beta = float(sched.beta[499])
    assert out.audio.var().item() == pytest.approx(beta, rel=0.05)
    assert out.video.var().item() == pytest.approx(beta, rel=0.05)
    corr = np.corrcoef(out.audio.flatten().numpy(), out.video.flatten().numpy())[0, 1]
    assert abs(corr) < 0.05


def test_implicit_update_with_true_noise_lands_on_x0(sched, gen):
    x0 = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    xt = forward_marginal(x0, 700, eps, sched)
    torch.testing.assert_close(implicit_update(xt, eps, 700, 0, sched), x0, rtol=1e-9, atol=1e-9)
    mid = implicit_update(xt, eps, 700, 300, sched)
    torch.testing.assert_close(mid, forward_marginal(x0, 300, eps, sched), rtol=1e-9, atol=1e-9)


def test_timesteps():
    assert timesteps(10) == list(range(10, 0, -1))
    assert timesteps(10, 3) == [10, 7, 4, 1]
    assert timesteps(1000, 10)[-1] == 10
    with pytest.raises(ValueError):
        timesteps(10, 0)


def test_sample_loop_is_seeded_and_shaped():
    sched = build_linear_schedule(50)
    a1, v1 = sample_loop(ZeroModel(), (1, 8), (2, 3, 4, 4), 3, sched, torch.Generator().manual_seed(5))
    a2, v2 = sample_loop(ZeroModel(), (1, 8), (2, 3, 4, 4), 3, sched, torch.Generator().manual_seed(5))
    assert a1.shape == (3, 1, 8) and v1.shape == (3, 2, 3, 4, 4)
    assert torch.equal(a1, a2) and torch.equal(v1, v2)
    a3, _ = sample_loop(ZeroModel(), (1, 8), (2, 3, 4, 4), 3, sched, torch.Generator().manual_seed(6))
    assert not torch.equal(a1, a3)


def test_sample_joint_returns_media_pairs():
    sched = build_linear_schedule(20)
    pairs = sample_joint(ZeroModel(), (1, 8), (2, 3, 4, 4), 2, sched, torch.Generator().manual_seed(0),
                         stride=5, fps=4.0, sr=16)
    assert len(pairs) == 2
    p = pairs[0]
    assert p.video.shape == (2, 3, 4, 4) and p.audio.shape == (1, 8)
    assert p.video.min() >= 0 and p.video.max() <= 1 and np.abs(p.audio).max() <= 1
    assert p.durations_match()


def test_sampler_divergence_raises():
    sched = build_linear_schedule(5)

    class Exploding:
        def __call__(self, audio, video, t, generator=None):
            return torch.full_like(audio, float("inf")), torch.zeros_like(video)

    with pytest.raises(DivergenceError):
        sample_loop(Exploding(), (1, 4), (1, 1, 2, 2), 1, sched, torch.Generator().manual_seed(0))


def test_ancestral_sampling_of_gaussian_oracle_matches_covariance():
    from oracles import GaussianPairOracle
    sched = build_linear_schedule(1000)
    rho = 0.8
    a, v = sample_loop(GaussianPairOracle(sched, rho), (1, 1), (1, 1, 1, 1), 2000, sched,
                       torch.Generator().manual_seed(11), dtype=torch.float64)
    x = np.stack([a.flatten().numpy(), v.flatten().numpy()])
    cov = np.cov(x)
    # n = 2000: standard error of each entry is about 0.03
    np.testing.assert_allclose(cov, [[1, rho], [rho, 1]], atol=0.12)
