"""Shared-schedule diffusion over an (audio, video) pair.

Forward process (per modality, independent noise, one schedule):
    q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)
    x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps

Reverse step with eps-prediction and fixed variance:
    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z

A denoiser is any callable ``model(audio, video, t, generator=None)`` taking
batched tensors ``audio (B, C_a, T_a)``, ``video (B, F, C, H, W)``, integer
steps ``t (B,)`` and returning ``(eps_audio, eps_video)`` of the same shapes.
Step indices are 1-based: t = 1 is the last denoising step, t = 0 is data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import torch

from .media import MediaPair, from_model_tensors


class DivergenceError(FloatingPointError):
    """A loss or sampler state became non-finite."""


class Denoiser(Protocol):
    def __call__(self, audio: torch.Tensor, video: torch.Tensor, t: torch.Tensor,
                 generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]: ...


@dataclass(frozen=True)
class NoiseSchedule:
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma2: torch.Tensor

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")

    def abar(self, t: int) -> float:
        """abar_t with the abar_0 = 1 convention."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                          variance: str = "beta") -> NoiseSchedule:
    """Linear beta schedule.

    ``variance`` picks the fixed reverse variance: ``"beta"`` (sigma2_t = beta_t)
    or ``"posterior"`` (sigma2_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t).
    """
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    if variance == "beta":
        sigma2 = beta.clone()
    elif variance == "posterior":
        abar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
        sigma2 = (1.0 - abar_prev) / (1.0 - alpha_bar) * beta
    else:
        raise ValueError(f"unknown variance choice {variance!r}")
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)


@dataclass
class JointState:
    """Noisy (audio, video) batch at a single shared step ``t``."""

    audio: torch.Tensor
    video: torch.Tensor
    t: int

    def __post_init__(self):
        if self.audio.shape[0] != self.video.shape[0]:
            raise ValueError("audio and video batch sizes differ")


@dataclass
class NoisePair:
    eps_audio: torch.Tensor
    eps_video: torch.Tensor


def _per_example(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = values.to(like.dtype)[t - 1]
    return out.reshape(-1, *([1] * (like.ndim - 1)))


def forward_marginal(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor,
                     sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form q(x_t | x_0). ``t`` is an int or a (B,) tensor of per-example steps."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, torch.Tensor):
        if t.min() < 1 or t.max() > sched.T:
            raise ValueError(f"steps outside [1, {sched.T}]")
        abar = _per_example(sched.alpha_bar, t.long(), x0)
        return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps
    sched._check(t)
    abar = sched.abar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def forward_step(x_prev: torch.Tensor, t: int, sched: NoiseSchedule,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """One Markov noising step q(x_t | x_{t-1})."""
    sched._check(t)
    beta = float(sched.beta[t - 1])
    z = torch.randn(x_prev.shape, generator=generator, dtype=x_prev.dtype)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * z


def constant_weight(t: torch.Tensor) -> torch.Tensor:
    return torch.ones_like(t, dtype=torch.float64)


@dataclass
class LossConfig:
    lambda_t: Callable[[torch.Tensor], torch.Tensor] = constant_weight


def eps_loss_terms(model: Denoiser, audio0: torch.Tensor, video0: torch.Tensor,
                   t: int | torch.Tensor, sched: NoiseSchedule,
                   generator: torch.Generator | None = None,
                   cfg: LossConfig | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-modality weighted eps-MSE, each averaged per element then over the batch."""
    cfg = cfg or LossConfig()
    batch = audio0.shape[0]
    if video0.shape[0] != batch:
        raise ValueError("audio and video batch sizes differ")
    if isinstance(t, int):
        t = torch.full((batch,), t, dtype=torch.long)
    eps_a = torch.randn(audio0.shape, generator=generator, dtype=audio0.dtype)
    eps_v = torch.randn(video0.shape, generator=generator, dtype=video0.dtype)
    a_t = forward_marginal(audio0, t, eps_a, sched)
    v_t = forward_marginal(video0, t, eps_v, sched)
    pred_a, pred_v = model(a_t, v_t, t, generator=generator)
    if pred_a.shape != a_t.shape or pred_v.shape != v_t.shape:
        raise ValueError("denoiser output shapes do not match its inputs")
    w = cfg.lambda_t(t).to(audio0.dtype)
    if not torch.all(w > 0):
        raise ValueError("loss weights must be positive")
    la = ((pred_a - eps_a) ** 2).flatten(1).mean(1)
    lv = ((pred_v - eps_v) ** 2).flatten(1).mean(1)
    return (w * la).mean(), (w * lv).mean()


def eps_loss(model: Denoiser, audio0: torch.Tensor, video0: torch.Tensor, t: int | torch.Tensor,
             sched: NoiseSchedule, generator: torch.Generator | None = None,
             cfg: LossConfig | None = None) -> torch.Tensor:
    """Sum of the audio and video eps-prediction losses.

    Noise for each modality is drawn independently. Raises
    :class:`DivergenceError` if the loss is not finite.
    """
    la, lv = eps_loss_terms(model, audio0, video0, t, sched, generator, cfg)
    loss = la + lv
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()} (audio {la.item()}, video {lv.item()})")
    return loss


def posterior_mean(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    sched._check(t)
    beta = float(sched.beta[t - 1])
    alpha = float(sched.alpha[t - 1])
    abar = float(sched.alpha_bar[t - 1])
    return (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)


def reverse_step(eps_pred: NoisePair, state: JointState, sched: NoiseSchedule,
                 generator: torch.Generator | None = None) -> JointState:
    """Ancestral step t -> t-1 for both modalities; no noise is added at t = 1."""
    t = state.t
    if t < 1:
        raise ValueError("state is already at t = 0")
    mean_a = posterior_mean(state.audio, eps_pred.eps_audio, t, sched)
    mean_v = posterior_mean(state.video, eps_pred.eps_video, t, sched)
    if t > 1:
        sigma = math.sqrt(float(sched.sigma2[t - 1]))
        mean_a = mean_a + sigma * torch.randn(mean_a.shape, generator=generator, dtype=mean_a.dtype)
        mean_v = mean_v + sigma * torch.randn(mean_v.shape, generator=generator, dtype=mean_v.dtype)
    return JointState(audio=mean_a, video=mean_v, t=t - 1)


def implicit_update(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
                    sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic jump t -> t_prev using the re-indexed abar pair."""
    abar, abar_prev = sched.abar(t), sched.abar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
    return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_hat


def strided_step(eps_pred: NoisePair, state: JointState, t_prev: int, sched: NoiseSchedule) -> JointState:
    if not 0 <= t_prev < state.t:
        raise ValueError(f"cannot step from {state.t} to {t_prev}")
    return JointState(
        audio=implicit_update(state.audio, eps_pred.eps_audio, state.t, t_prev, sched),
        video=implicit_update(state.video, eps_pred.eps_video, state.t, t_prev, sched),
        t=t_prev,
    )


def timesteps(T: int, stride: int = 1) -> list[int]:
    """Visited steps, from T downwards; stride 1 visits all of T..1."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(T, 0, -stride))


def advance(eps_pred: NoisePair, state: JointState, t_prev: int, sched: NoiseSchedule,
            generator: torch.Generator | None, stride: int) -> JointState:
    """Ancestral step when ``stride == 1``, deterministic jump otherwise."""
    if stride == 1:
        return reverse_step(eps_pred, state, sched, generator)
    return strided_step(eps_pred, state, t_prev, sched)


def check_finite(state: JointState) -> None:
    if not (torch.isfinite(state.audio).all() and torch.isfinite(state.video).all()):
        raise DivergenceError(f"non-finite sampler state at t = {state.t}")


def step_tensor(t: int, batch: int) -> torch.Tensor:
    return torch.full((batch,), t, dtype=torch.long)


def predict(model: Denoiser, state: JointState, generator: torch.Generator | None) -> NoisePair:
    eps_a, eps_v = model(state.audio, state.video, step_tensor(state.t, state.audio.shape[0]),
                         generator=generator)
    return NoisePair(eps_a, eps_v)


class eval_mode:
    """Put an ``nn.Module`` denoiser in eval mode for the duration of a block."""

    def __init__(self, model):
        self.model = model
        self.was_training = getattr(model, "training", None)

    def __enter__(self):
        if self.was_training:
            self.model.eval()
        return self.model

    def __exit__(self, *exc):
        if self.was_training:
            self.model.train()
        return False


def sample_loop(model: Denoiser, audio_shape: Sequence[int], video_shape: Sequence[int], n: int,
                sched: NoiseSchedule, generator: torch.Generator | None = None, stride: int = 1,
                dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the joint reverse chain from pure noise and return raw (audio, video) tensors."""
    audio = torch.randn((n, *audio_shape), generator=generator, dtype=dtype)
    video = torch.randn((n, *video_shape), generator=generator, dtype=dtype)
    state = JointState(audio, video, sched.T)
    steps = timesteps(sched.T, stride)
    with eval_mode(model), torch.no_grad():
        for i, t in enumerate(steps):
            t_prev = steps[i + 1] if i + 1 < len(steps) else 0
            state = advance(predict(model, state, generator), state, t_prev, sched, generator, stride)
            check_finite(state)
    return state.audio, state.video


def sample_joint(model: Denoiser, audio_shape: Sequence[int], video_shape: Sequence[int], n: int,
                 sched: NoiseSchedule, generator: torch.Generator | None = None, stride: int = 1,
                 fps: float = 1.0, sr: int = 1, dtype: torch.dtype = torch.float32) -> list[MediaPair]:
    """Unconditional joint samples, denormalized into :class:`MediaPair` objects."""
    audio, video = sample_loop(model, audio_shape, video_shape, n, sched, generator, stride, dtype)
    return from_model_tensors(audio, video, fps=fps, sr=sr)
