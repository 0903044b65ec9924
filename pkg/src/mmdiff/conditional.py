"""Zero-shot conditional sampling from a jointly trained model.

The condition modality is never generated: at every step it is replaced by
a fresh draw ``c_t ~ q(c_t | c_0)`` from the forward marginal of the clean
condition, and only the free modality takes the reverse update.  The
gradient-guided variant further corrects the free modality's update

    x_{t-1} <- x_{t-1} - lambda * sqrt(1 - abar_{t-1}) * grad_{x_t} || c_{t-1} - c^_{t-1} ||^2

where ``c_{t-1}`` is the model's reverse-mean for the condition modality
(one forward pass at step t, differentiated w.r.t. the free input ``x_t``)
and ``c^_{t-1}`` is the forward-marginal draw that is substituted at the next
step.  With lambda = 0 both variants consume the same random numbers and
produce identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import (Denoiser, DivergenceError, NoiseSchedule, eval_mode,
                        forward_marginal, implicit_update, posterior_mean, step_tensor, timesteps)
from .media import MediaPair, denormalize_audio, denormalize_video, normalize_video

METHODS = ("replacement", "gradient")
DIRECTIONS = ("audio_given_video", "video_given_audio")


class GuidanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    method: str = "gradient"
    lambda_guide: float = 1.0
    direction: str = "audio_given_video"
    stride: int = 1

    def validate(self) -> "GuidanceConfig":
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if not self.lambda_guide >= 0 or not math.isfinite(self.lambda_guide):
            raise ValueError(f"lambda_guide must be finite and >= 0, got {self.lambda_guide}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        return self

    @property
    def free_is_audio(self) -> bool:
        return self.direction == "audio_given_video"


def noised_condition(cond: torch.Tensor, t: int, sched: NoiseSchedule,
                     generator: torch.Generator | None) -> torch.Tensor:
    """A draw from q(c_t | c_0); the clean condition itself at t = 0."""
    if t == 0:
        return cond
    eps = torch.randn(cond.shape, generator=generator, dtype=cond.dtype)
    return forward_marginal(cond, t, eps, sched)


def reverse_mean(x_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule,
                 stride: int) -> torch.Tensor:
    if stride == 1:
        return posterior_mean(x_t, eps, t, sched)
    return implicit_update(x_t, eps, t, t_prev, sched)


def guidance_correction(lam: float, t_prev: int, sched: NoiseSchedule, grad: torch.Tensor) -> torch.Tensor:
    """lambda * sqrt(1 - abar_{t-1}) * grad."""
    return (lam * math.sqrt(1.0 - sched.abar(t_prev))) * grad


def predict(model: Denoiser, x: torch.Tensor, c: torch.Tensor, t: int, free_is_audio: bool,
            generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(eps_free, eps_cond) from one joint forward pass."""
    t_vec = step_tensor(t, x.shape[0])
    if free_is_audio:
        eps_x, eps_c = model(x, c, t_vec, generator=generator)
    else:
        eps_c, eps_x = model(c, x, t_vec, generator=generator)
    return eps_x, eps_c


def guided_forward(model: Denoiser, x_t: torch.Tensor, c_t: torch.Tensor, t: int, t_prev: int,
                   sched: NoiseSchedule, cfg: GuidanceConfig,
                   generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Free-modality eps and the model's reverse mean for the condition, differentiable in x_t."""
    eps_x, eps_c = predict(model, x_t, c_t, t, cfg.free_is_audio, generator)
    return eps_x, reverse_mean(c_t, eps_c, t, t_prev, sched, cfg.stride)


def guidance_gradient(c_mean: torch.Tensor, c_next: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    """grad_{x_t} ||c_mean - c_next||^2 through the forward pass that produced c_mean."""
    if not c_mean.requires_grad:
        raise GuidanceError("model output does not depend differentiably on its inputs")
    with torch.enable_grad():
        dist = ((c_mean - c_next) ** 2).sum()
        (grad,) = torch.autograd.grad(dist, x_t, allow_unused=True)
    if grad is None:
        raise GuidanceError("condition prediction does not depend on the free modality")
    return grad


def conditional_loop(model: Denoiser, cond: torch.Tensor, free_shape, cfg: GuidanceConfig,
                     sched: NoiseSchedule, generator: torch.Generator | None = None) -> torch.Tensor:
    """Generate the free modality (raw, normalized space) given a normalized clean condition batch."""
    cfg.validate()
    free = torch.randn((cond.shape[0], *free_shape), generator=generator, dtype=cond.dtype)
    steps = timesteps(sched.T, cfg.stride)
    c_t = noised_condition(cond, steps[0], sched, generator)
    guided = cfg.method == "gradient"

    with eval_mode(model):
        for i, t in enumerate(steps):
            t_prev = steps[i + 1] if i + 1 < len(steps) else 0
            if guided:
                x_t = free.detach().requires_grad_(True)
                with torch.enable_grad():
                    eps_x, c_mean = guided_forward(model, x_t, c_t, t, t_prev, sched, cfg, generator)
                x_prev = reverse_mean(x_t.detach(), eps_x.detach(), t, t_prev, sched, cfg.stride)
            else:
                with torch.no_grad():
                    eps_x, _ = predict(model, free, c_t, t, cfg.free_is_audio, generator)
                x_prev = reverse_mean(free, eps_x, t, t_prev, sched, cfg.stride)
            if cfg.stride == 1 and t > 1:
                sigma = math.sqrt(float(sched.sigma2[t - 1]))
                x_prev = x_prev + sigma * torch.randn(x_prev.shape, generator=generator, dtype=x_prev.dtype)
            c_next = noised_condition(cond, t_prev, sched, generator)
            if guided:
                grad = guidance_gradient(c_mean, c_next, x_t)
                if not torch.isfinite(grad).all():
                    raise DivergenceError(f"non-finite guidance gradient at t = {t}")
                x_prev = x_prev - guidance_correction(cfg.lambda_guide, t_prev, sched, grad)
            free, c_t = x_prev.detach(), c_next
            if not torch.isfinite(free).all():
                raise DivergenceError(f"non-finite sampler state at t = {t_prev}")
    return free


def conditional_sample(model: Denoiser, condition: list[MediaPair], cfg: GuidanceConfig,
                       sched: NoiseSchedule, generator: torch.Generator | None = None,
                       audio_shape=None, video_shape=None, dtype=torch.float32,
                       chunk: int | None = 16) -> list[MediaPair]:
    """Fill in the missing modality for each condition pair.

    Only the condition modality of each input pair is read.  The returned
    pairs hold the generated modality plus the (clean, denormalized) condition.
    Conditions are processed ``chunk`` at a time, one after another, to bound
    the memory of the guidance backward pass; ``None`` runs them in one batch.
    """
    if chunk is not None and chunk < 1:
        raise ValueError("chunk must be positive")
    cfg.validate()
    if not condition:
        raise ValueError("no condition media")
    model_cfg = getattr(model, "cfg", None)
    audio_shape = tuple(audio_shape or model_cfg.audio_shape)
    video_shape = tuple(video_shape or model_cfg.video_shape)
    if cfg.free_is_audio:
        arrs = [p.video for p in condition]
        if any(a.shape != video_shape for a in arrs):
            raise ValueError(f"condition video must have shape {video_shape}")
        cond = torch.as_tensor(np.stack([normalize_video(a) for a in arrs]), dtype=dtype)
        free_shape = audio_shape
    else:
        arrs = [p.audio for p in condition]
        if any(a.shape != audio_shape for a in arrs):
            raise ValueError(f"condition audio must have shape {audio_shape}")
        cond = torch.as_tensor(np.stack(arrs), dtype=dtype)
        free_shape = video_shape
    size = chunk or len(cond)
    out = torch.cat([conditional_loop(model, part, free_shape, cfg, sched, generator)
                     for part in cond.split(size)]).double().numpy()
    c = cond.double().numpy()
    pairs = []
    for i, p in enumerate(condition):
        if cfg.free_is_audio:
            video, audio = denormalize_video(c[i]), denormalize_audio(out[i])
        else:
            video, audio = denormalize_video(out[i]), denormalize_audio(c[i])
        pairs.append(MediaPair(video=video, audio=audio, fps=p.fps, sr=p.sr,
                               meta={"condition": dict(p.meta)}))
    return pairs


def check_condition_marginal(cond: torch.Tensor, t: int, sched: NoiseSchedule, draws: int,
                             generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Empirical mean and variance of repeated substituted-condition draws at step t."""
    xs = torch.stack([noised_condition(cond, t, sched, generator) for _ in range(draws)])
    return xs.mean(0), xs.var(0)


__all__ = ["GuidanceConfig", "GuidanceError", "conditional_loop", "conditional_sample",
           "noised_condition", "guidance_correction", "guided_forward", "guidance_gradient", "predict",
           "check_condition_marginal"]
