"""Random-shift multi-modal attention between an audio stream and a video stream.

The audio timeline (C, T) is cut into F equal segments, one per video frame.
Segment ``i`` attends to a window of S consecutive frames starting at
``(i + R) % F`` (wrapping modulo F); video frame ``f`` attends back to exactly
the segments whose window contains it, so both directions use the same
(segment, frame) link set.  R is drawn uniformly from [0, F - S] once per
call and shared by both directions.

Per segment the audio->video direction touches ``S * H * W`` key tokens
instead of ``F * H * W`` for dense cross attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F_
from torch import nn


@dataclass(frozen=True)
class AttentionPlan:
    F: int
    S: int
    R: int
    d_k: int
    segment_len: int

    def __post_init__(self):
        if not 1 <= self.S <= self.F:
            raise ValueError(f"window S={self.S} must satisfy 1 <= S <= F={self.F}")
        if not 0 <= self.R <= self.F - self.S:
            raise ValueError(f"shift R={self.R} outside [0, {self.F - self.S}]")
        if self.segment_len < 1:
            raise ValueError("segment length must be positive")


def segment_audio(a_feat: torch.Tensor, F: int) -> torch.Tensor:
    """Split (..., C, T) into F contiguous segments, returned as (..., F, C, T // F)."""
    T = a_feat.shape[-1]
    if F < 1 or T % F:
        raise ValueError(f"audio length {T} is not divisible by {F} frames")
    seg = a_feat.reshape(*a_feat.shape[:-1], F, T // F)
    return seg.movedim(-2, -3)


def merge_segments(segments: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`segment_audio`."""
    return torch.cat(segments.unbind(-3), dim=-1)


def window_indices(i: int, R: int, S: int, F: int) -> list[int]:
    if not 0 <= i < F:
        raise ValueError(f"segment index {i} outside [0, {F})")
    AttentionPlan(F=F, S=S, R=R, d_k=1, segment_len=1)
    return [(i + R + k) % F for k in range(S)]


def window_table(R: int, S: int, F: int) -> torch.Tensor:
    """(F, S) frame indices seen by each audio segment."""
    return (torch.arange(F)[:, None] + R + torch.arange(S)[None, :]) % F


def reverse_window_table(R: int, S: int, F: int) -> torch.Tensor:
    """(F, S) audio segment indices seen by each video frame."""
    return (torch.arange(F)[:, None] - R - torch.arange(S)[None, :]) % F


def frame_position_embedding(F: int, channels: int) -> torch.Tensor:
    """(F, channels) sinusoidal code of the frame index, shared by segment i and frame i."""
    half = channels // 2
    freqs = torch.exp(-math.log(100.0) * torch.arange(half) / max(1, half))
    ang = torch.arange(F)[:, None] * freqs[None, :]
    pe = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    return F_.pad(pe, (0, channels - 2 * half))


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


class CrossAttention(nn.Module):
    """Multi-head softmax(Q K^T / sqrt(d_k)) V with learned linear Q, K, V and output maps."""

    def __init__(self, channels: int, head_dim: int):
        super().__init__()
        self.heads = max(1, channels // head_dim)
        if channels % self.heads:
            raise ValueError(f"{channels} channels cannot be split into {self.heads} heads")
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.unflatten(-1, (self.heads, -1)).transpose(-2, -3)

    def forward(self, query: torch.Tensor, context: torch.Tensor, return_weights: bool = False):
        """``query`` (..., Nq, C), ``context`` (..., Nk, C) -> (..., Nq, C)."""
        q = self._split(self.to_q(query))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        if return_weights:
            w = attention_weights(q, k)
            out = w @ v
        else:
            out = F_.scaled_dot_product_attention(q, k, v)
        out = self.to_out(out.transpose(-2, -3).flatten(-2))
        return (out, w) if return_weights else out


def mma_cross(attn: CrossAttention, query_feat: torch.Tensor, key_value_feat: torch.Tensor,
              plan: AttentionPlan, return_weights: bool = False):
    """Windowed audio->video attention for every segment under ``plan``.

    ``query_feat``: audio tokens (B, F, L, C).  ``key_value_feat``: video tokens
    (B, F, H*W, C).  Each segment's keys are the flattened (S, H*W) window.
    """
    B, F, L, C = query_feat.shape
    if F != plan.F or L != plan.segment_len or key_value_feat.shape[1] != F:
        raise ValueError("features do not match the attention plan")
    idx = window_table(plan.R, plan.S, plan.F).to(query_feat.device)
    windows = key_value_feat[:, idx].flatten(2, 3)  # (B, F, S*HW, C)
    return attn(query_feat, windows, return_weights=return_weights)


class RandomShiftMMA(nn.Module):
    """Symmetric windowed cross attention with pre-normalization and residuals.

    ``shift_mode``: ``"random"`` draws a fresh R per call, ``"fixed"`` always
    uses R = 0.  A ``shift`` passed to :meth:`forward` overrides both.
    With ``frame_pos`` the normalized tokens of segment i and frame i get the
    same sinusoidal index code, so attention can tell which frame is which.
    """

    def __init__(self, channels: int, window: int, frames: int, head_dim: int = 64,
                 groups: int = 32, shift_mode: str = "random", frame_pos: bool = False):
        super().__init__()
        if not 1 <= window <= frames:
            raise ValueError(f"window {window} must lie in [1, {frames}]")
        if shift_mode not in ("random", "fixed"):
            raise ValueError(f"unknown shift mode {shift_mode!r}")
        self.window, self.frames, self.shift_mode = window, frames, shift_mode
        self.norm_audio = nn.GroupNorm(min(groups, channels), channels)
        self.norm_video = nn.GroupNorm(min(groups, channels), channels)
        self.audio_to_video = CrossAttention(channels, head_dim)
        self.video_to_audio = CrossAttention(channels, head_dim)
        self.last_stats: dict = {}
        pe = frame_position_embedding(frames, channels) if frame_pos else torch.zeros(frames, channels)
        self.register_buffer("frame_code", pe, persistent=False)

    def draw_shift(self, generator: torch.Generator | None) -> int:
        if self.shift_mode == "fixed":
            return 0
        return int(torch.randint(0, self.frames - self.window + 1, (1,), generator=generator))

    def forward(self, a: torch.Tensor, v: torch.Tensor, generator: torch.Generator | None = None,
                shift: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """``a`` (B, C, T), ``v`` (B, C, F, H, W) -> updated (a, v)."""
        B, C, T = a.shape
        F, H, W = v.shape[2:]
        if F != self.frames:
            raise ValueError(f"expected {self.frames} frames, got {F}")
        R = self.draw_shift(generator) if shift is None else shift
        plan = AttentionPlan(F=F, S=self.window, R=R, d_k=C // self.audio_to_video.heads,
                             segment_len=T // F if T % F == 0 else 0)

        code = self.frame_code.to(a.dtype)[:, None, :]
        a_tok = segment_audio(self.norm_audio(a), F).transpose(-1, -2) + code  # (B, F, L, C)
        v_tok = self.norm_video(v).flatten(3).permute(0, 2, 3, 1) + code  # (B, F, HW, C)

        a_out = mma_cross(self.audio_to_video, a_tok, v_tok, plan)
        rev = reverse_window_table(R, self.window, F).to(a.device)
        v_out = self.video_to_audio(v_tok, a_tok[:, rev].flatten(2, 3))

        self.last_stats = {
            "R": R,
            "links": {(i, f) for i, row in enumerate(window_table(R, self.window, F).tolist()) for f in row},
            "reverse_links": {(i, f) for f, row in enumerate(rev.tolist()) for i in row},
            "key_tokens_per_segment": self.window * H * W,
            "dense_key_tokens_per_segment": F * H * W,
            "query_tokens_per_segment": plan.segment_len,
            "score_entries": 2 * B * F * plan.segment_len * self.window * H * W,
        }

        a_res = merge_segments(a_out.transpose(-1, -2))
        v_res = v_out.permute(0, 3, 1, 2).reshape(B, C, F, H, W)
        return a + a_res, v + v_res
