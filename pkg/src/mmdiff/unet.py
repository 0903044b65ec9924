"""Coupled audio/video U-Net denoiser.

Two U-shaped streams run side by side.  At every scale each MM-block pairs

* an audio block: a stack of 1D convolutions with dilations 1, 2, ..., 2^N
  (no attention of any kind on the audio side), and
* a video block: factorized 1D temporal + 2D spatial convolutions, followed at
  the configured scales by 2D spatial + 1D temporal self-attention,

and, at the cross-attention scales, a :class:`~mmdiff.rs_mma.RandomShiftMMA`
that exchanges information between the two streams.  Skips are concatenated
along channels, ADM style.  Scale indices in the config are 1-based.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F_
from torch import nn

from .diffusion import DivergenceError
from .rs_mma import CrossAttention, RandomShiftMMA


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    blocks_per_scale: int = 2
    video_attn_scales: tuple[int, ...] = (2,)
    cross_attn_scales: tuple[int, ...] = (1, 2)
    cross_attn_window: tuple[int, ...] = (2, 4)
    audio_dilation_depth: int = 6
    video_shape: tuple[int, int, int, int] = (8, 3, 16, 16)
    audio_shape: tuple[int, int] = (1, 1024)
    video_downsample: int = 2
    audio_downsample: int = 4
    time_embed_dim: int = 128
    dropout: float = 0.1
    head_dim: int = 16
    norm_groups: int = 32
    video_conv_order: str = "temporal_first"
    cross_attn_position: str = "last"
    cross_attn_in_decoder: bool = False
    time_fusion: str = "bias"
    shift_mode: str = "random"
    skip_layout: str = "symmetric"
    middle_blocks: int = 0
    video_convs_per_block: int = 1
    input_skip: bool = False
    frame_pos: bool = False

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                setattr(self, f.name, tuple(value))

    @property
    def scales(self) -> int:
        return len(self.channel_mults)

    def window_for(self, scale: int) -> int | None:
        scales = sorted(self.cross_attn_scales)
        if scale not in scales:
            return None
        return self.cross_attn_window[scales.index(scale)]

    def validate(self) -> "ModelConfig":
        F, C, H, W = self.video_shape
        C_a, T_a = self.audio_shape
        n = self.scales
        if self.base_channels < 1 or not self.channel_mults or min(self.channel_mults) < 1:
            raise ConfigError("channel settings must be positive")
        if self.blocks_per_scale < 1:
            raise ConfigError("blocks_per_scale must be >= 1")
        if min(F, C, H, W, C_a, T_a) < 1:
            raise ConfigError("media shapes must be positive")
        if T_a % F:
            raise ConfigError(f"audio length {T_a} must be divisible by frame count {F}")
        vd, ad = self.video_downsample ** (n - 1), self.audio_downsample ** (n - 1)
        if H % vd or W % vd:
            raise ConfigError(f"H, W must be divisible by {vd}")
        if T_a % ad:
            raise ConfigError(f"audio length must be divisible by {ad}")
        if (T_a // ad) % F:
            raise ConfigError("audio length at the deepest scale must stay divisible by F")
        for name in ("video_attn_scales", "cross_attn_scales"):
            if any(not 1 <= s <= n for s in getattr(self, name)):
                raise ConfigError(f"{name} must lie in [1, {n}]")
        if len(self.cross_attn_window) != len(self.cross_attn_scales):
            raise ConfigError("one window size is needed per cross-attention scale")
        if any(not 1 <= s <= F for s in self.cross_attn_window):
            raise ConfigError(f"cross-attention windows must lie in [1, {F}]")
        if self.audio_dilation_depth < 0:
            raise ConfigError("audio_dilation_depth must be >= 0")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be a positive even number")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.video_conv_order not in ("temporal_first", "spatial_first"):
            raise ConfigError(f"unknown video_conv_order {self.video_conv_order!r}")
        if self.cross_attn_position not in ("first", "last"):
            raise ConfigError(f"unknown cross_attn_position {self.cross_attn_position!r}")
        if self.time_fusion not in ("bias", "scale_shift"):
            raise ConfigError(f"unknown time_fusion {self.time_fusion!r}")
        if self.shift_mode not in ("random", "fixed"):
            raise ConfigError(f"unknown shift_mode {self.shift_mode!r}")
        if self.skip_layout not in ("symmetric", "adm"):
            raise ConfigError(f"unknown skip_layout {self.skip_layout!r}")
        if self.video_convs_per_block not in (1, 2):
            raise ConfigError("video_convs_per_block must be 1 or 2")
        if self.middle_blocks < 0:
            raise ConfigError("middle_blocks must be >= 0")
        for m in self.channel_mults:
            ch = self.base_channels * m
            if ch % max(1, ch // self.head_dim):
                raise ConfigError(f"{ch} channels do not split into heads of {self.head_dim}")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def paper(cls) -> "ModelConfig":
        """Coupled U-Net settings of the 64x64 base model."""
        return cls(base_channels=128, channel_mults=(1, 2, 3, 4), blocks_per_scale=2,
                   video_attn_scales=(2, 3, 4), cross_attn_scales=(2, 3, 4), cross_attn_window=(1, 4, 8),
                   audio_dilation_depth=10, video_shape=(16, 3, 64, 64), audio_shape=(1, 25600),
                   time_embed_dim=128, dropout=0.1, head_dim=64)

    @classmethod
    def desk(cls) -> "ModelConfig":
        """CPU-sized model for 8-frame 16x16 clips; full-window RS-MMA with frame codes at the coarse scale."""
        return cls(blocks_per_scale=1, cross_attn_scales=(2,), cross_attn_window=(8,), cross_attn_in_decoder=True,
                   norm_groups=8, dropout=0.0, input_skip=True, frame_pos=True)

    @classmethod
    def micro(cls) -> "ModelConfig":
        """Tiny config for finite-difference checks."""
        return cls(base_channels=8, channel_mults=(1, 2), blocks_per_scale=1, video_attn_scales=(2,),
                   cross_attn_scales=(1, 2), cross_attn_window=(2, 4), audio_dilation_depth=3,
                   video_shape=(4, 3, 8, 8), audio_shape=(1, 64), time_embed_dim=16, dropout=0.0,
                   head_dim=8, norm_groups=4)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with geometric frequencies."""
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.dim).to(dtype))


def group_norm(channels: int, groups: int) -> nn.GroupNorm:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return nn.GroupNorm(g, channels)


class TimeFusion(nn.Module):
    """Normalize, then inject the step embedding per channel (bias or scale-shift)."""

    def __init__(self, channels: int, emb_dim: int, groups: int, mode: str):
        super().__init__()
        self.mode = mode
        self.norm = group_norm(channels, groups)
        self.proj = nn.Linear(emb_dim, channels * (2 if mode == "scale_shift" else 1))

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        e = self.proj(F_.silu(emb)).reshape(x.shape[0], -1, *([1] * (x.ndim - 2)))
        h = self.norm(x)
        if self.mode == "scale_shift":
            scale, shift = e.chunk(2, dim=1)
            return h * (1 + scale) + shift
        return h + e


class DilatedConvStack(nn.Module):
    """Residual 1D convolutions with dilations ``2^first .. 2^last`` (kernel 3, same padding)."""

    def __init__(self, channels: int, first: int, last: int, groups: int = 32,
                 norm: bool = True, dropout: float = 0.0):
        super().__init__()
        self.dilations = [2 ** k for k in range(first, last + 1)]
        self.convs = nn.ModuleList(nn.Conv1d(channels, channels, 3, dilation=d, padding=d)
                                   for d in self.dilations)
        self.norms = nn.ModuleList(group_norm(channels, groups) if norm else nn.Identity()
                                   for _ in self.dilations)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for k, (norm, conv) in enumerate(zip(self.norms, self.convs)):
            x = F_.silu(norm(h))
            if k == len(self.convs) - 1:
                x = self.dropout(x)
            h = h + conv(x)
        return h


class AudioBlock(nn.Module):
    """Dilated-convolution audio block: dilation 1 on entry, then 2, 4, ..., 2^N."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, depth: int, groups: int,
                 dropout: float, fusion: str):
        super().__init__()
        self.fuse = TimeFusion(in_ch, emb_dim, groups, fusion)
        self.conv_in = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.stack = DilatedConvStack(out_ch, 1, depth, groups, dropout=dropout)
        self.identity = in_ch == out_ch

    @property
    def dilations(self) -> list[int]:
        return [self.conv_in.dilation[0], *self.stack.dilations]

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(F_.silu(self.fuse(x, emb)))
        if self.identity:
            h = h + x
        return self.stack(h)


def spatial(conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
    """Apply a 2D conv to every frame of (B, C, F, H, W)."""
    B, C, F, H, W = x.shape
    y = conv(x.transpose(1, 2).reshape(B * F, C, H, W))
    return y.reshape(B, F, *y.shape[1:]).transpose(1, 2)


def temporal(conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
    """Apply a (k, 1) conv along the frame axis of (B, C, F, H, W)."""
    B, C, F, H, W = x.shape
    return conv(x.reshape(B, C, F, H * W)).reshape(B, -1, F, H, W)


class FactorizedConv(nn.Module):
    """1D temporal conv (kernel 3) and 2D spatial conv (3x3) in the configured order."""

    def __init__(self, in_ch: int, out_ch: int, order: str):
        super().__init__()
        temporal_in = in_ch if order == "temporal_first" else out_ch
        spatial_in = out_ch if order == "temporal_first" else in_ch
        self.order = order
        self.temporal = nn.Conv2d(temporal_in, out_ch, (3, 1), padding=(1, 0))
        self.spatial = nn.Conv2d(spatial_in, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.order == "temporal_first":
            return spatial(self.spatial, temporal(self.temporal, x))
        return temporal(self.temporal, spatial(self.spatial, x))


class VideoBlock(nn.Module):
    """Normalize + step embedding, then one (or two) factorized temporal/spatial convs, residual."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int, dropout: float,
                 fusion: str, order: str, convs: int = 1):
        super().__init__()
        self.fuse = TimeFusion(in_ch, emb_dim, groups, fusion)
        self.conv1 = FactorizedConv(in_ch, out_ch, order)
        self.dropout = nn.Dropout(dropout)
        if convs == 2:
            self.norm2 = group_norm(out_ch, groups)
            self.conv2 = FactorizedConv(out_ch, out_ch, order)
        else:
            self.norm2 = self.conv2 = None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        skip = x if self.skip is None else spatial(self.skip, x)
        h = F_.silu(self.fuse(x, emb))
        if self.conv2 is None:
            return skip + self.conv1(self.dropout(h))
        h = self.conv1(h)
        h = self.conv2(self.dropout(F_.silu(self.norm2(h))))
        return skip + h


class VideoAttention(nn.Module):
    """2D spatial self-attention within each frame, then 1D temporal self-attention per pixel."""

    def __init__(self, channels: int, head_dim: int, groups: int):
        super().__init__()
        self.norm_spatial = group_norm(channels, groups)
        self.spatial = CrossAttention(channels, head_dim)
        self.norm_temporal = group_norm(channels, groups)
        self.temporal = CrossAttention(channels, head_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, F, H, W = x.shape
        h = self.norm_spatial(x).permute(0, 2, 3, 4, 1).reshape(B, F, H * W, C)
        x = x + self.spatial(h, h).reshape(B, F, H, W, C).permute(0, 4, 1, 2, 3)
        h = self.norm_temporal(x).permute(0, 3, 4, 2, 1).reshape(B, H * W, F, C)
        x = x + self.temporal(h, h).reshape(B, H, W, F, C).permute(0, 4, 3, 1, 2)
        return x


class MMBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, cfg: ModelConfig,
                 video_attn: bool, window: int | None):
        super().__init__()
        g = cfg.norm_groups
        self.audio = AudioBlock(in_ch, out_ch, emb_dim, cfg.audio_dilation_depth, g, cfg.dropout,
                                cfg.time_fusion)
        self.video = VideoBlock(in_ch, out_ch, emb_dim, g, cfg.dropout, cfg.time_fusion,
                                cfg.video_conv_order, cfg.video_convs_per_block)
        self.video_attn = VideoAttention(out_ch, cfg.head_dim, g) if video_attn else None
        self.cross = (RandomShiftMMA(out_ch, window, cfg.video_shape[0], cfg.head_dim, g, cfg.shift_mode,
                                     cfg.frame_pos)
                      if window is not None else None)
        self.cross_first = cfg.cross_attn_position == "first"

    def forward(self, a, v, emb, generator=None):
        a = self.audio(a, emb)
        v = self.video(v, emb)
        if self.cross is not None and self.cross_first:
            a, v = self.cross(a, v, generator)
        if self.video_attn is not None:
            v = self.video_attn(v)
        if self.cross is not None and not self.cross_first:
            a, v = self.cross(a, v, generator)
        return a, v


class Downsample(nn.Module):
    def __init__(self, ch: int, video_factor: int, audio_factor: int):
        super().__init__()
        r = audio_factor
        self.video = nn.Conv2d(ch, ch, 3, stride=video_factor, padding=1)
        self.audio = nn.Conv1d(ch, ch, 2 * (r // 2) + 1, stride=r, padding=r // 2)

    def forward(self, a, v, emb=None, generator=None):
        return self.audio(a), spatial(self.video, v)


class Upsample(nn.Module):
    def __init__(self, ch: int, video_factor: int, audio_factor: int):
        super().__init__()
        self.vf, self.af = video_factor, audio_factor
        self.video = nn.Conv2d(ch, ch, 3, padding=1)
        self.audio = nn.Conv1d(ch, ch, 3, padding=1)

    def forward(self, a, v, emb=None, generator=None):
        a = F_.interpolate(a, scale_factor=self.af, mode="nearest")
        v = F_.interpolate(v, scale_factor=(1, self.vf, self.vf), mode="nearest")
        return self.audio(a), spatial(self.video, v)


class CoupledUNet(nn.Module):
    """eps-prediction network over batched ``audio (B, C_a, T_a)`` and ``video (B, F, C, H, W)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        F, C_v, _, _ = cfg.video_shape
        C_a, _ = cfg.audio_shape
        emb_dim = cfg.time_embed_dim
        vf, af = cfg.video_downsample, cfg.audio_downsample
        chans = [cfg.base_channels * m for m in cfg.channel_mults]

        self.time_embed = TimeEmbedding(emb_dim)
        self.audio_in = nn.Conv1d(C_a, chans[0], 3, padding=1)
        self.video_in = nn.Conv2d(C_v, chans[0], 3, padding=1)

        # "symmetric": every encoder MM-block feeds the mirrored decoder MM-block.
        # "adm": the input conv and downsamplers also feed skips; one extra decoder block per scale.
        adm = cfg.skip_layout == "adm"
        self.encoder = nn.ModuleList()
        self.skip_from = []
        skips = [chans[0]] if adm else []
        self.skip_from.append(adm)
        ch = chans[0]
        for level, out_ch in enumerate(chans, start=1):
            for _ in range(cfg.blocks_per_scale):
                self.encoder.append(MMBlock(ch, out_ch, emb_dim, cfg, level in cfg.video_attn_scales,
                                            cfg.window_for(level)))
                ch = out_ch
                skips.append(ch)
                self.skip_from.append(True)
            if level < len(chans):
                self.encoder.append(Downsample(ch, vf, af))
                if adm:
                    skips.append(ch)
                self.skip_from.append(adm)

        deepest = len(chans)
        self.middle = nn.ModuleList(
            MMBlock(ch, ch, emb_dim, cfg, i == 0 and deepest in cfg.video_attn_scales,
                    cfg.window_for(deepest) if i == 0 else None)
            for i in range(cfg.middle_blocks)
        )

        self.decoder = nn.ModuleList()
        per_level = cfg.blocks_per_scale + (1 if adm else 0)
        for level in range(len(chans), 0, -1):
            out_ch = chans[level - 1]
            window = cfg.window_for(level) if cfg.cross_attn_in_decoder else None
            for i in range(per_level):
                self.decoder.append(MMBlock(ch + skips.pop(), out_ch, emb_dim, cfg,
                                            level in cfg.video_attn_scales, window))
                ch = out_ch
                if level > 1 and i == per_level - 1:
                    self.decoder.append(Upsample(ch, vf, af))

        # optional eps = g(t) * x_t + head(...), with a zero-initialized per-modality gain g(t)
        if cfg.input_skip:
            self.skip_gain = nn.Linear(emb_dim, 2)
            nn.init.zeros_(self.skip_gain.weight)
            nn.init.zeros_(self.skip_gain.bias)
        else:
            self.skip_gain = None

        g = cfg.norm_groups
        self.audio_out = nn.Sequential(group_norm(ch, g), nn.SiLU(), nn.Conv1d(ch, C_a, 3, padding=1))
        self.video_out = nn.Sequential(group_norm(ch, g), nn.SiLU())
        self.video_out_conv = nn.Conv2d(ch, C_v, 3, padding=1)

    def cross_blocks(self) -> list[RandomShiftMMA]:
        return [m for m in self.modules() if isinstance(m, RandomShiftMMA)]

    def forward(self, audio: torch.Tensor, video: torch.Tensor, t: torch.Tensor,
                generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.cfg
        if tuple(audio.shape[1:]) != tuple(cfg.audio_shape) or tuple(video.shape[1:]) != tuple(cfg.video_shape):
            raise ValueError(f"expected audio {cfg.audio_shape} and video {cfg.video_shape}, got "
                             f"{tuple(audio.shape[1:])} and {tuple(video.shape[1:])}")
        if t.ndim == 0:
            t = t.expand(audio.shape[0])
        emb = self.time_embed(t)
        a = self.audio_in(audio)
        v = spatial(self.video_in, video.transpose(1, 2))  # (B, C, F, H, W)
        hs = [(a, v)] if self.skip_from[0] else []
        for layer, keep in zip(self.encoder, self.skip_from[1:]):
            a, v = layer(a, v, emb, generator)
            if keep:
                hs.append((a, v))
        for layer in self.middle:
            a, v = layer(a, v, emb, generator)
        for layer in self.decoder:
            if isinstance(layer, MMBlock):
                sa, sv = hs.pop()
                a, v = torch.cat([a, sa], dim=1), torch.cat([v, sv], dim=1)
            a, v = layer(a, v, emb, generator)
        eps_a = self.audio_out(a)
        eps_v = spatial(self.video_out_conv, self.video_out(v)).transpose(1, 2)
        if self.skip_gain is not None:
            gain = self.skip_gain(F_.silu(emb))
            eps_a = eps_a + gain[:, 0].reshape(-1, 1, 1) * audio
            eps_v = eps_v + gain[:, 1].reshape(-1, 1, 1, 1, 1) * video
        if not (torch.isfinite(eps_a).all() and torch.isfinite(eps_v).all()):
            raise DivergenceError("non-finite denoiser output")
        return eps_a, eps_v


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32,
                device: str | torch.device = "cpu") -> CoupledUNet:
    """Build a :class:`CoupledUNet` with parameters initialized deterministically from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CoupledUNet(cfg)
    return model.to(device=device, dtype=dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
