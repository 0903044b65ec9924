"""Flat ``key: value`` run configuration shared by every CLI command.

Keys are dotted (``model.base_channels``, ``train.lr`` ...).  A config file
may set any subset; missing keys take the documented defaults and unknown
keys are rejected.  The canonical hash covers the fully resolved key set.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .conditional import GuidanceConfig
from .diffusion import build_linear_schedule
from .synth import SynthParams, SynthRanges
from .trainer import TrainConfig
from .unet import ConfigError, ModelConfig

_MODEL_DOCS = {
    "base_channels": "channels at the first scale",
    "channel_mults": "channel multiplier per scale",
    "blocks_per_scale": "MM-blocks per scale",
    "video_attn_scales": "scales (1-based) with video self-attention",
    "cross_attn_scales": "scales (1-based) with random-shift cross attention",
    "cross_attn_window": "window size S per cross-attention scale",
    "audio_dilation_depth": "N: audio blocks use dilations 1, 2, ..., 2^N",
    "video_shape": "[F, C, H, W] of one clip",
    "audio_shape": "[C_a, T_a] of one clip",
    "video_downsample": "spatial down-sampling factor per scale",
    "audio_downsample": "temporal down-sampling factor per scale for audio",
    "time_embed_dim": "width of the step embedding",
    "head_dim": "channels per attention head",
    "norm_groups": "GroupNorm groups (capped at the channel count)",
    "video_conv_order": "temporal_first | spatial_first",
    "cross_attn_position": "first | last: cross attention before or after the video attention",
    "cross_attn_in_decoder": "also place cross attention in decoder blocks",
    "time_fusion": "bias | scale_shift",
    "shift_mode": "random | fixed (R = 0)",
    "skip_layout": "symmetric | adm",
    "middle_blocks": "MM-blocks at the deepest scale",
    "video_convs_per_block": "factorized convs per video stage (1 or 2)",
    "frame_pos": "add a sinusoidal frame-index code to the cross-attention tokens",
    "input_skip": "add a learned step-dependent multiple of the noisy input to each eps output",
}

_TRAIN_DOCS = {
    "lr": "Adam learning rate",
    "batch": "examples per step",
    "steps": "optimizer steps per train command",
    "ema_decay": "EMA decay in [0, 1)",
    "weight_decay": "Adam weight decay",
    "dropout": "dropout probability inside the network",
    "checkpoint_every": "write the checkpoint every this many steps",
    "grad_clip": "global gradient-norm clip",
}

KEY_DOCS: dict[str, str] = {
    "seed": "master seed; --seed overrides",
    **{f"model.{k}": v for k, v in _MODEL_DOCS.items()},
    **{f"train.{k}": v for k, v in _TRAIN_DOCS.items()},
    "schedule.T": "number of diffusion steps",
    "schedule.beta_start": "first beta of the linear schedule",
    "schedule.beta_end": "last beta of the linear schedule",
    "schedule.variance": "beta | posterior reverse variance",
    "data.n": "pairs written by make-data",
    "data.fps": "video frame rate; the audio rate is fps * T_a / F",
    "data.blob_freq": "[lo, hi] blob pulse frequency range (Hz)",
    "data.tone_freq": "[lo, hi] carrier frequency range (Hz)",
    "data.phase": "[lo, hi] envelope phase range (radians)",
    "data.center_row": "[lo, hi] blob centre row range",
    "data.center_col": "[lo, hi] blob centre column range",
    "data.color": "[lo, hi] range for each RGB component",
    "sample.n": "samples written by sample",
    "sample.stride": "sampler stride; 1 is ancestral, > 1 is a deterministic strided sampler",
    "sample.use_ema": "sample from EMA parameters",
    "guidance.method": "replacement | gradient",
    "guidance.lambda": "gradient weight (>= 0)",
    "guidance.direction": "audio_given_video | video_given_audio",
    "guidance.stride": "sampler stride for conditional sampling",
    "eval.extractor": "stats | randproj",
    "eval.modality": "audio | video | both",
    "eval.dim": "output dimension of randproj",
    "eval.seed": "projection seed of randproj",
    "paths.data": "dataset directory read by train",
    "paths.checkpoint": "checkpoint archive for train (resume), sample and sample-cond",
    "paths.condition": "condition dataset or sample directory for sample-cond",
    "paths.gen": "generated set for eval",
    "paths.ref": "reference set for eval",
}


def _defaults() -> dict:
    m = ModelConfig.desk()
    t = TrainConfig()
    r = SynthRanges()
    d = {"seed": 0}
    d.update({f"model.{k}": v for k, v in m.to_dict().items() if k != "dropout"})
    d.update({f"train.{f.name}": getattr(t, f.name) for f in fields(t) if f.name != "seed"})
    d.update({"schedule.T": 1000, "schedule.beta_start": 1e-4, "schedule.beta_end": 0.02,
              "schedule.variance": "beta"})
    d.update({"data.n": 256, "data.fps": 8.0})
    d.update({f"data.{k}": list(getattr(r, k)) for k in ("blob_freq", "tone_freq", "phase", "center_row",
                                                         "center_col", "color")})
    d.update({"sample.n": 4, "sample.stride": 10, "sample.use_ema": True})
    g = GuidanceConfig()
    d.update({"guidance.method": g.method, "guidance.lambda": g.lambda_guide,
              "guidance.direction": g.direction, "guidance.stride": 10})
    d.update({"eval.extractor": "stats", "eval.modality": "both", "eval.dim": 16, "eval.seed": 0})
    d.update({"paths.data": None, "paths.checkpoint": None, "paths.condition": None,
              "paths.gen": None, "paths.ref": None})
    return d


DEFAULTS = _defaults()
assert set(DEFAULTS) == set(KEY_DOCS), set(DEFAULTS) ^ set(KEY_DOCS)


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(key, v, default[0]) if default else v for v in value]
    return value


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path: Path | None = None, overrides: dict | None = None) -> "RunConfig":
        raw = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            try:
                raw = yaml.safe_load(text) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: not valid key-value text: {e}") from e
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: expected flat 'key: value' lines")
        flags = {k: str(v) if isinstance(v, Path) else v for k, v in (overrides or {}).items() if v is not None}
        return cls.from_dict({**raw, **flags})

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        values = dict(DEFAULTS)
        for k, v in raw.items():
            if isinstance(v, dict):
                raise ConfigError(f"{k}: nested values are not allowed")
            values[k] = _coerce(k, v, DEFAULTS[k])
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        return {k[len(prefix) + 1:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def model(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.section("model"), "dropout": self["train.dropout"]})

    def train(self) -> TrainConfig:
        return TrainConfig(**self.section("train"), seed=self["seed"])

    def schedule(self):
        return build_linear_schedule(self["schedule.T"], self["schedule.beta_start"],
                                     self["schedule.beta_end"], self["schedule.variance"])

    def guidance(self, method=None, lam=None, stride=None) -> GuidanceConfig:
        return GuidanceConfig(method=method or self["guidance.method"],
                              lambda_guide=self["guidance.lambda"] if lam is None else lam,
                              direction=self["guidance.direction"],
                              stride=stride or self["guidance.stride"])

    def synth_base(self) -> SynthParams:
        F, C, H, W = self.model().video_shape
        C_a, T_a = self.model().audio_shape
        if C != 3 or C_a != 1:
            raise ConfigError("synthetic data is RGB video with mono audio")
        fps = self["data.fps"]
        sr = fps * T_a / F
        if sr != int(sr):
            raise ConfigError(f"audio rate fps * T_a / F = {sr} is not an integer")
        return SynthParams(F=F, H=H, W=W, T_a=T_a, fps=fps, sr=int(sr))

    def synth_ranges(self) -> SynthRanges:
        return SynthRanges(**{k: tuple(self[f"data.{k}"]) for k in
                              ("blob_freq", "tone_freq", "phase", "center_row", "center_col", "color")})

    def validate(self) -> None:
        try:
            self.model().validate()
            self.train().validate()
            self.schedule()
            self.guidance().validate()
            ranges = self.synth_ranges()
            for k in ("blob_freq", "tone_freq", "phase", "center_row", "center_col", "color"):
                if len(self[f"data.{k}"]) != 2:
                    raise ConfigError(f"data.{k} must be [lo, hi]")
            ranges.validate()
            base = self.synth_base()
            if ranges.blob_freq[1] >= base.fps / 2 or ranges.tone_freq[1] >= base.sr / 2:
                raise ConfigError("data frequency ranges exceed the Nyquist limit")
            if ranges.color[0] < 0 or ranges.color[1] > 1:
                raise ConfigError("data.color must lie in [0, 1]")
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e
        if self["data.n"] < 1 or self["sample.n"] < 1 or self["sample.stride"] < 1:
            raise ConfigError("data.n, sample.n and sample.stride must be >= 1")
        if self["eval.extractor"] not in ("stats", "randproj"):
            raise ConfigError(f"unknown extractor {self['eval.extractor']!r}")
        if self["eval.modality"] not in ("audio", "video", "both") or self["eval.dim"] < 1:
            raise ConfigError("invalid eval settings")

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=True, default_flow_style=None)
