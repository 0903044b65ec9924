"""Synthetic paired clips whose audio/video alignment is known by construction.

Each clip shows a Gaussian blob on a black background whose brightness
follows the envelope ``0.5 * (1 + sin(2 pi f t + phase))``; the audio is a
sine carrier amplitude-modulated by the same envelope.  Frame ``k`` covers
the interval ``[k / fps, (k + 1) / fps)`` and displays the envelope at the
interval midpoint, so the per-frame audio RMS and the frame brightness are
in phase.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .media import MediaPair


@dataclass(frozen=True)
class SynthParams:
    F: int = 8
    H: int = 16
    W: int = 16
    T_a: int = 1024
    fps: float = 8.0
    sr: int = 1024
    blob_freq: float = 1.0
    tone_freq: float = 96.0
    blob_center: tuple[float, float] = (8.0, 8.0)
    blob_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    phase: float = 0.0

    def validate(self) -> "SynthParams":
        if min(self.F, self.H, self.W, self.T_a) < 1 or self.fps <= 0 or self.sr <= 0:
            raise ValueError("sizes and rates must be positive")
        if not math.isclose(self.T_a / self.sr, self.F / self.fps, rel_tol=1e-9):
            raise ValueError(f"audio lasts {self.T_a / self.sr}s but video lasts {self.F / self.fps}s")
        if not 0.0 <= self.blob_freq < self.fps / 2:
            raise ValueError(f"blob_freq {self.blob_freq} violates Nyquist for fps {self.fps}")
        if not 0.0 <= self.tone_freq < self.sr / 2:
            raise ValueError(f"tone_freq {self.tone_freq} violates Nyquist for sr {self.sr}")
        if any(not 0.0 <= c <= 1.0 for c in self.blob_color):
            raise ValueError("blob_color must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blob_center"] = list(self.blob_center)
        d["blob_color"] = list(self.blob_color)
        return d


def envelope(t: np.ndarray, freq: float, phase: float) -> np.ndarray:
    return 0.5 * (1.0 + np.sin(2.0 * np.pi * freq * t + phase))


def make_pair(p: SynthParams) -> MediaPair:
    p.validate()
    frame_t = (np.arange(p.F) + 0.5) / p.fps
    intensity = envelope(frame_t, p.blob_freq, p.phase)

    rows, cols = np.meshgrid(np.arange(p.H), np.arange(p.W), indexing="ij")
    sigma = p.H / 8.0
    blob = np.exp(-((rows - p.blob_center[0]) ** 2 + (cols - p.blob_center[1]) ** 2) / (2 * sigma ** 2))
    color = np.asarray(p.blob_color, dtype=np.float64)
    video = intensity[:, None, None, None] * color[None, :, None, None] * blob[None, None]

    sample_t = np.arange(p.T_a) / p.sr
    audio = envelope(sample_t, p.blob_freq, p.phase) * np.sin(2.0 * np.pi * p.tone_freq * sample_t)
    return MediaPair(video=video, audio=audio[None], fps=p.fps, sr=p.sr, meta={"params": p.to_dict()})


def frame_bounds(T_a: int, F: int) -> np.ndarray:
    return np.round(np.arange(F + 1) * T_a / F).astype(int)


def video_trace(pair: MediaPair) -> np.ndarray:
    return pair.video.reshape(pair.frames, -1).mean(axis=1)


def audio_envelope(pair: MediaPair) -> np.ndarray:
    """RMS of the audio samples falling in each frame's interval."""
    bounds = frame_bounds(pair.audio.shape[1], pair.frames)
    sq = pair.audio ** 2
    return np.array([math.sqrt(sq[:, lo:hi].mean()) if hi > lo else 0.0
                     for lo, hi in zip(bounds[:-1], bounds[1:])])


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    nx, ny = np.sqrt((x ** 2).sum()), np.sqrt((y ** 2).sum())
    if nx <= 1e-12 or ny <= 1e-12:
        return 0.0
    return float(np.clip((x * y).sum() / (nx * ny), -1.0, 1.0))


def alignment_score(pair: MediaPair) -> float:
    """Correlation between per-frame brightness and per-frame audio RMS; 0 if either is constant."""
    if not pair.durations_match(rel_tol=1e-6):
        raise ValueError("audio and video durations differ")
    return pearson(video_trace(pair), audio_envelope(pair))


@dataclass(frozen=True)
class SynthRanges:
    """Uniform sampling ranges (lo, hi) for the free clip parameters."""

    blob_freq: tuple[float, float] = (0.5, 2.0)
    tone_freq: tuple[float, float] = (64.0, 128.0)
    phase: tuple[float, float] = (0.0, 2 * math.pi)
    center_row: tuple[float, float] = (6.0, 10.0)
    center_col: tuple[float, float] = (6.0, 10.0)
    color: tuple[float, float] = (0.6, 1.0)

    def validate(self) -> "SynthRanges":
        for name, (lo, hi) in asdict(self).items():
            if not lo <= hi:
                raise ValueError(f"empty range for {name}: ({lo}, {hi})")
        return self

    def shifted(self, blob_freq: float = 1.5, tone_factor: float = 2.0) -> "SynthRanges":
        """Ranges moved away from the defaults, used as a mismatched reference."""
        return replace(self, blob_freq=(self.blob_freq[0] + blob_freq, self.blob_freq[1] + blob_freq),
                       tone_freq=(self.tone_freq[0] * tone_factor, self.tone_freq[1] * tone_factor))


def draw_params(rng: np.random.Generator, ranges: SynthRanges, base: SynthParams) -> SynthParams:
    u = lambda r: float(rng.uniform(r[0], r[1]))  # noqa: E731
    return replace(
        base,
        blob_freq=u(ranges.blob_freq),
        tone_freq=u(ranges.tone_freq),
        phase=u(ranges.phase),
        blob_center=(u(ranges.center_row), u(ranges.center_col)),
        blob_color=tuple(u(ranges.color) for _ in range(3)),
    )


def make_dataset(n: int, seed: int = 0, ranges: SynthRanges | None = None,
                 base: SynthParams | None = None) -> list[MediaPair]:
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    ranges = (ranges or SynthRanges()).validate()
    base = base or SynthParams()
    rng = np.random.default_rng(seed)
    params = [draw_params(rng, ranges, base).validate() for _ in range(n)]
    return [make_pair(p) for p in params]


def shuffled_pairs(pairs: list[MediaPair], shift: int = 1) -> list[MediaPair]:
    """Pair video ``i`` with audio ``i + shift`` (mod n), so no clip keeps its own audio."""
    n = len(pairs)
    if n < 2:
        raise ValueError("need at least two pairs to shuffle")
    return [MediaPair(video=pairs[i].video, audio=pairs[(i + shift) % n].audio, fps=pairs[i].fps,
                      sr=pairs[i].sr) for i in range(n)]


def mean_alignment(pairs: list[MediaPair]) -> float:
    return float(np.mean([alignment_score(p) for p in pairs]))
