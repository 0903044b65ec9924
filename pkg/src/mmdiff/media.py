"""Paired audio/video containers and their on-disk format.

A sample directory holds ``frame_000.png ...`` (one RGB or grayscale PNG per
frame), ``audio.wav`` (16-bit PCM, mono or multi-channel) and
``manifest.json`` with free-form metadata (fps, sample rate, params, config
hash).  Both codecs are bit-exact and deterministic, so repeated writes of
the same arrays produce identical bytes.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from PIL import Image

MANIFEST = "manifest.json"
AUDIO_FILE = "audio.wav"


@dataclass
class MediaPair:
    """One video clip (F, C, H, W) in [0, 1] plus its audio (C_a, T_a) in [-1, 1]."""

    video: np.ndarray
    audio: np.ndarray
    fps: float
    sr: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.video.ndim != 4:
            raise ValueError(f"video must be (F, C, H, W), got shape {self.video.shape}")
        if self.audio.ndim != 2:
            raise ValueError(f"audio must be (C_a, T_a), got shape {self.audio.shape}")
        if self.video.size == 0 or self.audio.size == 0:
            raise ValueError("empty media")

    @property
    def frames(self) -> int:
        return self.video.shape[0]

    @property
    def duration_video(self) -> float:
        return self.frames / self.fps

    @property
    def duration_audio(self) -> float:
        return self.audio.shape[1] / self.sr

    def durations_match(self, rel_tol: float = 1e-9) -> bool:
        return abs(self.duration_video - self.duration_audio) <= rel_tol * max(self.duration_video, 1e-12)


# -- normalization -----------------------------------------------------------

def normalize_video(video: np.ndarray) -> np.ndarray:
    return video * 2.0 - 1.0


def denormalize_video(video: np.ndarray) -> np.ndarray:
    return np.clip((video + 1.0) * 0.5, 0.0, 1.0)


def denormalize_audio(audio: np.ndarray) -> np.ndarray:
    return np.clip(audio, -1.0, 1.0)


def to_model_tensors(pairs: list[MediaPair], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack pairs into normalized (B, C_a, T_a) audio and (B, F, C, H, W) video tensors."""
    if not pairs:
        raise ValueError("no pairs to stack")
    audio = np.stack([p.audio for p in pairs])
    video = np.stack([normalize_video(p.video) for p in pairs])
    return torch.as_tensor(audio, dtype=dtype), torch.as_tensor(video, dtype=dtype)


def from_model_tensors(audio: torch.Tensor, video: torch.Tensor, fps: float, sr: int,
                       meta: dict | None = None) -> list[MediaPair]:
    a = audio.detach().cpu().double().numpy()
    v = video.detach().cpu().double().numpy()
    return [
        MediaPair(video=denormalize_video(v[i]), audio=denormalize_audio(a[i]), fps=fps, sr=sr,
                  meta=dict(meta or {}))
        for i in range(a.shape[0])
    ]


# -- codecs ------------------------------------------------------------------

def quantize_audio(audio: np.ndarray) -> np.ndarray:
    return np.round(np.clip(audio, -1.0, 1.0) * 32767.0).astype("<i2")


def write_wav(path: Path, audio: np.ndarray, sr: int) -> None:
    pcm = quantize_audio(audio)  # (C_a, T_a)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(pcm.shape[0])
        w.setsampwidth(2)
        w.setframerate(int(sr))
        w.writeframes(np.ascontiguousarray(pcm.T).tobytes())


def read_wav(path: Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        channels, sr, n = w.getnchannels(), w.getframerate(), w.getnframes()
        raw = w.readframes(n)
    pcm = np.frombuffer(raw, dtype="<i2").reshape(n, channels).T
    return pcm.astype(np.float64) / 32767.0, sr


def quantize_frame(frame: np.ndarray) -> np.ndarray:
    """(C, H, W) float in [0, 1] -> (H, W[, C]) uint8."""
    img = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.shape[0] == 1:
        return img[0]
    return np.moveaxis(img, 0, -1)


def write_png(path: Path, frame: np.ndarray) -> None:
    img = quantize_frame(frame)
    mode = "L" if img.ndim == 2 else {3: "RGB", 4: "RGBA"}[img.shape[-1]]
    Image.fromarray(img, mode=mode).save(path, format="PNG", optimize=False)


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.moveaxis(arr, -1, 0)


def write_sample(directory: Path, pair: MediaPair) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(pair.frames):
        write_png(directory / f"frame_{k:03d}.png", pair.video[k])
    write_wav(directory / AUDIO_FILE, pair.audio, pair.sr)
    manifest = {"fps": pair.fps, "sr": pair.sr, "video_shape": list(pair.video.shape),
                "audio_shape": list(pair.audio.shape), **pair.meta}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_sample(directory: Path) -> MediaPair:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{directory}: no {MANIFEST}")
    manifest = json.loads(manifest_path.read_text())
    frames = sorted(directory.glob("frame_*.png"))
    if not frames:
        raise FileNotFoundError(f"{directory}: no frames")
    video = np.stack([read_png(f) for f in frames])
    audio, sr = read_wav(directory / AUDIO_FILE)
    meta = {k: v for k, v in manifest.items() if k not in ("fps", "sr", "video_shape", "audio_shape")}
    return MediaPair(video=video, audio=audio, fps=float(manifest["fps"]), sr=int(sr), meta=meta)


def sample_dirs(root: Path) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and (p / MANIFEST).is_file())


def read_dataset(root: Path) -> list[MediaPair]:
    dirs = sample_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"{root}: no sample directories")
    return [read_sample(d) for d in dirs]
