"""Frechet distance between feature sets, with two built-in toy extractors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .media import MediaPair
from .synth import audio_envelope, video_trace

FAD_SCALE = 1e4
NEG_EIG_TOL = 1e-8


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise MetricError(f"features must be a non-empty (n, d) matrix, got {self.features.shape}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.features.astype(np.float64)
        mu = x.mean(axis=0)
        if self.n < 2:
            return mu, np.zeros((self.d, self.d))
        return mu, np.atleast_2d(np.cov(x, rowvar=False))


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(sa: np.ndarray, sb: np.ndarray) -> float:
    """Tr((Sa Sb)^{1/2}) via the eigenvalues of the symmetric Sa^{1/2} Sb Sa^{1/2}.

    Raises ``np.linalg.LinAlgError`` if an eigenvalue is below the negative tolerance.
    """
    root = psd_sqrt(sa)
    m = root @ sb @ root
    w = np.linalg.eigvalsh((m + m.T) / 2)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -NEG_EIG_TOL * scale:
        raise np.linalg.LinAlgError(f"product has eigenvalue {w.min():.3g}")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_from_moments(mu_a, sigma_a, mu_b, sigma_b) -> tuple[float, bool]:
    """Returns (distance, regularized)."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    sigma_a, sigma_b = np.atleast_2d(sigma_a), np.atleast_2d(sigma_b)
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape:
        raise MetricError("feature dimensions differ")
    if not (np.isfinite(sigma_a).all() and np.isfinite(sigma_b).all()):
        raise MetricError("non-finite covariance")
    d = mu_a.shape[0]
    diff = float(((mu_a - mu_b) ** 2).sum())
    regularized = False
    try:
        tr = trace_sqrt_product(sigma_a, sigma_b)
    except np.linalg.LinAlgError:
        regularized = True
        eye = np.eye(d)
        sigma_a = sigma_a + 1e-6 * np.trace(sigma_a) / d * eye
        sigma_b = sigma_b + 1e-6 * np.trace(sigma_b) / d * eye
        try:
            tr = trace_sqrt_product(sigma_a, sigma_b)
        except np.linalg.LinAlgError as e:
            raise MetricError(f"covariance product is not PSD after regularization: {e}") from e
    fd = diff + float(np.trace(sigma_a) + np.trace(sigma_b)) - 2.0 * tr
    return max(fd, 0.0), regularized


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    return frechet_details(a, b)["fd"]


def frechet_details(a: FeatureSet, b: FeatureSet) -> dict:
    if a.extractor_id != b.extractor_id:
        raise MetricError(f"extractor mismatch: {a.extractor_id} vs {b.extractor_id}")
    if a.d != b.d:
        raise MetricError(f"feature dimension mismatch: {a.d} vs {b.d}")
    fd, reg = frechet_from_moments(*a.moments(), *b.moments())
    return {"fd": fd, "regularized": reg, "n_a": a.n, "n_b": b.n, "d": a.d,
            "low_rank": min(a.n, b.n) < a.d + 1}


# -- extractors ----------------------------------------------------------------

class Extractor(Protocol):
    dim: int
    extractor_id: str

    def __call__(self, pair: MediaPair) -> np.ndarray: ...


def _select(pair: MediaPair, modality: str) -> np.ndarray:
    parts = {"audio": [pair.audio], "video": [pair.video], "both": [pair.audio, pair.video]}[modality]
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


class RandomProjection:
    """Fixed Gaussian projection of the flattened media, scaled by 1/sqrt(input dim)."""

    def __init__(self, dim: int = 16, seed: int = 0, modality: str = "both"):
        if dim < 1 or modality not in ("audio", "video", "both"):
            raise MetricError("invalid projection settings")
        self.dim, self.seed, self.modality = dim, seed, modality
        self.extractor_id = f"randproj-{modality}-d{dim}-s{seed}"
        self._matrix: np.ndarray | None = None

    def matrix(self, in_dim: int) -> np.ndarray:
        if self._matrix is None or self._matrix.shape[0] != in_dim:
            rng = np.random.default_rng(self.seed)
            self._matrix = rng.standard_normal((in_dim, self.dim)) / math.sqrt(in_dim)
        return self._matrix

    def __call__(self, pair: MediaPair) -> np.ndarray:
        x = _select(pair, self.modality)
        return x @ self.matrix(x.shape[0])


def lag1_autocorr(x: np.ndarray) -> float:
    x = x - x.mean()
    den = float((x ** 2).sum())
    return float((x[:-1] * x[1:]).sum() / den) if den > 1e-12 and len(x) > 1 else 0.0


def standardized_moment(x: np.ndarray, k: int) -> float:
    s = x.std()
    return float(((x - x.mean()) ** k).mean() / s ** k) if s > 1e-12 else 0.0


def spectral_centroid(audio: np.ndarray, sr: int) -> float:
    """Magnitude-weighted mean frequency, as a fraction of Nyquist."""
    mag = np.abs(np.fft.rfft(audio, axis=-1)).sum(axis=0)
    freqs = np.fft.rfftfreq(audio.shape[-1], d=1.0 / sr)
    total = float(mag.sum())
    return float((mag * freqs).sum() / total / (sr / 2)) if total > 1e-12 else 0.0


class HandcraftedStats:
    """Envelope moments and spectral centroid for audio; per-frame intensity stats for video."""

    AUDIO_NAMES = ("env_mean", "env_std", "env_skew", "env_lag1", "centroid")
    VIDEO_NAMES = ("int_mean", "int_std", "int_min", "int_max", "int_lag1")

    def __init__(self, modality: str = "both"):
        if modality not in ("audio", "video", "both"):
            raise MetricError(f"unknown modality {modality!r}")
        self.modality = modality
        self.names = (self.AUDIO_NAMES if modality != "video" else ()) + \
                     (self.VIDEO_NAMES if modality != "audio" else ())
        self.dim = len(self.names)
        self.extractor_id = f"stats-{modality}-d{self.dim}"

    def __call__(self, pair: MediaPair) -> np.ndarray:
        out = []
        if self.modality != "video":
            env = audio_envelope(pair)
            out += [env.mean(), env.std(), standardized_moment(env, 3), lag1_autocorr(env),
                    spectral_centroid(pair.audio, pair.sr)]
        if self.modality != "audio":
            tr = video_trace(pair)
            out += [tr.mean(), tr.std(), tr.min(), tr.max(), lag1_autocorr(tr)]
        return np.asarray(out, dtype=np.float64)


def get_extractor(name: str, modality: str = "both", dim: int = 16, seed: int = 0) -> Extractor:
    if name == "stats":
        return HandcraftedStats(modality)
    if name == "randproj":
        return RandomProjection(dim, seed, modality)
    raise MetricError(f"unknown extractor {name!r} (choose 'stats' or 'randproj')")


def extract_features(pairs: list[MediaPair], extractor: Extractor) -> FeatureSet:
    if not pairs:
        raise MetricError("no media to extract features from")
    shapes = {(p.audio.shape, p.video.shape) for p in pairs}
    if len(shapes) > 1:
        raise MetricError(f"media shapes differ within the set: {sorted(shapes)}")
    feats = np.stack([extractor(p) for p in pairs])
    if feats.shape[1] != extractor.dim:
        raise MetricError(f"extractor produced {feats.shape[1]} features, declared {extractor.dim}")
    return FeatureSet(feats, extractor.extractor_id)


# -- reports -------------------------------------------------------------------

def fd_report(gen: FeatureSet, ref: FeatureSet, extra: dict | None = None) -> dict:
    det = frechet_details(gen, ref)
    report = {
        "extractor_id": gen.extractor_id,
        "n_gen": det["n_a"],
        "n_ref": det["n_b"],
        "d": det["d"],
        "fd_raw": det["fd"],
        "fd_scaled": det["fd"] * FAD_SCALE,
        "fd_scale": FAD_SCALE,
        "regularized": det["regularized"],
        "low_rank": det["low_rank"],
    }
    report.update(extra or {})
    return report


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)


def write_report(path: Path, report: dict) -> tuple[Path, Path]:
    """Write ``key = value`` text to ``path`` and the same content as JSON next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {_fmt(report[k])}\n" for k in sorted(report)))
    json_path = path.with_suffix(".json") if path.suffix != ".json" else path.with_suffix(".report.json")
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path, json_path
