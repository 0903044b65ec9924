"""Training loop: per-example uniform t, Adam, gradient clipping, EMA, checkpoints."""

from __future__ import annotations

import copy
import json
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffusion import DivergenceError, NoiseSchedule, eps_loss_terms
from .media import MediaPair, to_model_tensors
from .unet import ModelConfig, build_model

SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch: int = 8
    steps: int = 5000
    ema_decay: float = 0.995
    weight_decay: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    checkpoint_every: int = 1000
    grad_clip: float = 1.0

    def validate(self) -> "TrainConfig":
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.batch < 1 or self.steps < 0 or self.checkpoint_every < 1:
            raise ValueError("batch and checkpoint_every must be >= 1, steps >= 0")
        if self.weight_decay < 0 or not 0.0 <= self.dropout < 1.0 or self.grad_clip <= 0:
            raise ValueError("invalid weight_decay, dropout or grad_clip")
        return self


@dataclass
class StepResult:
    step: int
    loss: float
    loss_audio: float
    loss_video: float
    grad_norm: float
    t: torch.Tensor


def stack_batch(pairs: list[MediaPair], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    if not pairs:
        raise ValueError("empty batch")
    shapes = {(p.audio.shape, p.video.shape) for p in pairs}
    if len(shapes) > 1:
        raise ValueError(f"non-uniform shapes in batch: {sorted(shapes)}")
    return to_model_tensors(pairs, dtype=dtype)


class Trainer:
    """Owns the live model, its EMA shadow, the optimizer and the run's RNG."""

    def __init__(self, model: nn.Module, sched: NoiseSchedule, cfg: TrainConfig,
                 model_cfg: ModelConfig | None = None):
        self.cfg = cfg.validate()
        self.model = model
        self.model_cfg = model_cfg
        self.sched = sched
        self.ema = copy.deepcopy(model).eval()
        for p in self.ema.parameters():
            p.requires_grad_(False)
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.t_counts = torch.zeros(sched.T, dtype=torch.long)
        self.meta: dict = {}

    def draw_batch_indices(self, n: int) -> torch.Tensor:
        return torch.randint(0, n, (self.cfg.batch,), generator=self.generator)

    def train_step(self, audio0: torch.Tensor, video0: torch.Tensor) -> StepResult:
        self.model.train()
        t = torch.randint(1, self.sched.T + 1, (audio0.shape[0],), generator=self.generator)
        try:
            la, lv = eps_loss_terms(self.model, audio0, video0, t, self.sched, self.generator)
        except DivergenceError:
            raise DivergenceError(self.diagnostic(t, float("nan"), float("nan"))) from None
        loss = la + lv
        if not torch.isfinite(loss):
            raise DivergenceError(self.diagnostic(t, la, lv))
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = float(nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip))
        if not math.isfinite(grad_norm):
            raise DivergenceError(self.diagnostic(t, la, lv))
        self.opt.step()
        self.update_ema()
        self.step += 1
        self.t_counts += torch.bincount(t - 1, minlength=self.sched.T)
        return StepResult(self.step, loss.item(), la.item(), lv.item(), grad_norm, t)

    @torch.no_grad()
    def update_ema(self) -> None:
        d = self.cfg.ema_decay
        for e, p in zip(self.ema.parameters(), self.model.parameters()):
            e.mul_(d).add_(p.detach(), alpha=1.0 - d)
        for e, b in zip(self.ema.buffers(), self.model.buffers()):
            e.copy_(b)

    def diagnostic(self, t, la, lv) -> str:
        pnorm = math.sqrt(sum(float(p.detach().double().pow(2).sum()) for p in self.model.parameters()))
        grads = [p.grad for p in self.model.parameters() if p.grad is not None]
        gnorm = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads)) if grads else float("nan")
        return (f"non-finite loss at step {self.step + 1}: audio={float(la)} video={float(lv)} "
                f"t={t.tolist()} param_norm={pnorm:.6g} last_grad_norm={gnorm:.6g}")

    def run(self, pairs: list[MediaPair], steps: int, log_path: Path | None = None,
            ckpt_path: Path | None = None, callback=None) -> list[StepResult]:
        """Train for ``steps`` more steps on ``pairs``; returns the per-step results."""
        audio, video = stack_batch(pairs)
        results = []
        log = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                t0 = time.perf_counter()
                idx = self.draw_batch_indices(len(pairs))
                r = self.train_step(audio[idx], video[idx])
                results.append(r)
                if log:
                    log.write(f"step={r.step} loss={r.loss:.6f} grad_norm={r.grad_norm:.6f} "
                              f"wall={time.perf_counter() - t0:.4f}\n")
                    log.flush()
                if ckpt_path and r.step % self.cfg.checkpoint_every == 0:
                    save_checkpoint(self, ckpt_path)
                if callback:
                    callback(r)
        finally:
            if log:
                log.close()
        return results


def smoothed(losses, window: int = 100) -> np.ndarray:
    """Trailing moving average; entry i averages losses[max(0, i-window+1) : i+1]."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# -- checkpoints ---------------------------------------------------------------

def _tensor_arrays(prefix: str, state: dict) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in state.items()}


def save_checkpoint(trainer: Trainer, path: Path) -> None:
    """Single ``.npz`` archive: parameters, EMA shadow, optimizer moments, RNG states, manifest."""
    if trainer.model_cfg is None:
        raise CheckpointError("trainer has no model config to record")
    arrays = _tensor_arrays("param", trainer.model.state_dict())
    arrays.update(_tensor_arrays("ema", trainer.ema.state_dict()))
    opt_state = trainer.opt.state_dict()
    for i, st in opt_state["state"].items():
        for k, v in st.items():
            arrays[f"opt/{i}/{k}"] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
    arrays["rng/generator"] = trainer.generator.get_state().numpy()
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    arrays["t_counts"] = trainer.t_counts.numpy()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "step": trainer.step,
        "model_config": trainer.model_cfg.to_dict(),
        "config_hash": trainer.model_cfg.config_hash(),
        "train_config": asdict(trainer.cfg),
        "schedule": trainer.sched.to_dict(),
        "has_ema": True,
        **trainer.meta,
    }
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write_npz(tmp, arrays)
    tmp.replace(path)


def write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """``np.savez`` layout with fixed zip timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asarray(arrays[name]), allow_pickle=False)


@dataclass
class Checkpoint:
    manifest: dict
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict[str, torch.Tensor]
    ema: dict[str, torch.Tensor]
    opt: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    rng: dict[str, torch.Tensor] = field(default_factory=dict)
    t_counts: torch.Tensor | None = None

    @property
    def step(self) -> int:
        return int(self.manifest["step"])

    def build(self, use_ema: bool = True, dtype=torch.float32) -> nn.Module:
        model = build_model(self.model_cfg, dtype=dtype)
        model.load_state_dict(self.ema if use_ema else self.params, strict=True)
        return model.eval()


def load_checkpoint(path: Path, expected: ModelConfig | None = None) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if "manifest" not in data:
        raise CheckpointError(f"{path}: missing manifest")
    try:
        manifest = json.loads(data.pop("manifest").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {manifest.get('schema_version')} != {SCHEMA_VERSION}")
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    if model_cfg.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: stored model config does not match its hash")
    if expected is not None and expected.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: model config hash {manifest['config_hash']} != expected "
                              f"{expected.config_hash()}")
    groups: dict[str, dict] = {"param": {}, "ema": {}, "opt": {}, "rng": {}}
    t_counts = None
    for k, v in data.items():
        if k == "t_counts":
            t_counts = torch.from_numpy(v)
            continue
        head, rest = k.split("/", 1)
        groups[head][rest] = torch.from_numpy(v)
    opt: dict[str, dict] = {}
    for k, v in groups["opt"].items():
        i, name = k.split("/", 1)
        opt.setdefault(i, {})[name] = v
    return Checkpoint(manifest, model_cfg, TrainConfig(**manifest["train_config"]), groups["param"],
                      groups["ema"], opt, groups["rng"], t_counts)


def restore_trainer(ckpt: Checkpoint, sched: NoiseSchedule, cfg: TrainConfig | None = None) -> Trainer:
    """Rebuild a trainer that continues exactly where the checkpoint left off."""
    model = build_model(ckpt.model_cfg)
    model.load_state_dict(ckpt.params, strict=True)
    trainer = Trainer(model, sched, cfg or ckpt.train_cfg, ckpt.model_cfg)
    trainer.ema.load_state_dict(ckpt.ema, strict=True)
    state = trainer.opt.state_dict()
    state["state"] = {int(i): {k: (v.clone() if v.ndim else v.clone()) for k, v in st.items()}
                      for i, st in ckpt.opt.items()}
    trainer.opt.load_state_dict(state)
    if "generator" in ckpt.rng:
        trainer.generator.set_state(ckpt.rng["generator"].clone())
    if "torch" in ckpt.rng:
        torch.set_rng_state(ckpt.rng["torch"].clone())
    if ckpt.t_counts is not None:
        trainer.t_counts = ckpt.t_counts.clone()
    trainer.step = ckpt.step
    return trainer


def new_trainer(model_cfg: ModelConfig, sched: NoiseSchedule, cfg: TrainConfig) -> Trainer:
    """Fresh model (seeded by ``cfg.seed``) and trainer; also seeds the global RNG used by dropout."""
    torch.manual_seed(cfg.seed)
    model = build_model(model_cfg, seed=cfg.seed)
    return Trainer(model, sched, cfg, model_cfg)
