"""``mmdiff`` command line: make-data, train, sample, sample-cond, eval.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import torch

from . import __version__
from .conditional import GuidanceConfig, conditional_sample
from .diffusion import sample_joint
from .media import MANIFEST, read_dataset, read_sample, write_sample
from .metrics import extract_features, fd_report, get_extractor, write_report
from .synth import make_dataset
from .config import RunConfig
from .trainer import load_checkpoint, new_trainer, restore_trainer, save_checkpoint
from .unet import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(RuntimeError):
    pass


def set_threads() -> None:
    value = os.environ.get("MMDIFF_NUM_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"MMDIFF_NUM_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("MMDIFF_NUM_THREADS must be >= 1")
    torch.set_num_threads(n)


def load_config(args, **overrides) -> RunConfig:
    return RunConfig.load(args.config, {"seed": args.seed, **overrides})


def commit_dir(tmp: Path, out: Path) -> None:
    """Move a fully written temporary directory into place."""
    if out.exists():
        if any(out.iterdir()):
            raise RuntimeFailure(f"output directory {out} is not empty")
        out.rmdir()
    tmp.replace(out)


class staging:
    """Write into a sibling temporary directory; only a complete result is moved to ``out``."""

    def __init__(self, out: Path):
        self.out = Path(out)

    def __enter__(self) -> Path:
        if self.out.exists() and any(self.out.iterdir()):
            raise RuntimeFailure(f"output directory {self.out} is not empty")
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            commit_dir(self.tmp, self.out)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def write_run_info(directory: Path, cfg: RunConfig, command: str, **extra) -> None:
    (directory / "config.yaml").write_text(cfg.dump())
    info = {"command": command, "config_hash": cfg.config_hash(), "version": __version__, **extra}
    (directory / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_make_data(args) -> None:
    cfg = load_config(args, **{"data.n": args.n})
    pairs = make_dataset(cfg["data.n"], cfg["seed"], cfg.synth_ranges(), cfg.synth_base())
    with staging(args.out) as tmp:
        for i, pair in enumerate(pairs):
            pair.meta["config_hash"] = cfg.config_hash()
            write_sample(tmp / f"sample_{i:04d}", pair)
        write_run_info(tmp, cfg, "make-data", n=len(pairs), seed=cfg["seed"])
    print(f"wrote {len(pairs)} pairs to {args.out}")


def cmd_train(args) -> None:
    cfg = load_config(args, **{"paths.data": args.data, "paths.checkpoint": args.checkpoint,
                               "train.steps": args.steps})
    if not cfg["paths.data"]:
        raise ConfigError("train needs a dataset (--data or paths.data)")
    pairs = read_dataset(Path(cfg["paths.data"]))
    model_cfg, sched, train_cfg = cfg.model(), cfg.schedule(), cfg.train()
    if any(p.video.shape != tuple(model_cfg.video_shape) or p.audio.shape != tuple(model_cfg.audio_shape)
           for p in pairs):
        raise RuntimeFailure("dataset media shapes do not match the model config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.npz"
    if cfg["paths.checkpoint"]:
        trainer = restore_trainer(load_checkpoint(cfg["paths.checkpoint"], expected=model_cfg), sched,
                                  train_cfg)
    else:
        trainer = new_trainer(model_cfg, sched, train_cfg)
    trainer.meta = {"run_config_hash": cfg.config_hash()}
    start = trainer.step
    trainer.run(pairs, train_cfg.steps, log_path=out / "train.log", ckpt_path=ckpt_path)
    save_checkpoint(trainer, ckpt_path)
    write_run_info(out, cfg, "train", start_step=start, end_step=trainer.step)
    print(f"trained steps {start + 1}..{trainer.step}; checkpoint {ckpt_path}")


def _load_model(cfg: RunConfig):
    if not cfg["paths.checkpoint"]:
        raise ConfigError("a checkpoint is required (--checkpoint or paths.checkpoint)")
    ckpt = load_checkpoint(cfg["paths.checkpoint"], expected=cfg.model())
    return ckpt, ckpt.build(use_ema=cfg["sample.use_ema"])


def _write_pairs(out: Path, pairs, cfg: RunConfig, command: str, **extra) -> None:
    with staging(out) as tmp:
        for i, p in enumerate(pairs):
            p.meta.update({"config_hash": cfg.config_hash(), **extra})
            write_sample(tmp / f"sample_{i:04d}", p)
        write_run_info(tmp, cfg, command, n=len(pairs), **extra)


def cmd_sample(args) -> None:
    cfg = load_config(args, **{"paths.checkpoint": args.checkpoint, "sample.n": args.n,
                               "sample.stride": args.stride})
    ckpt, model = _load_model(cfg)
    base = cfg.synth_base()
    g = torch.Generator().manual_seed(cfg["seed"])
    pairs = sample_joint(model, ckpt.model_cfg.audio_shape, ckpt.model_cfg.video_shape, cfg["sample.n"],
                         cfg.schedule(), g, stride=cfg["sample.stride"], fps=base.fps, sr=base.sr)
    _write_pairs(Path(args.out), pairs, cfg, "sample", seed=cfg["seed"], stride=cfg["sample.stride"],
                 checkpoint_step=ckpt.step)
    print(f"wrote {len(pairs)} samples to {args.out}")


def read_conditions(path: Path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"condition path {path} does not exist")
    if (path / MANIFEST).is_file():
        return [read_sample(path)]
    return read_dataset(path)


def cmd_sample_cond(args) -> None:
    cfg = load_config(args, **{"paths.checkpoint": args.checkpoint, "paths.condition": args.condition,
                               "guidance.method": args.method, "guidance.lambda": args.lam,
                               "guidance.stride": args.stride})
    if not cfg["paths.condition"]:
        raise ConfigError("sample-cond needs a condition (--condition or paths.condition)")
    conditions = read_conditions(cfg["paths.condition"])
    if args.n is not None:
        conditions = conditions[:args.n]
    ckpt, model = _load_model(cfg)
    gcfg: GuidanceConfig = cfg.guidance().validate()
    g = torch.Generator().manual_seed(cfg["seed"])
    pairs = conditional_sample(model, conditions, gcfg, cfg.schedule(), g)
    _write_pairs(Path(args.out), pairs, cfg, "sample-cond", seed=cfg["seed"], method=gcfg.method,
                 lambda_guide=gcfg.lambda_guide, direction=gcfg.direction, stride=gcfg.stride,
                 checkpoint_step=ckpt.step)
    print(f"wrote {len(pairs)} conditional samples to {args.out}")


def cmd_eval(args) -> None:
    cfg = load_config(args, **{"paths.gen": args.gen, "paths.ref": args.ref, "eval.extractor": args.extractor})
    if not cfg["paths.gen"] or not cfg["paths.ref"]:
        raise ConfigError("eval needs --gen and --ref")
    gen, ref = read_dataset(Path(cfg["paths.gen"])), read_dataset(Path(cfg["paths.ref"]))
    shapes = lambda ps: {(p.video.shape, p.audio.shape) for p in ps}  # noqa: E731
    if shapes(gen) != shapes(ref) or len(shapes(gen)) != 1:
        raise RuntimeFailure(f"media shapes differ: gen {sorted(shapes(gen))} vs ref {sorted(shapes(ref))}")
    ex = get_extractor(cfg["eval.extractor"], cfg["eval.modality"], cfg["eval.dim"], cfg["eval.seed"])
    report = fd_report(extract_features(gen, ex), extract_features(ref, ex),
                       {"config_hash": cfg.config_hash(), "gen": str(cfg["paths.gen"]),
                        "ref": str(cfg["paths.ref"])})
    out = Path(args.out)
    text_path, _ = write_report(out / "report.txt", report)
    print(f"fd_raw = {report['fd_raw']!r}  fd_scaled = {report['fd_scaled']!r}  ({text_path})")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key: value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")

    p = argparse.ArgumentParser(prog="mmdiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", parents=[common], help="write a synthetic paired dataset")
    s.add_argument("--n", type=int, help="number of pairs")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", parents=[common], help="train or resume a model")
    s.add_argument("--data", type=Path)
    s.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="unconditional joint samples")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--n", type=int)
    s.add_argument("--stride", type=int)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("sample-cond", parents=[common], help="fill in one modality given the other")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--condition", type=Path, help="sample directory or dataset of conditions")
    s.add_argument("--method", choices=("replacement", "gradient"))
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--stride", type=int)
    s.add_argument("--n", type=int, help="use only the first n conditions")
    s.set_defaults(func=cmd_sample_cond)

    s = sub.add_parser("eval", parents=[common], help="Frechet distance between two sets")
    s.add_argument("--gen", type=Path)
    s.add_argument("--ref", type=Path)
    s.add_argument("--extractor", choices=("stats", "randproj"))
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_threads()
        args.func(args)
    except ConfigError as e:
        print(f"mmdiff: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"mmdiff: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
