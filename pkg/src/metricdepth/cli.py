"""Command-line entry point: generate, train, eval, infer, train-fov, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
from PIL import Image

from . import __version__
from .ablations import (
    ABLATIONS,
    ExperimentConfig,
    FovRegressorExperiment,
    Workspace,
    config_hash,
    fov_regressor_experiment,
    run_ablation,
)
from .camera import CameraSpec, fov_from_cond, fov_to_cond
from .codec import CodecMode, DepthCodecConfig, DepthMap, EmptyDepthError
from .config import ConfigError, RunConfig, apply_overrides, load_run_config
from .dataset import DatasetError, read_dataset, read_manifest, read_ppm, write_dataset, write_pfm
from .metrics import EmptyEvaluationError, EvalProtocol, csv_rows, evaluate_split
from .model import CheckpointError, Denoiser, load_checkpoint, read_meta, save_checkpoint
from .synth import REGIME_RANGE, generate_samples
from .training import (
    OPTIMIZER_INFO,
    FovRegressorConfig,
    NumericError,
    estimate_fov_cond,
    infer_depth,
    load_regressor,
    predict_samples,
    save_regressor,
    train_denoiser,
    train_fov_regressor,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PREVIEW_COLORMAP = "turbo"

log = logging.getLogger("metricdepth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def provenance(command: str, config: dict, seeds: dict) -> dict:
    return {
        "command": command,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "code_version": _code_version(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def _write_provenance(out: Path, prov: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "provenance.json").write_text(json.dumps(prov, indent=1))
    print(f"# provenance config_hash={prov['config_hash']} seeds={prov['seeds']} version={prov['code_version']}")


def parse_pair(text: str, sep: str, cast=float) -> tuple:
    parts = text.lower().split(sep)
    if len(parts) != 2:
        raise UsageError(f"expected two values separated by {sep!r}, got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError as e:
        raise UsageError(f"bad value {text!r}: {e}") from e


def colorize(depth: DepthMap) -> np.ndarray:
    """8-bit RGB preview: per-image min/max over valid pixels, turbo colormap,
    invalid pixels black.  Visual only."""
    v = depth.values
    m = depth.valid_mask
    if m.any():
        lo, hi = float(v[m].min()), float(v[m].max())
        u = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    else:
        u = np.zeros_like(v)
    u8 = np.clip(np.round(u * 255), 0, 255).astype(np.uint8)
    bgr = cv2.applyColorMap(u8, cv2.COLORMAP_TURBO)
    rgb = bgr[..., ::-1].copy()
    rgb[~m] = 0
    return rgb


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(cfg, {
        "train.steps": getattr(args, "steps", None),
        "train.seed": getattr(args, "seed", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train_data": getattr(args, "data", None),
        "out_dir": getattr(args, "out", None),
    })


def _check_checkpoint_against_config(meta: dict, cfg: Optional[RunConfig]):
    """Parameterization and codec mode must agree before any compute happens."""
    if cfg is None:
        return
    ck_param = meta.get("parameterization")
    if ck_param != cfg.denoiser.parameterization:
        raise UsageError(f"checkpoint parameterization {ck_param!r} != config {cfg.denoiser.parameterization!r}")
    ck_codec = meta.get("codec", {})
    if ck_codec and CodecMode(ck_codec["mode"]) != cfg.codec.mode:
        raise UsageError(f"checkpoint codec mode {ck_codec['mode']!r} != config {cfg.codec.mode.value!r}")


def _codec_from_meta(meta: dict) -> DepthCodecConfig:
    c = meta.get("codec")
    if not c:
        raise CheckpointError("checkpoint metadata has no codec record")
    return DepthCodecConfig(**c)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    h, w = parse_pair(args.resolution, "x", int)
    lo, hi = parse_pair(args.fov_range, ",")
    if h < 1 or w < 1:
        raise UsageError("--resolution sides must be positive")
    if not 0 < lo <= hi < 180:
        raise UsageError(f"--fov-range must satisfy 0 < lo <= hi < 180, got {lo},{hi}")
    samples = generate_samples(args.n, args.regime, (h, w), (lo, hi), args.seed, args.workers)
    out = Path(args.out)
    write_dataset(samples, out, codec_hints={"suggested_max_depth": {r: REGIME_RANGE[r][1] for r in REGIME_RANGE}})
    print(f"wrote {len(samples)} samples to {out}")
    for regime in sorted({s.regime for s in samples}):
        vals = [s.depth.values[s.depth.valid_mask] for s in samples if s.regime == regime]
        vals = np.concatenate(vals) if vals else np.zeros(0)
        count = sum(s.regime == regime for s in samples)
        if vals.size:
            print(f"  {regime}: {count} samples, depth {vals.min():.3f}-{vals.max():.3f} m, "
                  f"valid {vals.size} px")
        else:
            print(f"  {regime}: {count} samples, no valid depth")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.train_data:
        raise UsageError("no training data: pass --data or set train_data in the config")
    samples = read_dataset(cfg.train_data)
    out = Path(cfg.out_dir)
    tcfg = cfg.train_config()
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        _check_checkpoint_against_config(meta, cfg)
        if asdict(model.cfg) != asdict(cfg.denoiser):
            raise UsageError("checkpoint denoiser config differs from the run config")
        lr, start = tcfg.fine_tune_lr, int(meta.get("train_step", 0))
    else:
        torch.manual_seed(tcfg.seed)
        model, lr, start = Denoiser(cfg.denoiser), tcfg.learning_rate, 0
    prov = provenance("train", cfg.to_dict(), {"train": tcfg.seed})
    _write_provenance(out, prov)
    (out / "config.json").write_text(cfg.to_json())
    losses = train_denoiser(samples, model, tcfg, log_path=out / "train_log.jsonl", lr=lr, start_step=start)
    save_checkpoint(model, out / "checkpoint", codec=asdict(cfg.codec), train_step=start + tcfg.steps,
                    optimizer={**OPTIMIZER_INFO, "lr": lr}, train=json.loads(cfg.to_json())["train"],
                    provenance=prov, final_loss=float(np.mean(losses[-50:])))
    print(f"trained {tcfg.steps} steps, final loss {np.mean(losses[-50:]):.4f}; checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.pred is None):
        raise UsageError("pass exactly one of --checkpoint or --pred")
    cfg = load_run_config(args.config) if args.config else None
    data = read_dataset(args.data)
    try:
        protocol = EvalProtocol(args.min_depth, args.max_depth)
    except ValueError as e:
        raise UsageError(str(e)) from e
    seeds = {"sampler": args.seed}
    if args.checkpoint:
        meta = read_meta(args.checkpoint)
        _check_checkpoint_against_config(meta, cfg)
        model, meta = load_checkpoint(args.checkpoint)
        codec = _codec_from_meta(meta)
        preds = predict_samples(model, data, codec, args.steps, n_samples=args.samples, seed=args.seed)
        source = {"checkpoint": str(args.checkpoint), "steps": args.steps, "samples": args.samples}
    else:
        pred_data = read_dataset(args.pred)
        if len(pred_data) != len(data):
            raise DatasetError(f"{len(pred_data)} predictions for {len(data)} ground-truth samples")
        preds = [p.depth for p in pred_data]
        source = {"pred": str(args.pred)}
    report = evaluate_split(preds, [s.depth for s in data], protocol)
    prov = provenance("eval", {"source": source, "data": str(args.data), "protocol": asdict(protocol)}, seeds)
    out = Path(args.out)
    _write_provenance(out, prov)
    (out / "metrics.json").write_text(json.dumps({**report.to_dict(protocol), "provenance": prov}, indent=1))
    (out / "metrics.csv").write_text(csv_rows({Path(args.data).name: report}))
    print(report.to_json(protocol))
    return EXIT_OK


def _true_fov_from_manifest(rgb_path: Path) -> Optional[float]:
    try:
        manifest = read_manifest(rgb_path.parent)
    except DatasetError:
        return None
    for e in manifest["samples"]:
        if e["rgb_file"] == rgb_path.name:
            return float(e["vertical_fov_deg"])
    return None


def cmd_infer(args) -> int:
    if (args.fov_deg is None) == (not args.estimate_fov):
        raise UsageError("pass exactly one of --fov-deg or --estimate-fov")
    if args.estimate_fov and not args.regressor:
        raise UsageError("--estimate-fov needs --regressor")
    cfg = load_run_config(args.config) if args.config else None
    meta = read_meta(args.checkpoint)
    _check_checkpoint_against_config(meta, cfg)
    model, meta = load_checkpoint(args.checkpoint)
    codec = _codec_from_meta(meta)
    rgb_path = Path(args.rgb)
    if not rgb_path.exists():
        raise DatasetError(f"{rgb_path}: no such file")
    rgb = read_ppm(rgb_path)
    h, w = rgb.shape[:2]
    if h % model.multiple or w % model.multiple:
        raise UsageError(f"image {h}x{w} must have sides divisible by {model.multiple}")

    report = {}
    true_fov = _true_fov_from_manifest(rgb_path)
    if true_fov is not None:
        report["true_cond"] = fov_to_cond(CameraSpec(h, w, true_fov))
    if args.estimate_fov:
        cond = float(estimate_fov_cond(load_regressor(args.regressor), [rgb])[0])
        report["estimated_cond"] = cond
        report["estimated_fov_deg"] = fov_from_cond(cond)
    else:
        cond = fov_to_cond(CameraSpec(h, w, args.fov_deg))
    report["used_cond"] = cond

    seeds = [args.seed + k for k in range(args.samples)]
    depth = infer_depth(model, rgb, cond if model.cfg.use_fov_conditioning else None, steps=args.steps,
                        n_samples=args.samples, seeds=seeds, codec=codec)
    out = Path(args.out)
    prov = provenance("infer", {"checkpoint": str(args.checkpoint), "rgb": str(rgb_path), "steps": args.steps,
                                "samples": args.samples, "cond": cond}, {"sampler": seeds})
    _write_provenance(out, prov)
    stem = rgb_path.stem
    write_pfm(out / f"depth_{stem}.pfm", depth.values)
    Image.fromarray(colorize(depth)).save(out / f"preview_{stem}.png")
    report.update({"depth_min": float(depth.values.min()), "depth_max": float(depth.values.max()),
                   "steps": args.steps, "samples": args.samples})
    (out / f"infer_{stem}.json").write_text(json.dumps({**report, "provenance": prov}, indent=1))
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_train_fov(args) -> int:
    samples = read_dataset(args.data)
    cfg = FovRegressorConfig(steps=args.steps, seed=args.seed)
    out = Path(args.out)
    _write_provenance(out, provenance("train-fov", asdict(cfg), {"train": args.seed}))
    model = train_fov_regressor(samples, cfg, log_path=out / "train_log.jsonl")
    save_regressor(model, out / "regressor")
    pred = estimate_fov_cond(model, [s.rgb for s in samples])
    true = np.array([fov_to_cond(s.camera) for s in samples])
    print(f"train cond MAE {np.mean(np.abs(pred - true)):.4f}; regressor in {out / 'regressor'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.name != "fov_regressor" and args.name not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.name!r}; choose from {', '.join(ABLATIONS)}, fov_regressor")
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    out = Path(args.out)
    if args.name == "fov_regressor":
        extra = set(raw) - {"seed"}
        if extra:
            raise ConfigError(f"unknown keys for fov_regressor: {sorted(extra)}")
        exp = FovRegressorExperiment(seed=raw.get("seed", 0))
        _write_provenance(out, provenance("ablate", asdict(exp), {"experiment": exp.seed}))
        result = fov_regressor_experiment(exp)
    else:
        try:
            cfg = ExperimentConfig.from_dict(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        _write_provenance(out, provenance("ablate", asdict(cfg), {"experiment": cfg.seed}))
        result = run_ablation(args.name, cfg, workspace=Workspace(args.work_dir, cfg))
    result.write(out)
    for row in result.rows:
        print(row)
    print(("PASS " if result.passed else "FAIL ") + result.verdict)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metricdepth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic RGB-D dataset")
    g.add_argument("--regime", choices=["indoor", "outdoor", "mixed"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--resolution", default="64x64", help="HxW")
    g.add_argument("--fov-range", default="45,75", help="lo,hi vertical FOV in degrees")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to fine-tune at fine_tune_lr")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or stored predictions) on a dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--pred", help="dataset directory whose depths are used as predictions")
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--steps", type=int, default=8)
    e.add_argument("--samples", type=int, default=8)
    e.add_argument("--min-depth", type=float, default=0.5)
    e.add_argument("--max-depth", type=float, default=10.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict depth for one PPM image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--rgb", required=True)
    i.add_argument("--fov-deg", type=float)
    i.add_argument("--estimate-fov", action="store_true")
    i.add_argument("--regressor")
    i.add_argument("--config")
    i.add_argument("--steps", type=int, default=8)
    i.add_argument("--samples", type=int, default=8)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)

    f = sub.add_parser("train-fov", help="train the tan(theta/2) regressor")
    f.add_argument("--data", required=True)
    f.add_argument("--steps", type=int, default=FovRegressorConfig.steps)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_train_fov)

    a = sub.add_parser("ablate", help="run one toy-scale ablation")
    a.add_argument("--name", required=True)
    a.add_argument("--config", help="JSON experiment config")
    a.add_argument("--work-dir", default="runs/ablations")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, EmptyDepthError, EmptyEvaluationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
