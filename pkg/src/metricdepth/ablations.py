"""Toy-scale reproductions of the ablation trends.

Every experiment trains (or reuses) a matched pair of models that differ in
one setting, evaluates them on held-out synthetic data and returns a table
plus a pass/fail verdict for the trend it is meant to show.  Trained
checkpoints are cached under ``work_dir/models/<config hash>`` so sweeps that
share a model (n_samples, fov_perturb reuse fov_cond's) train it once.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .camera import fov_to_cond
from .codec import DepthCodecConfig
from .metrics import EvalProtocol, MetricReport, evaluate_split
from .model import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .synth import REGIME_RANGE, RenderedSample, SampleSpec, plan_samples, render_specs, with_spec
from .training import (
    FovRegressorConfig,
    TrainConfig,
    estimate_fov_cond,
    predict_samples,
    train_denoiser,
    train_fov_regressor,
)

log = logging.getLogger(__name__)

ABLATIONS = ("log_vs_linear", "fov_cond", "eps_vs_v", "n_samples", "fov_perturb")


@dataclass(frozen=True)
class ExperimentConfig:
    resolution: tuple = (32, 32)
    n_train: int = 500
    n_eval: int = 100
    fov_range: tuple = (45.0, 75.0)
    train_steps: int = 2000
    # the linear codec needs longer to fit shallow depths; at 2k steps it is still undertrained
    log_vs_linear_steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 1e-3
    base_channels: int = 16
    depth_levels: int = 3
    embed_dim: int = 64
    indoor_steps: int = 8
    outdoor_steps: int = 2
    eval_samples: int = 1
    # ambiguity world for the FOV-conditioning experiment
    ambiguity_fov_range: tuple = (30.0, 100.0)
    ambiguity_ref_fov: float = 60.0
    eps_steps: tuple = (1, 4, 16)
    perturb_factors: tuple = (0.5, 0.75, 1.0, 1.25, 1.5)
    sample_counts: tuple = (1, 8)
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class AblationResult:
    name: str
    rows: list
    passed: bool
    verdict: str
    header: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{self.name}.json").write_text(self.to_json())
        with open(out / f"{self.name}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)
        (out / f"{self.name}.verdict.txt").write_text(("PASS " if self.passed else "FAIL ") + self.verdict + "\n")
        return out


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- data


def ambiguity_specs(n: int, cfg: ExperimentConfig, seed: int, pairs: bool) -> list[SampleSpec]:
    """Indoor scenes scaled so that depth grows as the FOV narrows.

    Each scene is rendered at FOV theta after scaling by
    k = tan(theta_ref/2) / tan(theta/2), so the image equals the unscaled
    render at theta while the depths carry a factor only the FOV reveals.
    With `pairs`, every scene appears twice at two FOVs: the narrower view
    is a central crop of the wider one, at a different depth scale.
    """
    lo, hi = cfg.ambiguity_fov_range
    ref = math.tan(math.radians(cfg.ambiguity_ref_fov) / 2)
    base = plan_samples(n if not pairs else (n + 1) // 2, "indoor", cfg.resolution, (lo, hi), seed)
    out = []
    for i, spec in enumerate(base):
        fovs = [spec.fov_deg]
        if pairs:
            rng = np.random.default_rng([seed, i, 11])
            fovs.append(float(rng.uniform(lo, hi)))
        for fov in fovs:
            k = ref / math.tan(math.radians(fov) / 2)
            out.append(with_spec(spec, fov_deg=fov, scale=k))
    return out[:n]


def make_split(kind: str, n: int, cfg: ExperimentConfig, seed: int) -> list[RenderedSample]:
    if kind == "ambiguity":
        specs = ambiguity_specs(n, cfg, seed, pairs=False)
    elif kind == "ambiguity_pairs":
        specs = ambiguity_specs(n, cfg, seed, pairs=True)
    else:
        specs = plan_samples(n, kind, cfg.resolution, cfg.fov_range, seed)
    return render_specs(specs, cfg.workers)


class Workspace:
    """Caches datasets (in memory) and trained checkpoints (on disk)."""

    def __init__(self, work_dir, cfg: ExperimentConfig):
        self.root = Path(work_dir)
        self.cfg = cfg
        self._splits: dict = {}

    def split(self, kind: str, n: int, seed: int) -> list[RenderedSample]:
        key = (kind, n, seed)
        if key not in self._splits:
            self._splits[key] = make_split(kind, n, self.cfg, seed)
        return self._splits[key]

    def train_split(self, kind):
        return self.split(kind, self.cfg.n_train, self.cfg.seed)

    def eval_split(self, kind):
        return self.split(kind, self.cfg.n_eval, self.cfg.seed + 1_000_003)

    def model(self, data_kind: str, model_cfg: DenoiserConfig, train_cfg: TrainConfig) -> Denoiser:
        spec = {"data": data_kind, "n_train": self.cfg.n_train, "resolution": list(self.cfg.resolution),
                "fov_range": list(self.cfg.fov_range),
                "ambiguity": [list(self.cfg.ambiguity_fov_range), self.cfg.ambiguity_ref_fov],
                "model": asdict(model_cfg), "train": asdict(train_cfg)}
        path = self.root / "models" / config_hash(spec)
        if (path / "meta.json").exists():
            model, _ = load_checkpoint(path)
            return model
        # init must not depend on whatever ran earlier in the process
        torch.manual_seed(train_cfg.seed)
        model = Denoiser(model_cfg)
        path.mkdir(parents=True, exist_ok=True)
        losses = train_denoiser(self.train_split(data_kind), model, train_cfg, log_path=path / "train_log.jsonl")
        save_checkpoint(model, path, codec=asdict(train_cfg.codec), train_step=train_cfg.steps,
                        optimizer={"name": "adam", "lr": train_cfg.learning_rate}, experiment=spec,
                        final_loss=float(np.mean(losses[-100:])))
        model.eval()
        return model


def _model_cfg(cfg: ExperimentConfig, **kw) -> DenoiserConfig:
    return DenoiserConfig(cfg.base_channels, cfg.depth_levels, cfg.embed_dim, **kw)


def _train_cfg(cfg: ExperimentConfig, **kw) -> TrainConfig:
    base = dict(steps=cfg.train_steps, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                seed=cfg.seed)
    base.update(kw)
    return TrainConfig(**base)


def _eval(model, samples, codec, steps, protocol, n_samples=1, seed=0, fov_factor=1.0) -> MetricReport:
    preds = predict_samples(model, samples, codec, steps, n_samples=n_samples, seed=seed, fov_factor=fov_factor)
    return evaluate_split(preds, [s.depth for s in samples], protocol)


def _row(report: MetricReport, **keys) -> dict:
    return {**keys, **{k: getattr(report, k) for k in ("rel", "rmse", "delta1", "n_pixels")}}


def _header(cfg: ExperimentConfig, **train) -> dict:
    return {"experiment": asdict(cfg), **train}


OUTDOOR_PROTOCOL = EvalProtocol(0.5, REGIME_RANGE["outdoor"][1])
INDOOR_PROTOCOL = EvalProtocol(0.5, REGIME_RANGE["indoor"][1])


# ---------------------------------------------------------------- experiments


def eps_vs_v(ws: Workspace) -> AblationResult:
    cfg = ws.cfg
    codec = DepthCodecConfig("log")
    tc = _train_cfg(cfg, p_fov_aug=0.0, codec=codec)
    evals = ws.eval_split("mixed")
    rows = []
    rel = {}
    for param in ("eps", "v"):
        model = ws.model("mixed", _model_cfg(cfg, parameterization=param, use_fov_conditioning=False), tc)
        for steps in cfg.eps_steps:
            r = _eval(model, evals, codec, steps, OUTDOOR_PROTOCOL, seed=cfg.seed)
            rel[param, steps] = r.rel
            rows.append(_row(r, parameterization=param, steps=steps))
    eps = [rel["eps", s] for s in cfg.eps_steps]
    v1 = rel["v", cfg.eps_steps[0]]
    beats = v1 < rel["eps", 1] and v1 < rel["eps", 4]
    mono = all(a >= b for a, b in zip(eps, eps[1:]))
    verdict = (f"v@1 REL {v1:.4f} vs eps@1 {rel['eps', 1]:.4f}, eps@4 {rel['eps', 4]:.4f} "
               f"(beats: {beats}); eps REL over steps {cfg.eps_steps}: "
               f"{[round(e, 4) for e in eps]} (non-increasing: {mono})")
    return AblationResult("eps_vs_v", rows, beats and mono, verdict, _header(cfg, train=asdict(tc)))


def log_vs_linear(ws: Workspace) -> AblationResult:
    cfg = ws.cfg
    rows = []
    rel = {}
    evals = ws.eval_split("mixed")
    indoor = [s for s in evals if s.regime == "indoor"]
    outdoor = [s for s in evals if s.regime == "outdoor"]
    header = _header(cfg)
    for mode in ("linear", "log"):
        codec = DepthCodecConfig(mode)
        tc = _train_cfg(cfg, codec=codec, steps=cfg.log_vs_linear_steps)
        header[f"train_{mode}"] = asdict(tc)
        model = ws.model("mixed", _model_cfg(cfg), tc)
        r_in = _eval(model, indoor, codec, cfg.indoor_steps, INDOOR_PROTOCOL, cfg.eval_samples, cfg.seed)
        r_out = _eval(model, outdoor, codec, cfg.outdoor_steps, OUTDOOR_PROTOCOL, cfg.eval_samples, cfg.seed)
        rel[mode] = (r_in.rel, r_out.rel)
        rows.append(_row(r_in, scaling=mode, split="indoor"))
        rows.append(_row(r_out, scaling=mode, split="outdoor"))
    (lin_in, lin_out), (log_in, log_out) = rel["linear"], rel["log"]
    indoor_gain = (lin_in - log_in) / lin_in
    outdoor_gap = abs(log_out - lin_out) / min(log_out, lin_out)
    ok = indoor_gain >= 0.05 and outdoor_gap <= 0.15
    verdict = (f"indoor REL linear {lin_in:.4f} -> log {log_in:.4f} ({100 * indoor_gain:.1f}% lower, need >= 5%); "
               f"outdoor REL linear {lin_out:.4f} vs log {log_out:.4f} ({100 * outdoor_gap:.1f}% apart, need <= 15%)")
    return AblationResult("log_vs_linear", rows, ok, verdict, header)


def _fov_models(ws: Workspace):
    cfg = ws.cfg
    codec = DepthCodecConfig("log")
    # crops would contradict the FOV-linked depth scale of this data
    tc = _train_cfg(cfg, p_fov_aug=0.0, codec=codec)
    cond = ws.model("ambiguity", _model_cfg(cfg, use_fov_conditioning=True), tc)
    uncond = ws.model("ambiguity", _model_cfg(cfg, use_fov_conditioning=False), tc)
    return cond, uncond, codec, tc


def fov_cond(ws: Workspace) -> AblationResult:
    cfg = ws.cfg
    cond, uncond, codec, tc = _fov_models(ws)
    evals = ws.eval_split("ambiguity_pairs")
    r_c = _eval(cond, evals, codec, cfg.indoor_steps, OUTDOOR_PROTOCOL, cfg.eval_samples, cfg.seed)
    r_u = _eval(uncond, evals, codec, cfg.indoor_steps, OUTDOOR_PROTOCOL, cfg.eval_samples, cfg.seed)
    gain = (r_u.rel - r_c.rel) / r_u.rel
    rows = [_row(r_u, fov_conditioning=False), _row(r_c, fov_conditioning=True)]
    verdict = f"REL without FOV cond {r_u.rel:.4f}, with {r_c.rel:.4f} ({100 * gain:.1f}% lower, need >= 20%)"
    return AblationResult("fov_cond", rows, gain >= 0.20, verdict, _header(cfg, train=asdict(tc)))


def n_samples(ws: Workspace) -> AblationResult:
    cfg = ws.cfg
    cond, _, codec, tc = _fov_models(ws)
    evals = ws.eval_split("ambiguity_pairs")
    rows = []
    rel = {}
    for k in cfg.sample_counts:
        r = _eval(cond, evals, codec, cfg.indoor_steps, OUTDOOR_PROTOCOL, k, cfg.seed)
        rel[k] = r.rel
        rows.append(_row(r, n_samples=k, n_images=len(evals)))
    one, many = rel[min(rel)], rel[max(rel)]
    ok = many <= one + 0.002 and len(evals) >= 100
    verdict = (f"REL with {min(rel)} sample {one:.4f}, mean of {max(rel)} {many:.4f} "
               f"(need <= single + 0.002) over {len(evals)} images")
    return AblationResult("n_samples", rows, ok, verdict, _header(cfg, train=asdict(tc)))


def fov_perturb(ws: Workspace) -> AblationResult:
    cfg = ws.cfg
    cond, _, codec, tc = _fov_models(ws)
    evals = ws.eval_split("ambiguity_pairs")
    rows = []
    rel = {}
    for f in cfg.perturb_factors:
        r = _eval(cond, evals, codec, cfg.indoor_steps, OUTDOOR_PROTOCOL, cfg.eval_samples, cfg.seed, fov_factor=f)
        rel[f] = r.rel
        rows.append(_row(r, factor=f))
    best = min(rel, key=rel.get)
    verdict = "REL by factor: " + ", ".join(f"{f}: {v:.4f}" for f, v in rel.items()) + f"; minimum at {best}"
    return AblationResult("fov_perturb", rows, best == 1.0, verdict, _header(cfg, train=asdict(tc)))


EXPERIMENTS: dict[str, Callable[[Workspace], AblationResult]] = {
    "log_vs_linear": log_vs_linear,
    "fov_cond": fov_cond,
    "eps_vs_v": eps_vs_v,
    "n_samples": n_samples,
    "fov_perturb": fov_perturb,
}


def run_ablation(name: str, cfg: ExperimentConfig = ExperimentConfig(), work_dir="runs/ablations",
                 workspace: Optional[Workspace] = None) -> AblationResult:
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    ws = workspace or Workspace(work_dir, cfg)
    return EXPERIMENTS[name](ws)


# ---------------------------------------------------------------- FOV regressor


@dataclass(frozen=True)
class FovRegressorExperiment:
    fovs: tuple = (60.0, 90.0)
    regime: str = "outdoor"
    resolution: tuple = (32, 32)
    n_train: int = 400
    n_eval: int = 100
    regressor: FovRegressorConfig = field(default_factory=FovRegressorConfig)
    seed: int = 0


def two_fov_split(exp: FovRegressorExperiment, n: int, seed: int) -> list[RenderedSample]:
    specs = plan_samples(n, exp.regime, exp.resolution, (1.0, 179.0), seed)
    specs = [with_spec(s, fov_deg=exp.fovs[i % len(exp.fovs)]) for i, s in enumerate(specs)]
    return render_specs(specs)


def fov_regressor_experiment(exp: FovRegressorExperiment = FovRegressorExperiment()) -> AblationResult:
    train = two_fov_split(exp, exp.n_train, exp.seed)
    evals = two_fov_split(exp, exp.n_eval, exp.seed + 1_000_003)
    model = train_fov_regressor(train, exp.regressor)
    pred = estimate_fov_cond(model, [s.rgb for s in evals])
    true = np.array([fov_to_cond(s.camera) for s in evals])
    mae = float(np.mean(np.abs(pred - true)))
    conds = sorted({math.tan(math.radians(f) / 2) for f in exp.fovs})
    baseline = float(np.mean(np.abs(true - np.median(true))))
    rows = [{"model": "regressor", "mae": mae}, {"model": "best_constant", "mae": baseline}]
    ok = mae <= 0.7 * baseline
    verdict = (f"cond MAE {mae:.4f} vs best-constant {baseline:.4f} "
               f"({100 * (1 - mae / baseline):.1f}% lower, need >= 30%); conds {conds}")
    return AblationResult("fov_regressor", rows, ok, verdict, {"experiment": asdict(exp)})
