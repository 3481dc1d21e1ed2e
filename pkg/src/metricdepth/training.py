"""Denoiser and FOV-regressor training, plus sample-averaged inference."""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import FovAugConfig, fov_augment, fov_to_cond
from .codec import DepthCodecConfig, DepthMap, decode_values, encode, infill_nearest
from .diffusion import (
    DiffusionState,
    average_samples,
    ddpm_sample,
    forward_noise,
    loss_eps_l1,
    loss_truncated_snr_l1,
    recover_from_eps,
    recover_x_eps,
    schedule_tensor,
)
from .model import Denoiser
from .synth import RenderedSample

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-4
    fine_tune_lr: float = 3e-5
    p_flip: float = 0.5
    p_fov_aug: float = 0.5
    p_unroll: float = 0.5
    fov_aug: FovAugConfig = field(default_factory=FovAugConfig)
    codec: DepthCodecConfig = field(default_factory=DepthCodecConfig)
    seed: int = 0

    def __post_init__(self):
        for name in ("p_flip", "p_fov_aug", "p_unroll"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate <= 0 or self.fine_tune_lr <= 0:
            raise ValueError("learning rates must be positive")


# ---------------------------------------------------------------- examples


@dataclass
class TrainingExample:
    rgb: np.ndarray       # (H, W, 3)
    x_target: np.ndarray  # (H, W) encoded, infilled
    mask: np.ndarray      # (H, W) validity before infilling
    fov_cond: float


def hflip(rgb: np.ndarray, depth: DepthMap) -> tuple[np.ndarray, DepthMap]:
    return rgb[:, ::-1].copy(), DepthMap(depth.values[:, ::-1].copy(), depth.valid_mask[:, ::-1].copy())


def make_training_example(sample: RenderedSample, cfg: TrainConfig, rng: np.random.Generator) -> TrainingExample:
    rgb, depth, cam = sample.rgb, sample.depth, sample.camera
    if rng.random() < cfg.p_flip:
        rgb, depth = hflip(rgb, depth)
    if rng.random() < cfg.p_fov_aug:
        scale = rng.uniform(cfg.fov_aug.scale_min, cfg.fov_aug.scale_max)
        rgb, depth, cam = fov_augment(rgb, depth, cam, scale, int(rng.integers(2**31)),
                                      cfg.fov_aug.pad_noise_std)
    mask = depth.valid_mask.copy()
    filled = infill_nearest(depth)
    x = encode(filled, cfg.codec).values
    return TrainingExample(rgb, x, mask, fov_to_cond(cam))


def collate(examples: Sequence[TrainingExample], dtype=torch.float32) -> dict[str, torch.Tensor]:
    return {
        "rgb": torch.as_tensor(np.stack([e.rgb for e in examples]), dtype=dtype).permute(0, 3, 1, 2).contiguous(),
        "x": torch.as_tensor(np.stack([e.x_target for e in examples]), dtype=dtype)[:, None],
        "mask": torch.as_tensor(np.stack([e.mask for e in examples]))[:, None],
        "fov_cond": torch.as_tensor([e.fov_cond for e in examples], dtype=torch.float64),
    }


def rgb_tensor(rgbs: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack(rgbs), dtype=dtype).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------- training


def _triple(model: Denoiser, state: DiffusionState, pred):
    if model.cfg.parameterization == "v":
        return recover_x_eps(state, pred)
    return recover_from_eps(state, pred)


def train_step(batch: dict, model: Denoiser, optimizer: torch.optim.Optimizer, cfg: TrainConfig,
               gen: torch.Generator) -> float:
    """One optimizer update; returns the batch loss."""
    x, rgb, mask = batch["x"], batch["rgb"], batch["mask"]
    fov = batch["fov_cond"] if model.cfg.use_fov_conditioning else None
    b = x.shape[0]
    t = torch.rand(b, generator=gen, dtype=torch.float64)
    eps = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    state = forward_noise(x, eps, t)
    unroll = torch.rand(b, generator=gen) < cfg.p_unroll
    eps_fresh = torch.randn(x.shape, generator=gen, dtype=x.dtype)

    model.train()
    if unroll.any():
        with torch.no_grad():
            first = _triple(model, state, model(state.z_t, rgb, t, fov))
            x_hat = first.x_hat.clamp(-1, 1)
        unrolled = forward_noise(x_hat, eps_fresh, t).z_t
        sel = unroll.view(-1, 1, 1, 1)
        z = torch.where(sel, unrolled, state.z_t)
        a, s = schedule_tensor(t)
        a, s = a.to(x.dtype).view(-1, 1, 1, 1), s.to(x.dtype).view(-1, 1, 1, 1)
        # noise that relates the rebuilt latent to the clean target
        eps = torch.where(sel, (z - a * x) / s.clamp(min=1e-6), eps)
        state = DiffusionState(z, t)

    triple = _triple(model, state, model(state.z_t, rgb, t, fov))
    if model.cfg.parameterization == "v":
        loss = loss_truncated_snr_l1(x, eps, triple, mask)
    else:
        loss = loss_eps_l1(eps, triple, mask)

    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} at t={t.tolist()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = torch.sqrt(sum((p.grad.double() ** 2).sum() for p in model.parameters() if p.grad is not None))
    if not torch.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient norm (loss {loss.item():.4g}, t={t.tolist()})")
    optimizer.step()
    return float(loss.detach())


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


OPTIMIZER_INFO = {"name": "adam", "betas": [0.9, 0.999], "eps": 1e-8}


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step, 1])
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def example_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 2, slot])


def make_batch(samples: Sequence[RenderedSample], cfg: TrainConfig, step: int) -> dict:
    idx = batch_indices(len(samples), cfg.batch_size, cfg.seed, step)
    return collate([make_training_example(samples[i], cfg, example_rng(cfg.seed, step, j))
                    for j, i in enumerate(idx)])


def train_denoiser(samples: Sequence[RenderedSample], model: Denoiser, cfg: TrainConfig,
                   log_path: Optional[Path] = None, lr: Optional[float] = None,
                   start_step: int = 0) -> list[float]:
    """Train in place; returns the per-step losses.

    Batch content depends only on (seed, step), so runs are reproducible.
    """
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, lr or cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses = []
    logf = open(log_path, "a") if log_path else None
    t0 = time.time()
    try:
        for step in range(start_step, start_step + cfg.steps):
            batch = make_batch(samples, cfg, step)
            loss = train_step(batch, model, opt, cfg, gen)
            losses.append(loss)
            if logf:
                logf.write(json.dumps({"step": step, "loss": loss, "lr": lr or cfg.learning_rate,
                                       "wall_time": time.time() - t0}) + "\n")
            if step % 200 == 0:
                log.info("step %d loss %.4f", step, loss)
    finally:
        if logf:
            logf.close()
    model.eval()
    return losses


# ---------------------------------------------------------------- inference


def sample_encoded(model: Denoiser, rgb: torch.Tensor, fov_cond, steps: int, seeds: Sequence[int]) -> torch.Tensor:
    """Mean of one sampler run per seed, in the encoded domain."""
    model.eval()
    fov = fov_cond if model.cfg.use_fov_conditioning else None
    fn = model.as_denoiser_fn()
    runs = [ddpm_sample(fn, rgb, fov, steps, seed, model.cfg.parameterization) for seed in seeds]
    return average_samples(runs)


def infer_depth(model: Denoiser, rgb: np.ndarray, fov_cond: Optional[float], steps: int = 8,
                n_samples: int = 8, seeds: Optional[Sequence[int]] = None,
                codec: DepthCodecConfig = DepthCodecConfig()) -> DepthMap:
    """Depth for one (H, W, 3) image: average n_samples runs, then decode."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seeds = list(range(n_samples)) if seeds is None else list(seeds)
    if len(seeds) != n_samples:
        raise ValueError(f"{len(seeds)} seeds for {n_samples} samples")
    fov = None if fov_cond is None else torch.tensor([fov_cond], dtype=torch.float64)
    enc = sample_encoded(model, rgb_tensor([rgb]), fov, steps, seeds)
    return DepthMap.dense(decode_values(enc[0, 0].double().numpy(), codec))


def predict_samples(model: Denoiser, samples: Sequence[RenderedSample], codec: DepthCodecConfig,
                    steps: int, n_samples: int = 1, seed: int = 0, fov_factor: float = 1.0,
                    batch_size: int = 64) -> list[DepthMap]:
    """Batched infer_depth over a list of samples using their true FOV (times fov_factor)."""
    out = []
    seeds = [seed + k for k in range(n_samples)]
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        rgb = rgb_tensor([s.rgb for s in chunk])
        fov = torch.tensor([fov_to_cond(s.camera) * fov_factor for s in chunk], dtype=torch.float64)
        enc = sample_encoded(model, rgb, fov, steps, [sd * 100003 + lo for sd in seeds])
        out += [DepthMap.dense(decode_values(e[0].double().numpy(), codec)) for e in enc]
    return out


# ---------------------------------------------------------------- FOV regressor


@dataclass(frozen=True)
class FovRegressorConfig:
    channels: int = 16
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 1e-3
    p_flip: float = 0.5
    p_fov_aug: float = 0.0
    fov_aug: FovAugConfig = field(default_factory=FovAugConfig)
    seed: int = 0


class FovRegressor(nn.Module):
    """Conv encoder, spatial average pooling and a linear head -> tan(theta/2) > 0."""

    def __init__(self, cfg: FovRegressorConfig = FovRegressorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(4 * c, 4 * c, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.head = nn.Linear(4 * c, 1)

    def forward(self, rgb):
        feats = self.encoder(rgb).mean(dim=(2, 3))
        return F.softplus(self.head(feats))[:, 0]


def _regressor_example(sample: RenderedSample, cfg: FovRegressorConfig, rng) -> tuple[np.ndarray, float]:
    rgb, depth, cam = sample.rgb, sample.depth, sample.camera
    if rng.random() < cfg.p_flip:
        rgb, depth = hflip(rgb, depth)
    if rng.random() < cfg.p_fov_aug:
        scale = rng.uniform(cfg.fov_aug.scale_min, cfg.fov_aug.scale_max)
        rgb, depth, cam = fov_augment(rgb, depth, cam, scale, int(rng.integers(2**31)), cfg.fov_aug.pad_noise_std)
    return rgb, fov_to_cond(cam)


def train_fov_regressor(samples: Sequence[RenderedSample], cfg: FovRegressorConfig = FovRegressorConfig(),
                        log_path: Optional[Path] = None) -> FovRegressor:
    """L1 regression of tan(theta/2) from RGB."""
    fovs = {round(s.camera.vertical_fov_deg, 9) for s in samples}
    if len(fovs) < 2 and cfg.p_fov_aug == 0:
        warnings.warn("all training samples share one FOV; the regressor can only learn a constant",
                      stacklevel=2)
    torch.manual_seed(cfg.seed)
    model = FovRegressor(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    logf = open(log_path, "a") if log_path else None
    try:
        for step in range(cfg.steps):
            idx = batch_indices(len(samples), cfg.batch_size, cfg.seed, step)
            pairs = [_regressor_example(samples[i], cfg, example_rng(cfg.seed, step, j)) for j, i in enumerate(idx)]
            rgb = rgb_tensor([p[0] for p in pairs])
            target = torch.tensor([p[1] for p in pairs], dtype=torch.float32)
            model.train()
            loss = (model(rgb) - target).abs().mean()
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite FOV regressor loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if logf:
                logf.write(json.dumps({"step": step, "loss": float(loss.detach())}) + "\n")
    finally:
        if logf:
            logf.close()
    model.eval()
    return model


@torch.no_grad()
def estimate_fov_cond(model: FovRegressor, rgbs: Sequence[np.ndarray]) -> np.ndarray:
    model.eval()
    return model(rgb_tensor(rgbs)).double().numpy()


def save_regressor(model: FovRegressor, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), root / "params.pt")
    cfg = asdict(model.cfg)
    (root / "meta.json").write_text(json.dumps({"kind": "fov_regressor", "config": cfg,
                                                "params_file": "params.pt"}, indent=1, sort_keys=True))
    return root


def load_regressor(directory) -> FovRegressor:
    root = Path(directory)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("kind") != "fov_regressor":
        raise ValueError(f"{root}: not a FOV regressor checkpoint")
    c = dict(meta["config"])
    c["fov_aug"] = FovAugConfig(**c["fov_aug"])
    model = FovRegressor(FovRegressorConfig(**c))
    model.load_state_dict(torch.load(root / meta["params_file"], weights_only=True))
    model.eval()
    return model
