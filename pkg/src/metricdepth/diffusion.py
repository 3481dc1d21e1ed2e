"""Continuous-time diffusion: cosine schedule, v/eps parameterizations,
the truncated-SNR L1 loss and a few-step ancestral DDPM sampler.

Grid arguments may be numpy arrays or torch tensors; the loss and the
sampler are torch-only since they sit on the training/inference path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch


def schedule_eval(t: float) -> tuple[float, float]:
    """Cosine schedule: alpha = cos(pi t / 2), sigma = sin(pi t / 2)."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    # exact endpoints; cos(pi/2) is 6e-17 in floating point
    if t == 1.0:
        return 0.0, 1.0
    if t == 0.0:
        return 1.0, 0.0
    return math.cos(math.pi * t / 2), math.sin(math.pi * t / 2)


def schedule_tensor(t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched schedule, evaluated in float64 and cast back to t's dtype."""
    if ((t < 0) | (t > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    t64 = t.double()
    alpha = torch.where(t64 == 1, torch.zeros_like(t64), torch.cos(math.pi * t64 / 2))
    sigma = torch.where(t64 == 0, torch.zeros_like(t64), torch.sin(math.pi * t64 / 2))
    return alpha.to(t.dtype), sigma.to(t.dtype)


@dataclass
class CosineSchedule:
    name: str = "cosine"

    def alpha(self, t):
        return schedule_eval(t)[0]

    def sigma(self, t):
        return schedule_eval(t)[1]

    def __call__(self, t):
        return schedule_eval(t)


@dataclass
class DiffusionState:
    z_t: object
    t: float

    def __post_init__(self):
        if _scalar(self.t):
            if not 0.0 <= float(self.t) <= 1.0:
                raise ValueError(f"t must lie in [0, 1], got {self.t}")
        elif ((self.t < 0) | (self.t > 1)).any():
            raise ValueError("t must lie in [0, 1]")


@dataclass
class PredictionTriple:
    v_hat: object
    x_hat: object
    eps_hat: object


def _check_shapes(*grids):
    shapes = {tuple(g.shape) for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _coeffs(t, like):
    """(alpha, sigma) for a scalar t or a per-example tensor broadcast over grids."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        a, s = schedule_tensor(t)
        view = (-1,) + (1,) * (like.ndim - 1)
        return a.to(like.dtype).view(view), s.to(like.dtype).view(view)
    return schedule_eval(float(t))


def forward_noise(x, eps, t, sched: CosineSchedule | None = None) -> DiffusionState:
    _check_shapes(x, eps)
    a, s = _coeffs(t, x)
    return DiffusionState(a * x + s * eps, t)


def v_target(x, eps, t):
    _check_shapes(x, eps)
    a, s = _coeffs(t, x)
    return a * eps - s * x


def recover_x_eps(z: DiffusionState, v_hat, sched: CosineSchedule | None = None) -> PredictionTriple:
    _check_shapes(z.z_t, v_hat)
    a, s = _coeffs(z.t, z.z_t)
    return PredictionTriple(v_hat, a * z.z_t - s * v_hat, a * v_hat + s * z.z_t)


_ALPHA_FLOOR = 1e-12


def recover_from_eps(z: DiffusionState, eps_hat) -> PredictionTriple:
    """Triple implied by a noise prediction; x is unbounded as alpha -> 0."""
    _check_shapes(z.z_t, eps_hat)
    a, s = _coeffs(z.t, z.z_t)
    if isinstance(a, torch.Tensor):
        a_safe = a.clamp(min=_ALPHA_FLOOR)
    else:
        a_safe = max(a, _ALPHA_FLOOR)
    x_hat = (z.z_t - s * eps_hat) / a_safe
    return PredictionTriple(a * eps_hat - s * x_hat, x_hat, eps_hat)


def _scalar(t):
    return not (isinstance(t, torch.Tensor) and t.ndim > 0)


def _masked_mean_abs(a, b, mask):
    """Per-example mean |a - b| over mask; grids shaped (H, W) or (B, ..., H, W)."""
    _check_shapes(a, b, mask)
    m = mask.to(a.dtype)
    dims = tuple(range(1, a.ndim)) if a.ndim >= 3 else tuple(range(a.ndim))
    count = m.sum(dim=dims)
    if (count == 0).any():
        raise ValueError("loss mask selects no pixels")
    return ((a - b).abs() * m).sum(dim=dims) / count


def loss_truncated_snr_l1(x, eps, triple: PredictionTriple, mask) -> torch.Tensor:
    """max(mean|x - x_hat|, mean|eps - eps_hat|), averaged over the batch."""
    lx = _masked_mean_abs(x, triple.x_hat, mask)
    le = _masked_mean_abs(eps, triple.eps_hat, mask)
    return torch.maximum(lx, le).mean()


def loss_eps_l1(eps, triple: PredictionTriple, mask) -> torch.Tensor:
    return _masked_mean_abs(eps, triple.eps_hat, mask).mean()


DenoiserFn = Callable[[torch.Tensor, torch.Tensor, Optional[torch.Tensor], float], torch.Tensor]


def time_grid(steps: int) -> list[float]:
    return [(steps - k) / steps for k in range(steps + 1)]


@torch.no_grad()
def ddpm_sample(
    denoiser: DenoiserFn,
    rgb: torch.Tensor,
    fov_cond,
    steps: int,
    seed: int,
    parameterization: str = "v",
    clip_x: bool = True,
) -> torch.Tensor:
    """Ancestral sampling on t_k = (steps - k) / steps from pure noise at t = 1.

    rgb is (B, 3, H, W); returns the encoded sample (B, 1, H, W).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if parameterization not in ("v", "eps"):
        raise ValueError(f"unknown parameterization {parameterization!r}")
    gen = torch.Generator().manual_seed(int(seed))
    b, _, h, w = rgb.shape
    z = torch.randn((b, 1, h, w), generator=gen, dtype=rgb.dtype)
    grid = time_grid(steps)
    for t, s in zip(grid[:-1], grid[1:]):
        pred = denoiser(z, rgb, fov_cond, t)
        state = DiffusionState(z, t)
        triple = recover_x_eps(state, pred) if parameterization == "v" else recover_from_eps(state, pred)
        x_hat = triple.x_hat.clamp(-1, 1) if clip_x else triple.x_hat
        if s == 0:
            return x_hat
        a_t, s_t = schedule_eval(t)
        a_s, s_s = schedule_eval(s)
        a_ts = a_t / a_s
        var_ts = s_t**2 - a_ts**2 * s_s**2
        mean = a_ts * (s_s**2 / s_t**2) * z + a_s * (var_ts / s_t**2) * x_hat
        std = math.sqrt(max(var_ts, 0.0)) * s_s / s_t
        z = mean + std * torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return z  # unreachable: the grid always ends at 0


def average_samples(samples: Sequence):
    if len(samples) == 0:
        raise ValueError("need at least one sample to average")
    _check_shapes(*samples)
    if isinstance(samples[0], torch.Tensor):
        return torch.stack(list(samples)).mean(dim=0)
    return np.mean(np.stack([np.asarray(s, dtype=np.float64) for s in samples]), axis=0)
