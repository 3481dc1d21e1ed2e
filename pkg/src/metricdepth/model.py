"""Small RGB-conditioned U-Net denoiser with timestep + FOV FiLM conditioning."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

TIME_EMBED_SCALE = 1000.0
FOV_EMBED_SCALE = 100.0


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    depth_levels: int = 3
    embed_dim: int = 128
    parameterization: str = "v"
    use_fov_conditioning: bool = True

    def __post_init__(self):
        if self.embed_dim % 2:
            raise ValueError(f"embed_dim must be even, got {self.embed_dim}")
        if self.base_channels < 1 or self.depth_levels < 1:
            raise ValueError("base_channels and depth_levels must be positive")
        if self.parameterization not in ("v", "eps"):
            raise ValueError(f"parameterization must be 'v' or 'eps', got {self.parameterization!r}")


def sincos_embed(value, dim: int) -> torch.Tensor:
    """Transformer-style embedding with interleaved (sin, cos) pairs.

    `value` may be a float or a (B,) tensor; returns (dim,) or (B, dim).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    v = torch.as_tensor(value, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    phase = v[..., None] * freqs
    out = torch.stack([torch.sin(phase), torch.cos(phase)], dim=-1)
    return out.reshape(*v.shape, dim)


class Conditioning(nn.Module):
    """Sum of the projected timestep and FOV embeddings."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.proj_t = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.proj_fov = nn.Linear(cfg.embed_dim, cfg.embed_dim) if cfg.use_fov_conditioning else None

    def forward(self, t, fov_cond=None, batch: Optional[int] = None) -> torch.Tensor:
        dtype = self.proj_t.weight.dtype
        t = _per_example(t, batch)
        emb = self.proj_t(sincos_embed(t * TIME_EMBED_SCALE, self.cfg.embed_dim).to(dtype))
        if self.proj_fov is None:
            if fov_cond is not None:
                raise ValueError("FOV conditioning value given to a model built without FOV conditioning")
            return emb
        if fov_cond is None:
            raise ValueError("FOV-conditioned model needs a fov_cond value")
        fov = _per_example(fov_cond, batch)
        return emb + self.proj_fov(sincos_embed(fov * FOV_EMBED_SCALE, self.cfg.embed_dim).to(dtype))


def build_conditioning(cond: Conditioning, t, fov_cond=None) -> torch.Tensor:
    return cond(t, fov_cond)


def _per_example(x, batch):
    x = torch.as_tensor(x, dtype=torch.float64)
    if batch is not None and x.ndim == 0:
        x = x.expand(batch)
    return x


def film_modulate(features: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """features * (1 + scale) + shift, per channel; scale/shift are (B, C) or (C,)."""
    c = features.shape[1]
    if scale.shape[-1] != c or shift.shape[-1] != c:
        raise ValueError(f"FiLM parameters for {scale.shape[-1]} channels applied to {c} channels")
    if scale.ndim == 1:
        scale, shift = scale[None], shift[None]
    return features * (1 + scale[:, :, None, None]) + shift[:, :, None, None]


class FiLM(nn.Module):
    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.head = nn.Linear(embed_dim, 2 * channels)
        # identity modulation at init
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, cond):
        scale, shift = self.head(F.silu(cond)).chunk(2, dim=-1)
        return film_modulate(x, scale, shift)


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0 and c >= g * 2:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.film = FiLM(embed_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, cond):
        h = F.silu(self.film(self.norm1(self.conv1(x)), cond))
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Encoder-decoder over concat(z, rgb) with one FiLM-modulated block per
    resolution on each side plus a bottleneck block."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        self.cond = Conditioning(cfg)
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth_levels)]
        self.inp = nn.Conv2d(4, cfg.base_channels, 3, padding=1)
        self.down = nn.ModuleList()
        c = cfg.base_channels
        for co in chans:
            self.down.append(ResBlock(c, co, cfg.embed_dim))
            c = co
        self.mid = ResBlock(c, c, cfg.embed_dim)
        self.up = nn.ModuleList()
        for co in reversed(chans):
            self.up.append(ResBlock(c + co, co, cfg.embed_dim))
            c = co
        self.out = nn.Conv2d(c, 1, 3, padding=1)

    @property
    def multiple(self) -> int:
        return 2 ** (self.cfg.depth_levels - 1)

    def forward(self, z, rgb, t, fov_cond=None):
        if z.shape[0] != rgb.shape[0] or z.shape[-2:] != rgb.shape[-2:]:
            raise ValueError(f"latent {tuple(z.shape)} and rgb {tuple(rgb.shape)} are not aligned")
        h, w = z.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {self.multiple}")
        if torch.isnan(z).any() or torch.isnan(rgb).any():
            raise ValueError("NaN in denoiser input")
        cond = self.cond(t, fov_cond, batch=z.shape[0])
        x = self.inp(torch.cat([z, rgb], dim=1))
        skips = []
        for i, blk in enumerate(self.down):
            x = blk(x, cond)
            skips.append(x)
            if i < len(self.down) - 1:
                x = F.avg_pool2d(x, 2)
        x = self.mid(x, cond)
        for blk in self.up:
            skip = skips.pop()
            if x.shape[-1] != skip.shape[-1]:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = blk(torch.cat([x, skip], dim=1), cond)
        return self.out(x)

    def as_denoiser_fn(self):
        """Adapter to the sampler's (z, rgb, fov_cond, t) calling convention."""
        return lambda z, rgb, fov, t: self(z, rgb, t, fov)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------- checkpoints

PARAMS_FILE = "params.pt"


class CheckpointError(Exception):
    pass


def save_checkpoint(model: Denoiser, directory, **meta) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), root / PARAMS_FILE)
    record = {"kind": "denoiser", "config": asdict(model.cfg), "parameterization": model.cfg.parameterization,
              "schedule": "cosine", "params_file": PARAMS_FILE, **meta}
    (root / "meta.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    return root


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise CheckpointError(f"{directory}: no meta.json")
    return json.loads(path.read_text())


def load_checkpoint(directory) -> tuple[Denoiser, dict]:
    root = Path(directory)
    meta = read_meta(root)
    if meta.get("kind") != "denoiser":
        raise CheckpointError(f"{root}: not a denoiser checkpoint (kind={meta.get('kind')!r})")
    model = Denoiser(DenoiserConfig(**meta["config"]))
    model.load_state_dict(torch.load(root / meta["params_file"], weights_only=True))
    model.eval()
    return model, meta
