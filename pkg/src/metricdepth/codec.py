"""Metric depth <-> [-1, 1] diffusion target encoding.

Depth maps are numpy arrays in meters with a boolean validity mask.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree


class CodecMode(str, Enum):
    LINEAR = "linear"
    LOG = "log"


class EmptyDepthError(ValueError):
    """Raised when a depth map has no valid pixel to work from."""


@dataclass
class DepthMap:
    values: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {self.values.shape}")
        if self.values.shape != self.valid_mask.shape:
            raise ValueError(
                f"values {self.values.shape} and mask {self.valid_mask.shape} differ in shape"
            )

    @classmethod
    def dense(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def check_positive(self):
        bad = self.valid_mask & ~(self.values > 0)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValueError(f"non-positive depth {self.values[i, j]} at valid pixel ({i}, {j})")


@dataclass(frozen=True)
class DepthCodecConfig:
    mode: CodecMode = CodecMode.LOG
    d_min: float = 0.5
    d_max: float = 80.0

    def __post_init__(self):
        object.__setattr__(self, "mode", CodecMode(self.mode))
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")


@dataclass
class EncodedDepth:
    values: np.ndarray
    valid_mask: np.ndarray


def normalize_unit(u):
    return np.clip(2.0 * np.asarray(u, dtype=np.float64) - 1.0, -1.0, 1.0)


def _unit_from_depth(d, cfg: DepthCodecConfig):
    if cfg.mode is CodecMode.LINEAR:
        return d / cfg.d_max
    return np.log(d / cfg.d_min) / np.log(cfg.d_max / cfg.d_min)


def encode(depth: DepthMap, cfg: DepthCodecConfig) -> EncodedDepth:
    depth.check_positive()
    out = np.zeros(depth.values.shape, dtype=np.float64)
    m = depth.valid_mask
    out[m] = normalize_unit(_unit_from_depth(depth.values[m], cfg))
    return EncodedDepth(out, depth.valid_mask.copy())


def decode_values(values, cfg: DepthCodecConfig) -> np.ndarray:
    """Inverse of the encoding on raw arrays (clipped to [-1, 1] first)."""
    u = (np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0
    if cfg.mode is CodecMode.LINEAR:
        # floor keeps log metrics defined
        return np.maximum(u * cfg.d_max, cfg.d_min)
    return cfg.d_min * np.exp(u * np.log(cfg.d_max / cfg.d_min))


def decode(enc: EncodedDepth | np.ndarray, cfg: DepthCodecConfig) -> DepthMap:
    values = enc.values if isinstance(enc, EncodedDepth) else enc
    return DepthMap.dense(decode_values(values, cfg))


def infill_nearest(depth: DepthMap) -> DepthMap:
    """Fill every invalid pixel with its nearest valid pixel's value.

    Distances are exact Euclidean pixel distances; ties go to the valid
    pixel with the smallest row-major index.
    """
    valid = depth.valid_mask
    if not valid.any():
        raise EmptyDepthError("cannot infill a depth map with no valid pixels")
    if valid.all():
        return DepthMap(depth.values.copy(), valid.copy())

    src = np.argwhere(valid)  # row-major order
    dst = np.argwhere(~valid)
    tree = cKDTree(src)
    k = min(_TIE_K, len(src))
    _, idx = tree.query(dst, k=k)
    idx = idx.reshape(len(dst), k)
    # integer squared distances make ties exact
    d2 = ((src[idx] - dst[:, None, :]) ** 2).sum(axis=2)
    best = d2.min(axis=1, keepdims=True)
    choice = np.where(d2 == best, idx, np.iinfo(np.int64).max).min(axis=1)

    # all k candidates tied: more equidistant pixels may exist beyond k
    saturated = np.flatnonzero((d2 == best).all(axis=1)) if k < len(src) else []
    for r in saturated:
        cand = np.asarray(tree.query_ball_point(dst[r], np.sqrt(best[r, 0]) + 1e-6))
        cd2 = ((src[cand] - dst[r]) ** 2).sum(axis=1)
        choice[r] = cand[cd2 == best[r, 0]].min()

    out = depth.values.copy()
    out[dst[:, 0], dst[:, 1]] = depth.values[src[choice, 0], src[choice, 1]]
    return DepthMap(out, np.ones_like(valid))


_TIE_K = 16
