"""Pinhole field-of-view geometry and crop/uncrop FOV augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .codec import DepthMap


@dataclass(frozen=True)
class CameraSpec:
    height_px: int
    width_px: int
    vertical_fov_deg: float

    def __post_init__(self):
        if self.height_px <= 0 or self.width_px <= 0:
            raise ValueError(f"image size must be positive, got {self.height_px}x{self.width_px}")
        if not 0.0 < self.vertical_fov_deg < 180.0:
            raise ValueError(f"vertical FOV must be in (0, 180) degrees, got {self.vertical_fov_deg}")

    @property
    def tan_half(self) -> float:
        return math.tan(math.radians(self.vertical_fov_deg) / 2)


@dataclass(frozen=True)
class FovAugConfig:
    scale_min: float = 0.8
    scale_max: float = 1.5
    pad_noise_std: float = 1.0

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"need 0 < scale_min <= scale_max, got {self.scale_min}, {self.scale_max}")
        if self.pad_noise_std < 0:
            raise ValueError("pad_noise_std must be non-negative")


def fov_to_cond(camera: CameraSpec) -> float:
    """Conditioning scalar tan(theta / 2) for the vertical FOV theta."""
    return camera.tan_half


def fov_from_cond(cond: float) -> float:
    return math.degrees(2 * math.atan(cond))


def focal_from_fov(camera: CameraSpec) -> float:
    return camera.height_px / (2 * camera.tan_half)


def fov_from_focal(focal_px: float, height_px: int) -> float:
    return math.degrees(2 * math.atan(height_px / (2 * focal_px)))


def scaled_camera(camera: CameraSpec, scale: float) -> CameraSpec:
    """Camera whose tan(theta/2) is `scale` times the input's, same pixel size."""
    return CameraSpec(camera.height_px, camera.width_px, fov_from_cond(scale * camera.tan_half))


def perturb_fov_cond(true_cond: float, factor: float) -> float:
    if factor <= 0:
        raise ValueError(f"perturbation factor must be positive, got {factor}")
    return factor * true_cond


def resize_rgb(rgb: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment."""
    if rgb.shape[:2] == (height, width):
        return rgb.copy()
    return cv2.resize(np.ascontiguousarray(rgb, dtype=np.float64), (width, height),
                      interpolation=cv2.INTER_LINEAR)


def resize_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    if grid.shape[:2] == (height, width):
        return grid.copy()
    dtype = grid.dtype
    src = grid.astype(np.uint8) if dtype == bool else np.ascontiguousarray(grid)
    out = cv2.resize(src, (width, height), interpolation=cv2.INTER_NEAREST_EXACT)
    return out.astype(bool) if dtype == bool else out


def central_crop(grid: np.ndarray, crop_h: int, crop_w: int) -> np.ndarray:
    h, w = grid.shape[:2]
    top, left = (h - crop_h) // 2, (w - crop_w) // 2
    return grid[top:top + crop_h, left:left + crop_w]


def fov_augment(rgb: np.ndarray, depth: DepthMap, camera: CameraSpec, scale: float,
                rng_seed, pad_noise_std: float = 1.0):
    """Simulate a camera with tan(theta'/2) = scale * tan(theta/2).

    scale < 1 takes a central crop, scale > 1 pads the image on a larger
    canvas (RGB with Gaussian noise, depth invalid); either way the result
    is resized back to the input resolution.  Depth values are never
    rescaled, only resampled with nearest neighbour.

    rgb is (H, W, 3) in [-1, 1]. Returns (rgb', depth', camera').
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = depth.values.shape
    if rgb.shape[:2] != (h, w):
        raise ValueError(f"rgb {rgb.shape[:2]} and depth {(h, w)} are not aligned")
    new_cam = scaled_camera(camera, scale)
    if scale == 1.0:
        return rgb.copy(), DepthMap(depth.values.copy(), depth.valid_mask.copy()), new_cam

    ch, cw = int(round(scale * h)), int(round(scale * w))
    if ch < 1 or cw < 1:
        raise ValueError(f"scale {scale} leaves no pixels of a {h}x{w} image")

    if scale < 1:
        rgb_c = central_crop(rgb, ch, cw)
        d_c = central_crop(depth.values, ch, cw)
        m_c = central_crop(depth.valid_mask, ch, cw)
    else:
        rng = np.random.default_rng(rng_seed)
        rgb_c = rng.normal(0.0, pad_noise_std, size=(ch, cw, rgb.shape[2]))
        d_c = np.zeros((ch, cw))
        m_c = np.zeros((ch, cw), dtype=bool)
        top, left = (ch - h) // 2, (cw - w) // 2
        rgb_c[top:top + h, left:left + w] = rgb
        d_c[top:top + h, left:left + w] = depth.values
        m_c[top:top + h, left:left + w] = depth.valid_mask

    out_rgb = resize_rgb(rgb_c, h, w)
    out_d = resize_nearest(d_c, h, w)
    out_m = resize_nearest(m_c, h, w)
    out_d = np.where(out_m, out_d, 0.0)
    return out_rgb, DepthMap(out_d, out_m), new_cam
