"""On-disk dataset format.

A dataset directory holds ``manifest.json`` plus three files per sample:
``rgb_<id>.ppm`` (binary P6, 8-bit), ``depth_<id>.pfm`` (little-endian
float32 meters) and ``valid_<id>.pgm`` (binary P5, 0/255).
"""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .camera import CameraSpec
from .codec import DepthMap
from .synth import RenderedSample

MANIFEST_VERSION = 1


class DatasetError(Exception):
    """Missing, corrupt or inconsistent dataset files."""


# ---------------------------------------------------------------- PFM


def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
        h, w = data.shape
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
        h, w = data.shape[:2]
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) data, got {data.shape}")
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        # rows are stored bottom to top
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header not in (b"Pf", b"PF"):
            raise DatasetError(f"{path}: not a PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", f.readline())
        if not dims:
            raise DatasetError(f"{path}: malformed PFM header")
        w, h = map(int, dims.groups())
        scale = float(f.readline().rstrip())
        endian = "<" if scale < 0 else ">"
        channels = 3 if header == b"PF" else 1
        raw = f.read()
    count = w * h * channels
    if len(raw) < 4 * count:
        raise DatasetError(f"{path}: truncated PFM data")
    data = np.frombuffer(raw[: 4 * count], dtype=endian + "f4").reshape(
        (h, w, channels) if channels == 3 else (h, w))
    return data[::-1].astype(np.float32)


# ---------------------------------------------------------------- images


def rgb_to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.rint((np.clip(rgb, -1, 1) + 1) * 127.5).astype(np.uint8)


def u8_to_rgb(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 127.5 - 1.0


def write_ppm(path, rgb: np.ndarray):
    Image.fromarray(rgb_to_u8(rgb), mode="RGB").save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        return u8_to_rgb(np.asarray(im.convert("RGB")))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- datasets


def write_dataset(samples: Sequence[RenderedSample], directory, codec_hints: dict | None = None) -> Path:
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        files = {"rgb_file": f"rgb_{sid}.ppm", "depth_file": f"depth_{sid}.pfm", "valid_file": f"valid_{sid}.pgm"}
        write_ppm(root / files["rgb_file"], s.rgb)
        write_pfm(root / files["depth_file"], np.where(s.depth.valid_mask, s.depth.values, 0.0))
        Image.fromarray(s.depth.valid_mask.astype(np.uint8) * 255, mode="L").save(
            root / files["valid_file"], format="PPM")
        entries.append({
            "id": sid,
            **files,
            "height": s.camera.height_px,
            "width": s.camera.width_px,
            "vertical_fov_deg": s.camera.vertical_fov_deg,
            "regime": s.regime,
            "scene_id": s.scene_id,
            "seed": int(s.seed),
            "sha256": {k: _sha256(root / v) for k, v in files.items()},
        })
    manifest = {"version": MANIFEST_VERSION, "codec_hints": codec_hints or {}, "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def read_manifest(directory) -> dict:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    return manifest


def read_dataset(directory, verify: bool = True) -> list[RenderedSample]:
    root = Path(directory)
    manifest = read_manifest(root)
    out = []
    for e in manifest["samples"]:
        for key in ("rgb_file", "depth_file", "valid_file"):
            p = root / e[key]
            if not p.exists():
                raise DatasetError(f"sample {e['id']}: missing {e[key]}")
            if verify and _sha256(p) != e["sha256"][key]:
                raise DatasetError(f"sample {e['id']}: checksum mismatch for {e[key]}")
        rgb = read_ppm(root / e["rgb_file"])
        depth = read_pfm(root / e["depth_file"]).astype(np.float64)
        with Image.open(root / e["valid_file"]) as im:
            valid = np.asarray(im) > 127
        shape = (e["height"], e["width"])
        if rgb.shape[:2] != shape or depth.shape != shape or valid.shape != shape:
            raise DatasetError(f"sample {e['id']}: image sizes disagree with manifest {shape}")
        cam = CameraSpec(e["height"], e["width"], e["vertical_fov_deg"])
        out.append(RenderedSample(rgb, DepthMap(depth, valid), cam, e["regime"],
                                  e.get("scene_id", ""), e.get("seed", 0)))
    return out
