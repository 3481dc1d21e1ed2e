"""Procedural RGB-D scenes and a pinhole raycaster.

Camera convention: pinhole at the origin looking down +z, x to the right,
y down (image rows grow with y).  Rays are built with a unit z component,
so the ray parameter of a hit is directly its z-depth.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .camera import CameraSpec
from .codec import DepthMap

REGIME_RANGE = {"indoor": (0.5, 10.0), "outdoor": (0.5, 80.0)}

AMBIENT = 0.1
SKY_HORIZON = np.array([0.85, 0.85, 0.90])
SKY_ZENITH = np.array([0.25, 0.45, 0.90])

# seeded palette; albedos are drawn from it with small jitter
PALETTE = np.array([
    [0.80, 0.30, 0.25], [0.25, 0.55, 0.80], [0.35, 0.70, 0.35], [0.85, 0.75, 0.30],
    [0.60, 0.40, 0.70], [0.90, 0.90, 0.85], [0.45, 0.35, 0.25], [0.30, 0.65, 0.65],
])


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass
class Box:
    """Axis-aligned box; `size` holds the full extents along x, y, z."""
    center: np.ndarray
    size: np.ndarray
    albedo: np.ndarray


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray


Primitive = Union[Sphere, Box, Plane]


@dataclass
class Scene:
    primitives: list = field(default_factory=list)
    regime: str = "indoor"
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0, 0.0]))
    seed: Optional[int] = None

    def __post_init__(self):
        if self.regime not in REGIME_RANGE:
            raise ValueError(f"unknown regime {self.regime!r}")
        ld = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = ld / np.linalg.norm(ld)

    def max_z(self) -> float:
        """Farthest z reached by any bounded primitive (planes are unbounded)."""
        zs = [0.0]
        for p in self.primitives:
            if isinstance(p, Sphere):
                zs.append(p.center[2] + p.radius)
            elif isinstance(p, Box):
                zs.append(p.center[2] + p.size[2] / 2)
        return float(max(zs))


@dataclass
class RenderedSample:
    rgb: np.ndarray  # (H, W, 3) in [-1, 1]
    depth: DepthMap
    camera: CameraSpec
    regime: str
    scene_id: str = ""
    seed: int = 0


# ---------------------------------------------------------------- scenes


def _albedo(rng):
    base = PALETTE[rng.integers(len(PALETTE))]
    return np.clip(base + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)


def _light(rng):
    # mostly from above (-y) and behind the camera (-z)
    v = np.array([rng.uniform(-0.6, 0.6), -1.0, rng.uniform(-0.9, -0.1)])
    return v / np.linalg.norm(v)


def generate_scene(regime: str, seed: int) -> Scene:
    rng = np.random.default_rng([int(seed), 0 if regime == "indoor" else 1])
    if regime == "indoor":
        return _indoor_scene(rng, seed)
    if regime == "outdoor":
        return _outdoor_scene(rng, seed)
    raise ValueError(f"unknown regime {regime!r}")


def _indoor_scene(rng, seed) -> Scene:
    ex, ey, ez = rng.uniform(2.0, 10.0, 3)
    ey = min(ey, 4.0)
    back = rng.uniform(0.2, 0.6)
    ez = max(ez, back + 2.0)
    x_lo = -rng.uniform(0.3, 0.7) * ex
    cam_h = rng.uniform(0.4, 0.7) * ey  # height above the floor
    floor_y = cam_h
    room = Box(
        center=np.array([x_lo + ex / 2, floor_y - ey / 2, -back + ez / 2]),
        size=np.array([ex, ey, ez]),
        albedo=_albedo(rng),
    )
    prims: list = [room]
    z_far = ez - back
    for _ in range(rng.integers(3, 9)):
        if rng.random() < 0.5:
            r = rng.uniform(0.15, min(0.8, ex / 4, ey / 3))
            cz = rng.uniform(min(1.0 + r, z_far - r), z_far - r)
            cx = rng.uniform(x_lo + r, x_lo + ex - r)
            prims.append(Sphere(np.array([cx, floor_y - r, cz]), float(r), _albedo(rng)))
        else:
            s = rng.uniform(0.2, 1.5, 3)
            s = np.minimum(s, [ex / 2, ey * 0.8, z_far / 3])
            cz = rng.uniform(min(1.0 + s[2] / 2, z_far - s[2] / 2), z_far - s[2] / 2)
            cx = rng.uniform(x_lo + s[0] / 2, x_lo + ex - s[0] / 2)
            prims.append(Box(np.array([cx, floor_y - s[1] / 2, cz]), s, _albedo(rng)))
    return Scene(prims, "indoor", _light(rng), seed)


def _outdoor_scene(rng, seed) -> Scene:
    cam_h = rng.uniform(1.2, 2.2)
    ground = Plane(np.array([0.0, cam_h, 0.0]), np.array([0.0, -1.0, 0.0]), _albedo(rng) * 0.8)
    prims: list = [ground]
    for _ in range(rng.integers(3, 11)):
        cz = rng.uniform(5.0, 70.0)
        cx = rng.uniform(-0.7, 0.7) * cz
        if rng.random() < 0.4:
            r = rng.uniform(0.5, 4.0)
            prims.append(Sphere(np.array([cx, cam_h - r, cz]), float(r), _albedo(rng)))
        else:
            s = np.array([rng.uniform(1.0, 10.0), rng.uniform(2.0, 15.0), rng.uniform(1.0, 8.0)])
            s[2] = min(s[2], 2 * (cz - 4.5))
            prims.append(Box(np.array([cx, cam_h - s[1] / 2, cz]), s, _albedo(rng)))
    return Scene(prims, "outdoor", _light(rng), seed)


def scale_scene(scene: Scene, k: float) -> Scene:
    """Scale every primitive about the camera origin by k.

    The image is unchanged and every depth is multiplied by k.  An indoor
    scene pushed beyond the indoor range is relabelled outdoor.
    """
    if k <= 0:
        raise ValueError(f"scale must be positive, got {k}")
    prims = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            prims.append(Sphere(p.center * k, p.radius * k, p.albedo.copy()))
        elif isinstance(p, Box):
            prims.append(Box(p.center * k, p.size * k, p.albedo.copy()))
        else:
            prims.append(Plane(p.point * k, p.normal.copy(), p.albedo.copy()))
    regime = scene.regime
    if regime == "indoor" and scene.max_z() * k > REGIME_RANGE["indoor"][1]:
        regime = "outdoor"
    return Scene(prims, regime, scene.light_dir.copy(), scene.seed)


# ---------------------------------------------------------------- raycasting


def pixel_rays(camera: CameraSpec) -> np.ndarray:
    """(H, W, 3) ray directions through pixel centres, z component 1."""
    h, w = camera.height_px, camera.width_px
    step = 2.0 * camera.tan_half / h
    xs = (np.arange(w) + 0.5 - w / 2) * step
    ys = (np.arange(h) + 0.5 - h / 2) * step
    d = np.empty((h, w, 3))
    d[..., 0] = xs[None, :]
    d[..., 1] = ys[:, None]
    d[..., 2] = 1.0
    return d


def _hit_sphere(d, p: Sphere):
    c = p.center
    dd = (d * d).sum(-1)
    dc = d @ c
    cc = c @ c - p.radius**2
    disc = dc * dc - dd * cc
    ok = disc >= 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    t_near = (dc - root) / dd
    t_far = (dc + root) / dd
    inside = cc < 0
    t = t_far if inside else t_near
    ok &= t > 0
    hit = t[..., None] * d
    n = (hit - c) / p.radius
    if inside:
        n = -n
    return np.where(ok, t, np.inf), n


def _hit_box(d, p: Box):
    lo = p.center - p.size / 2
    hi = p.center + p.size / 2
    inside = bool(np.all(lo < 0) and np.all(hi > 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / d
        t2 = hi / d
    zero = d == 0
    inslab = (lo <= 0) & (hi >= 0)
    t1 = np.where(zero, np.where(inslab, -np.inf, np.inf), t1)
    t2 = np.where(zero, np.where(inslab, np.inf, np.inf), t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(-1)
    t_far = tmax.min(-1)
    ok = (t_near <= t_far) & (t_far > 0)
    if inside:
        t = t_far
        axis = tmax.argmin(-1)
        sign = np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
        sign = -sign  # inner face points back at the camera
    else:
        t = t_near
        ok &= t_near > 0
        axis = tmin.argmax(-1)
        sign = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
    n = np.zeros(d.shape)
    np.put_along_axis(n, axis[..., None], sign[..., None], -1)
    return np.where(ok, t, np.inf), n


def _hit_plane(d, p: Plane):
    nrm = p.normal / np.linalg.norm(p.normal)
    denom = d @ nrm
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p.point @ nrm) / denom
    ok = (denom != 0) & (t > 0)
    facing = np.where(denom < 0, 1.0, -1.0)[..., None] * nrm
    return np.where(ok, t, np.inf), np.broadcast_to(facing, d.shape)


_HIT = {Sphere: _hit_sphere, Box: _hit_box, Plane: _hit_plane}


def sky_color(d: np.ndarray) -> np.ndarray:
    """Horizon-to-zenith gradient driven by ray elevation."""
    elev = np.clip(-d[..., 1] / np.linalg.norm(d, axis=-1), 0.0, 1.0)
    return SKY_HORIZON + (SKY_ZENITH - SKY_HORIZON) * elev[..., None]


def render(scene: Scene, camera: CameraSpec, resolution: Optional[tuple] = None,
           seed: int = 0, rgb_noise_std: float = 0.0) -> RenderedSample:
    """One primary ray per pixel; nearest-hit z-depth and Lambertian RGB.

    Pixels with no hit, or whose hit falls outside the regime's depth
    range, are invalid.  `seed` drives the optional sensor noise on RGB.
    """
    if resolution is not None:
        camera = CameraSpec(int(resolution[0]), int(resolution[1]), camera.vertical_fov_deg)
    d = pixel_rays(camera)
    t_best = np.full(d.shape[:2], np.inf)
    n_best = np.zeros(d.shape)
    a_best = np.zeros(d.shape)
    for prim in scene.primitives:
        t, n = _HIT[type(prim)](d, prim)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        n_best = np.where(closer[..., None], n, n_best)
        a_best = np.where(closer[..., None], prim.albedo, a_best)

    hit = np.isfinite(t_best)
    shade = np.maximum(0.0, n_best @ scene.light_dir) + AMBIENT
    color = np.where(hit[..., None], a_best * shade[..., None], sky_color(d))
    rgb = np.clip(color, 0.0, 1.0) * 2.0 - 1.0
    if rgb_noise_std > 0:
        rgb = rgb + np.random.default_rng(seed).normal(0.0, rgb_noise_std, rgb.shape)

    lo, hi = REGIME_RANGE[scene.regime]
    valid = hit & (t_best >= lo) & (t_best <= hi)
    depth = DepthMap(np.where(valid, t_best, 0.0), valid)
    sid = f"{scene.regime}-{scene.seed}" if scene.seed is not None else ""
    return RenderedSample(rgb, depth, camera, scene.regime, sid, seed)


# ---------------------------------------------------------------- batches


@dataclass(frozen=True)
class SampleSpec:
    """Everything that determines one generated sample."""
    regime: str
    scene_seed: int
    fov_deg: float
    height: int
    width: int
    scale: float = 1.0


def plan_samples(n: int, regime: str, resolution: tuple, fov_range: tuple, seed: int) -> list[SampleSpec]:
    """Per-sample specs derived from (seed, index) only, so any partition of
    the work across processes yields the same dataset."""
    if n < 1:
        raise ValueError("need at least one sample")
    if regime not in ("indoor", "outdoor", "mixed"):
        raise ValueError(f"unknown regime {regime!r}")
    lo, hi = fov_range
    if not 0 < lo <= hi < 180:
        raise ValueError(f"bad FOV range {fov_range}")
    specs = []
    for i in range(n):
        rng = np.random.default_rng([int(seed), i, 7])
        reg = regime if regime != "mixed" else ("indoor" if i % 2 == 0 else "outdoor")
        scene_seed = int(rng.integers(2**31 - 1))
        fov = float(rng.uniform(lo, hi))
        specs.append(SampleSpec(reg, scene_seed, fov, int(resolution[0]), int(resolution[1])))
    return specs


def render_spec(spec: SampleSpec) -> RenderedSample:
    scene = generate_scene(spec.regime, spec.scene_seed)
    if spec.scale != 1.0:
        scene = scale_scene(scene, spec.scale)
    cam = CameraSpec(spec.height, spec.width, spec.fov_deg)
    s = render(scene, cam, seed=spec.scene_seed)
    s.scene_id = f"{spec.regime}-{spec.scene_seed}" + ("" if spec.scale == 1.0 else f"-x{spec.scale:.4f}")
    return s


def render_specs(specs: Sequence[SampleSpec], workers: int = 1) -> list[RenderedSample]:
    if workers <= 1:
        return [render_spec(s) for s in specs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(render_spec, specs, chunksize=8))


def generate_samples(n: int, regime: str, resolution=(64, 64), fov_range=(45.0, 75.0),
                     seed: int = 0, workers: int = 1) -> list[RenderedSample]:
    return render_specs(plan_samples(n, regime, resolution, fov_range, seed), workers)


def with_spec(spec: SampleSpec, **changes) -> SampleSpec:
    return dataclasses.replace(spec, **changes)
