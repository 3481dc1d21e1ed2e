"""Independent reference computations shared by the unit and acceptance tests."""
from __future__ import annotations

import numpy as np
import torch

from metricdepth.camera import CameraSpec, fov_augment
from metricdepth.diffusion import forward_noise, loss_truncated_snr_l1, recover_x_eps, schedule_eval, v_target
from metricdepth.model import Denoiser, DenoiserConfig, count_parameters
from metricdepth.synth import generate_scene, render, scale_scene

TINY = DenoiserConfig(base_channels=2, depth_levels=1, embed_dim=4)


def tiny_denoiser(seed: int = 0) -> Denoiser:
    """float64 denoiser with < 1k parameters and random (non-identity) FiLM heads."""
    torch.manual_seed(seed)
    model = Denoiser(TINY).double()
    for name, p in model.named_parameters():
        if "film.head" in name:
            torch.nn.init.normal_(p, std=0.3)
    assert count_parameters(model) <= 1000
    return model


def gradient_check(seed: int = 0, t: float = 0.3, h: float = 1e-6) -> dict:
    """Compares autograd gradients of the truncated-SNR L1 loss against central
    finite differences for every parameter of a tiny denoiser.

    The clean target is pushed far from the prediction so no |v - v_hat| term
    sits within h of its kink, and t != 0.5 keeps the max() branches apart.
    """
    model = tiny_denoiser(seed)
    g = torch.Generator().manual_seed(seed)
    shape = (2, 1, 4, 4)
    x = torch.rand(shape, generator=g, dtype=torch.float64) * 0.4 + 0.5
    eps = torch.randn(shape, generator=g, dtype=torch.float64)
    rgb = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    fov = torch.tensor([0.4, 0.9], dtype=torch.float64)
    mask = torch.ones(shape, dtype=torch.bool)
    mask[0, 0, 0, :2] = False
    state = forward_noise(x, eps, t)
    a, s = schedule_eval(t)
    assert abs(a - s) > 0.1

    def loss_fn():
        pred = model(state.z_t, rgb, t, fov)
        return loss_truncated_snr_l1(x, eps, recover_x_eps(state, pred), mask), pred

    loss, pred = loss_fn()
    margin = (v_target(x, eps, t) - pred).abs()[mask].min().item()
    model.zero_grad()
    loss.backward()
    params = list(model.parameters())
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn()[0].item()
                flat[i] = orig - h
                down = loss_fn()[0].item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = torch.maximum(analytic.abs(), numeric.abs())
    big = scale > 1e-7
    rel = ((analytic - numeric).abs()[big] / scale[big]).max().item()
    small_abs = (analytic - numeric).abs()[~big].max().item() if (~big).any() else 0.0
    return {"n_params": analytic.numel(), "max_rel_err": rel, "max_abs_err_tiny": small_abs,
            "kink_margin": margin, "n_checked": int(big.sum())}


def geometry_crop_case(rng: np.random.Generator, size: int = 48) -> dict:
    """Renders a scene at fov theta, applies a crop-scale FOV augmentation and
    compares against a direct render of the narrower camera.

    The crop size is an even integer so the crop window lands on whole pixels.
    Depth is compared pixel for pixel against a render of the cropped camera at
    crop resolution; RGB is compared after the augmentation's resize against a
    render of the cropped camera at full resolution.
    """
    theta = float(rng.uniform(30, 120))
    crop = int(rng.choice(np.arange(size // 2, size, 2)))
    scale = crop / size
    scene = generate_scene(str(rng.choice(["indoor", "outdoor"])), int(rng.integers(1 << 30)))
    cam = CameraSpec(size, size, theta)
    full = render(scene, cam)
    rgb_aug, depth_aug, cam_aug = fov_augment(full.rgb, full.depth, cam, scale, rng_seed=0)

    direct_crop = render(scene, CameraSpec(crop, crop, cam_aug.vertical_fov_deg))
    off = (size - crop) // 2
    window = full.depth.values[off:off + crop, off:off + crop]
    wmask = full.depth.valid_mask[off:off + crop, off:off + crop]
    both = wmask & direct_crop.depth.valid_mask
    depth_rel = float(np.max(np.abs(window[both] - direct_crop.depth.values[both]) / direct_crop.depth.values[both])) \
        if both.any() else 0.0
    mask_agree = float(np.mean(wmask == direct_crop.depth.valid_mask))

    direct_full = render(scene, cam_aug)
    rgb_mae = float(np.mean(np.abs(rgb_aug - direct_full.rgb)))
    return {"theta": theta, "scale": scale, "rgb_mae": rgb_mae, "depth_rel": depth_rel, "mask_agree": mask_agree,
            "aug_shape": depth_aug.values.shape}


def scale_ambiguity_case(seed: int, k: float, size: int = 32, theta: float = 60.0) -> dict:
    scene = generate_scene("indoor" if seed % 2 else "outdoor", seed)
    cam = CameraSpec(size, size, theta)
    a = render(scene, cam)
    scaled = scale_scene(scene, k)
    b = render(scaled, cam)
    # pixels pushed out of the regime range by k drop out of the comparison
    both = a.depth.valid_mask & b.depth.valid_mask
    return {
        "k": k,
        "rgb_max": float(np.max(np.abs(a.rgb - b.rgb))),
        "depth_max_rel": float(np.max(np.abs(b.depth.values[both] - k * a.depth.values[both])
                                      / (k * a.depth.values[both]))) if both.any() else 0.0,
        "n_valid": int(both.sum()),
    }
