import math

import pytest
import torch

from metricdepth.diffusion import forward_noise, loss_truncated_snr_l1, recover_x_eps
from metricdepth.model import (
    CheckpointError,
    Conditioning,
    Denoiser,
    DenoiserConfig,
    FiLM,
    build_conditioning,
    count_parameters,
    film_modulate,
    load_checkpoint,
    save_checkpoint,
    sincos_embed,
)
from oracles import gradient_check

SMALL = DenoiserConfig(base_channels=8, depth_levels=3, embed_dim=16)


def test_sincos_examples():
    e = sincos_embed(0.0, 8)
    assert e.tolist() == [0.0, 1.0] * 4
    e = sincos_embed(math.pi / 2, 2)
    assert e[0].item() == pytest.approx(1.0) and e[1].item() == pytest.approx(0.0, abs=1e-15)
    assert torch.equal(sincos_embed(0.37, 16), sincos_embed(0.37, 16))
    with pytest.raises(ValueError):
        sincos_embed(1.0, 7)
    assert sincos_embed(torch.tensor([0.1, 0.2]), 6).shape == (2, 6)


def test_config_rejects_odd_embed():
    with pytest.raises(ValueError):
        DenoiserConfig(embed_dim=5)
    with pytest.raises(ValueError):
        DenoiserConfig(parameterization="x")


def test_conditioning_unconditioned_rejects_fov():
    cond = Conditioning(DenoiserConfig(embed_dim=8, use_fov_conditioning=False))
    assert cond.proj_fov is None
    with pytest.raises(ValueError):
        cond(0.5, 0.3)
    with pytest.raises(ValueError):
        Conditioning(DenoiserConfig(embed_dim=8))(0.5, None)


def test_conditioning_zero_fov_projection_is_identity():
    torch.manual_seed(0)
    c_fov = Conditioning(DenoiserConfig(embed_dim=8))
    torch.nn.init.zeros_(c_fov.proj_fov.weight)
    torch.nn.init.zeros_(c_fov.proj_fov.bias)
    c_t = Conditioning(DenoiserConfig(embed_dim=8, use_fov_conditioning=False))
    c_t.proj_t.load_state_dict(c_fov.proj_t.state_dict())
    assert torch.equal(build_conditioning(c_fov, 0.4, 0.7), build_conditioning(c_t, 0.4))


def test_conditioning_distinct_fov_values():
    torch.manual_seed(1)
    c = Conditioning(DenoiserConfig(embed_dim=8))
    assert not torch.allclose(c(0.4, 0.5), c(0.4, 0.6))


def test_film_examples():
    x = torch.randn(2, 3, 4, 4)
    zero = torch.zeros(3)
    assert torch.equal(film_modulate(x, zero, zero), x)
    assert torch.equal(film_modulate(x, -torch.ones(3), zero), torch.zeros_like(x))
    c = torch.tensor([0.5, -1.0, 2.0])
    assert torch.allclose(film_modulate(x, zero, c), x + c[None, :, None, None])
    with pytest.raises(ValueError):
        film_modulate(x, torch.zeros(4), torch.zeros(4))


def test_film_starts_at_identity():
    film = FiLM(8, 3)
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(film(x, torch.randn(2, 8)), x)


@pytest.mark.parametrize("hw", [(32, 32), (48, 64), (64, 64)])
def test_shape_contract(hw):
    torch.manual_seed(0)
    model = Denoiser(SMALL)
    z = torch.randn(2, 1, *hw)
    out = model(z, torch.rand(2, 3, *hw) * 2 - 1, 0.5, torch.tensor([0.5, 0.6]))
    assert out.shape == z.shape and torch.isfinite(out).all()


def test_shape_errors():
    model = Denoiser(SMALL)
    with pytest.raises(ValueError, match="aligned"):
        model(torch.randn(1, 1, 32, 32), torch.randn(1, 3, 16, 16), 0.5, 0.5)
    with pytest.raises(ValueError, match="divisible"):
        model(torch.randn(1, 1, 30, 30), torch.randn(1, 3, 30, 30), 0.5, 0.5)
    z = torch.randn(1, 1, 32, 32)
    z[0, 0, 3, 3] = float("nan")
    with pytest.raises(ValueError, match="NaN"):
        model(z, torch.randn(1, 3, 32, 32), 0.5, 0.5)


def test_default_model_size():
    n = count_parameters(Denoiser(DenoiserConfig()))
    assert 1_000_000 <= n <= 3_000_000


def _random_batch(seed=0, b=4, hw=16):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(b, 1, hw, hw, generator=g) * 2 - 1
    eps = torch.randn(b, 1, hw, hw, generator=g)
    rgb = torch.rand(b, 3, hw, hw, generator=g) * 2 - 1
    t = torch.rand(b, generator=g, dtype=torch.float64) * 0.9 + 0.05
    fov = torch.rand(b, generator=g, dtype=torch.float64) + 0.3
    return x, eps, rgb, t, fov


def _loss(model, x, eps, rgb, t, fov):
    state = forward_noise(x, eps, t)
    return loss_truncated_snr_l1(x, eps, recover_x_eps(state, model(state.z_t, rgb, t, fov)),
                                 torch.ones_like(x, dtype=torch.bool))


def test_gradient_flow_reaches_every_parameter():
    torch.manual_seed(0)
    model = Denoiser(SMALL)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    # zero-initialised FiLM heads block the conditioning gradient until they move once
    opt.zero_grad()
    _loss(model, *_random_batch(0)).backward()
    opt.step()
    opt.zero_grad()
    _loss(model, *_random_batch(1)).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert not dead


def test_fov_sensitivity_after_training_step():
    torch.manual_seed(0)
    model = Denoiser(SMALL)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    _loss(model, *_random_batch(0)).backward()
    opt.step()
    model.eval()
    z, rgb = torch.randn(1, 1, 16, 16), torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        a, b = model(z, rgb, 0.5, 0.4), model(z, rgb, 0.5, 0.9)
    assert (a - b).abs().mean() > 0


def test_unconditioned_model_ignores_fov_path():
    model = Denoiser(DenoiserConfig(8, 2, 16, use_fov_conditioning=False))
    assert not any("proj_fov" in n for n, _ in model.named_parameters())
    with pytest.raises(ValueError):
        model(torch.randn(1, 1, 8, 8), torch.randn(1, 3, 8, 8), 0.5, 0.5)


def test_determinism_in_eval_mode():
    torch.manual_seed(3)
    model = Denoiser(SMALL).eval()
    z, rgb = torch.randn(2, 1, 16, 16), torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(model(z, rgb, 0.3, 0.5), model(z, rgb, 0.3, 0.5))


def test_gradient_check_against_finite_differences():
    result = gradient_check()
    assert result["n_params"] <= 1000
    assert result["kink_margin"] > 1e-3
    assert result["max_rel_err"] < 1e-3
    assert result["max_abs_err_tiny"] < 1e-8


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = Denoiser(SMALL)
    save_checkpoint(model, tmp_path / "ck", steps=5)
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta["steps"] == 5 and meta["parameterization"] == "v" and meta["schedule"] == "cosine"
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
