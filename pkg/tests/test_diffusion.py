import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from metricdepth.diffusion import (
    DiffusionState,
    PredictionTriple,
    average_samples,
    ddpm_sample,
    forward_noise,
    loss_eps_l1,
    loss_truncated_snr_l1,
    recover_from_eps,
    recover_x_eps,
    schedule_eval,
    schedule_tensor,
    time_grid,
    v_target,
)

R2 = math.sqrt(0.5)


def test_schedule_endpoints():
    assert schedule_eval(0.0) == (1.0, 0.0)
    assert schedule_eval(1.0) == (0.0, 1.0)
    a, s = schedule_eval(0.5)
    assert a == pytest.approx(0.70711, abs=1e-5) and s == pytest.approx(0.70711, abs=1e-5)


@pytest.mark.parametrize("t", [-0.1, 1.0001])
def test_schedule_rejects_out_of_range(t):
    with pytest.raises(ValueError):
        schedule_eval(t)
    with pytest.raises(ValueError):
        DiffusionState(np.zeros(1), t)


def test_variance_preserving_and_decreasing():
    ts = np.random.default_rng(0).uniform(0, 1, 1000)
    for t in ts:
        a, s = schedule_eval(t)
        assert abs(a * a + s * s - 1) < 1e-12
    grid = np.linspace(0, 1, 1001)
    alphas = [schedule_eval(t)[0] for t in grid]
    assert all(x > y for x, y in zip(alphas, alphas[1:]))


def test_schedule_tensor_matches_scalar():
    t = torch.tensor([0.0, 0.1, 0.5, 0.9, 1.0], dtype=torch.float64)
    a, s = schedule_tensor(t)
    for ti, ai, si in zip(t.tolist(), a.tolist(), s.tolist()):
        assert (ai, si) == pytest.approx(schedule_eval(ti), abs=1e-15)


def test_forward_noise_examples():
    x = np.array([[0.5, -0.3]])
    eps = np.array([[-0.2, 1.1]])
    assert np.array_equal(forward_noise(x, eps, 0.0).z_t, x)
    assert np.array_equal(forward_noise(x, eps, 1.0).z_t, eps)
    z = forward_noise(np.array([0.5]), np.array([-0.2]), 0.5).z_t[0]
    assert z == pytest.approx(0.21213, abs=1e-5)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(2), np.zeros(3), 0.5)


def test_v_target_examples():
    x = np.array([0.3, -0.7])
    eps = np.array([1.5, 0.2])
    assert np.array_equal(v_target(x, eps, 0.0), eps)
    assert np.array_equal(v_target(x, eps, 1.0), -x)
    assert v_target(np.array([1.0]), np.array([1.0]), 0.5)[0] == pytest.approx(0.0, abs=1e-15)


def test_recover_examples():
    rng = np.random.default_rng(1)
    x, eps = rng.uniform(-1, 1, (4, 4)), rng.normal(size=(4, 4))
    vh = rng.normal(size=(4, 4))
    tri = recover_x_eps(forward_noise(x, eps, 1.0), vh)
    assert np.array_equal(tri.x_hat, -vh)
    # brute-force substitution: x = 0.5, eps = -0.2 at t = 0.5
    z, v = R2 * 0.5 + R2 * -0.2, R2 * -0.2 - R2 * 0.5
    assert z == pytest.approx(0.21213, abs=1e-5) and v == pytest.approx(-0.49497, abs=1e-5)
    tri = recover_x_eps(DiffusionState(np.array([z]), 0.5), np.array([v]))
    assert tri.x_hat[0] == pytest.approx(0.5, abs=1e-12)
    assert tri.eps_hat[0] == pytest.approx(-0.2, abs=1e-12)


@settings(max_examples=100)
@given(t=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_inversion_identity(t, seed):
    rng = np.random.default_rng(seed)
    x, eps = rng.uniform(-1, 1, (5, 6)), rng.normal(size=(5, 6))
    tri = recover_x_eps(forward_noise(x, eps, t), v_target(x, eps, t))
    assert np.abs(tri.x_hat - x).max() < 1e-6
    assert np.abs(tri.eps_hat - eps).max() < 1e-6


def test_triple_consistency_from_eps():
    rng = np.random.default_rng(2)
    x, eps = rng.uniform(-1, 1, (3, 3)), rng.normal(size=(3, 3))
    st_ = forward_noise(x, eps, 0.3)
    tri = recover_from_eps(st_, eps)
    assert np.abs(tri.x_hat - x).max() < 1e-12
    a, s = schedule_eval(0.3)
    assert np.abs(tri.x_hat - (a * st_.z_t - s * tri.v_hat)).max() < 1e-12


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_loss_examples():
    one = torch.ones(1, 1, dtype=torch.bool)
    tri = PredictionTriple(None, _t([[0.3]]), _t([[0.4]]))
    assert loss_truncated_snr_l1(_t([[0.5]]), _t([[0.1]]), tri, one).item() == pytest.approx(0.3)
    assert loss_eps_l1(_t([[0.1]]), tri, one).item() == pytest.approx(0.3)
    perfect = PredictionTriple(None, _t([[0.5]]), _t([[0.1]]))
    assert loss_truncated_snr_l1(_t([[0.5]]), _t([[0.1]]), perfect, one).item() == 0.0
    assert loss_eps_l1(_t([[0.1]]), perfect, one).item() == 0.0


def test_loss_empty_mask():
    z = torch.zeros(2, 2, dtype=torch.float64)
    tri = PredictionTriple(z, z, z)
    with pytest.raises(ValueError):
        loss_truncated_snr_l1(z, z, tri, torch.zeros(2, 2, dtype=torch.bool))
    with pytest.raises(ValueError):
        loss_eps_l1(z, tri, torch.zeros(2, 2, dtype=torch.bool))


def test_loss_eps_is_mean_abs_difference():
    rng = np.random.default_rng(3)
    eps, eh = rng.normal(size=(6, 7)), rng.normal(size=(6, 7))
    mask = rng.random((6, 7)) < 0.6
    tri = PredictionTriple(None, None, _t(eh))
    got = loss_eps_l1(_t(eps), tri, torch.as_tensor(mask)).item()
    expected = sum(abs(a - b) for a, b, m in zip(eps.ravel(), eh.ravel(), mask.ravel()) if m) / mask.sum()
    assert got == pytest.approx(expected, rel=1e-12)


@settings(max_examples=100)
@given(t=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_loss_equivalence_identity(t, seed):
    rng = np.random.default_rng(seed)
    x, eps = rng.uniform(-1, 1, (8, 8)), rng.normal(size=(8, 8))
    e = rng.normal(scale=0.3, size=(8, 8))
    v = v_target(x, eps, t)
    state = forward_noise(_t(x), _t(eps), t)
    tri = recover_x_eps(state, _t(v - e))
    mask = torch.ones(8, 8, dtype=torch.bool)
    loss = loss_truncated_snr_l1(_t(x), _t(eps), tri, mask).item()
    a, s = schedule_eval(t)
    assert loss == pytest.approx(max(a, s) * np.abs(e).mean(), abs=1e-6)


def test_loss_batched_is_mean_of_per_example():
    rng = np.random.default_rng(4)
    x, eps, xh, eh = (_t(rng.normal(size=(3, 1, 4, 4))) for _ in range(4))
    mask = torch.as_tensor(rng.random((3, 1, 4, 4)) < 0.7)
    mask[:, :, 0, 0] = True
    tri = PredictionTriple(None, xh, eh)
    batched = loss_truncated_snr_l1(x, eps, tri, mask).item()
    singles = [loss_truncated_snr_l1(x[i, 0], eps[i, 0], PredictionTriple(None, xh[i, 0], eh[i, 0]), mask[i, 0]).item()
               for i in range(3)]
    assert batched == pytest.approx(np.mean(singles), rel=1e-12)


# ---------------------------------------------------------------- sampler


def oracle_for(x: torch.Tensor):
    """Returns the exact v for the known clean signal x at any (z, t)."""

    def fn(z, rgb, fov, t):
        a, s = schedule_eval(t)
        return (a * z - x) / s

    return fn


def _x(seed=0, shape=(2, 1, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=torch.float64) * 1.8 - 0.9


def test_time_grid():
    assert time_grid(4) == [1.0, 0.75, 0.5, 0.25, 0.0]


def test_oracle_one_step_exact():
    x = _x()
    out = ddpm_sample(oracle_for(x), torch.zeros(2, 3, 8, 8, dtype=torch.float64), None, 1, seed=3)
    assert torch.equal(out, x)


def test_oracle_sampler_converges():
    x = _x(1)
    rgb = torch.zeros(2, 3, 8, 8, dtype=torch.float64)
    errs = [(ddpm_sample(oracle_for(x), rgb, None, k, seed=5) - x).abs().max().item() for k in range(1, 9)]
    assert errs[-1] <= 1e-5
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_sampler_deterministic_and_seed_sensitive():
    def noisy_denoiser(z, rgb, fov, t):
        return 0.3 * z + 0.1 * rgb[:, :1]

    rgb = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    a = ddpm_sample(noisy_denoiser, rgb, None, 4, seed=11)
    b = ddpm_sample(noisy_denoiser, rgb, None, 4, seed=11)
    c = ddpm_sample(noisy_denoiser, rgb, None, 4, seed=12)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.shape == (2, 1, 8, 8)


def test_sampler_eps_mode_with_oracle():
    x = _x(2)

    def eps_oracle(z, rgb, fov, t):
        a, s = schedule_eval(t)
        return (z - a * x) / s

    rgb = torch.zeros(2, 3, 8, 8, dtype=torch.float64)
    out = ddpm_sample(eps_oracle, rgb, None, 8, seed=1, parameterization="eps")
    # the first step divides by alpha(1) = 0, so recovery only holds after clipping
    assert out.shape == x.shape and torch.isfinite(out).all()
    assert (out - x).abs().max().item() < 1e-5


def test_sampler_rejects_bad_steps():
    with pytest.raises(ValueError):
        ddpm_sample(lambda *a: a[0], torch.zeros(1, 3, 4, 4), None, 0, seed=0)


def test_average_samples():
    s = np.array([[0.2, -0.5]])
    assert np.array_equal(average_samples([s]), s)
    assert average_samples([np.array([0.2]), np.array([0.4])])[0] == pytest.approx(0.3)
    assert np.array_equal(average_samples([s] * 5), s)
    t = torch.tensor([[1.0, 2.0]])
    assert torch.equal(average_samples([t, t]), t)
    with pytest.raises(ValueError):
        average_samples([])
    with pytest.raises(ValueError):
        average_samples([np.zeros(2), np.zeros(3)])
