import numpy as np
import pytest

from hcontrol.densities import gmrf_build, gmrf_sample
from hcontrol.locality import (
    axis_diagnostic,
    block_partial_correlation,
    block_precision,
    build_line_stack,
    eta_curve,
    eta_decay,
    noise_floor,
    partial_correlation_map,
)
from hcontrol.schedule import Lattice


def test_line_stack_shape_and_order():
    lat = Lattice(1, 4, 4, 4)
    x = np.random.default_rng(0).standard_normal((10, 64))
    st = build_line_stack(x, lat, "W")
    assert st.data.shape == (160, 4, 1)
    # raw (unstandardised) line for sample 0, l=0, h=0 is x[0, 0:4]
    raw = x.reshape(10, 4, 4, 4)[:, :, :, :].reshape(160, 4)
    mean, std = raw.mean(0), raw.std(0)
    np.testing.assert_allclose(st.data[0, :, 0], (x[0, 0:4] - mean) / std)


def test_line_stack_l_axis_channels():
    lat = Lattice(2, 3, 1, 1)
    x = np.arange(6.0)[None, :] + np.random.default_rng(1).standard_normal((50, 6))
    st = build_line_stack(x, lat, "L")
    assert st.data.shape == (50, 3, 2)


def test_line_stack_flags_constant_columns():
    lat = Lattice(1, 1, 1, 3)
    x = np.random.default_rng(2).standard_normal((20, 3))
    x[:, 1] = 4.0
    st = build_line_stack(x, lat, "W")
    np.testing.assert_array_equal(st.flagged[:, 0], [False, True, False])
    assert np.all(np.isfinite(st.data))


def test_bad_axis():
    with pytest.raises(ValueError):
        build_line_stack(np.zeros((2, 8)), Lattice(1, 2, 2, 2), "X")


def test_diagonal_blocks_are_minus_identity():
    lat = Lattice(3, 1, 1, 5)
    x = np.random.default_rng(3).standard_normal((2000, 15)) @ np.random.default_rng(4).standard_normal((15, 15))
    bp = block_precision(build_line_stack(x, lat, "W"))
    for b in range(5):
        R = block_partial_correlation(bp, b, b)
        np.testing.assert_allclose(np.linalg.svd(R, compute_uv=False), 1.0, atol=1e-8)
        np.testing.assert_allclose(R, -np.eye(3), atol=1e-8)


def test_single_channel_reduces_to_scalar_partial_correlation():
    lat = Lattice(1, 1, 1, 4)
    x = np.random.default_rng(5).standard_normal((3000, 4)) @ np.random.default_rng(6).standard_normal((4, 4))
    bp = block_precision(build_line_stack(x, lat, "W"))
    pcm = partial_correlation_map(bp)
    O = bp.precision
    for b in range(4):
        for g in range(b + 1, 4):
            assert pcm.rho[b, g] == pytest.approx(abs(O[b, g]) / np.sqrt(O[b, b] * O[g, g]), rel=1e-10)


def test_independent_data_is_at_noise_floor():
    lat = Lattice(2, 1, 1, 6)
    n = 5000
    x = np.random.default_rng(7).standard_normal((n, 12))
    bp = block_precision(build_line_stack(x, lat, "W"))
    np.testing.assert_allclose(bp.precision, np.eye(12), atol=0.1)
    pcm = partial_correlation_map(bp)
    off = pcm.rho[~np.eye(6, dtype=bool)]
    assert off.max() < 1.5 * pcm.floor


def test_ar1_partial_correlation_and_zero_pattern():
    spec = gmrf_build((1, 1, 8), 0.4, 0.0, 1.0)
    n = 40_000
    x = gmrf_sample(spec, n, np.random.default_rng(8))
    bp = block_precision(build_line_stack(x, spec.lattice, "W"))
    pcm = partial_correlation_map(bp)
    d = np.abs(np.subtract.outer(np.arange(8), np.arange(8)))
    np.testing.assert_allclose(pcm.rho[d == 1], 0.4, atol=4 * noise_floor(1, n))
    assert pcm.rho[d >= 2].max() < 2 * pcm.floor
    # precision of the standardised lines is Q rescaled by the marginal stds
    s = np.sqrt(np.diag(spec.cov))
    np.testing.assert_allclose(bp.precision * np.outer(1 / s, 1 / s), spec.Q, atol=0.05)


def test_affine_invariance():
    # standardisation acts on line coordinates (axis position, channel)
    lat = Lattice(2, 3, 3, 4)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1500, 72)) @ rng.standard_normal((72, 72))
    grid_shape = (2, 3, 3, 4)
    for ai, ax in enumerate(("L", "H", "W")):
        shape = [2, 1, 1, 1]
        shape[1 + ai] = grid_shape[1 + ai]
        scale = rng.uniform(0.01, 100, shape) * rng.choice([-1, 1], shape)
        shift = rng.uniform(-50, 50, shape)
        y = (x.reshape(-1, *grid_shape) * scale + shift).reshape(x.shape)
        a = partial_correlation_map(block_precision(build_line_stack(x, lat, ax))).rho
        b = partial_correlation_map(block_precision(build_line_stack(y, lat, ax))).rho
        np.testing.assert_allclose(a, b, atol=1e-8)


def test_standardised_columns_and_inverse_contract():
    lat = Lattice(2, 1, 2, 5)
    rng = np.random.default_rng(11)
    x = 3.0 + 7.0 * rng.standard_normal((800, 20)) @ rng.standard_normal((20, 20))
    st = build_line_stack(x, lat, "W")
    F = st.design()
    assert np.abs(F.mean(0)).max() < 1e-10
    np.testing.assert_allclose(F.var(0), 1.0, atol=1e-8)
    bp = block_precision(st)
    np.testing.assert_allclose(bp.precision @ bp.cov, np.eye(10), atol=1e-6)


def test_sample_order_invariance():
    lat = Lattice(1, 2, 2, 6)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((600, 24)) @ rng.standard_normal((24, 24))
    perm = rng.permutation(600)
    a = partial_correlation_map(block_precision(build_line_stack(x, lat, "W"))).rho
    b = partial_correlation_map(block_precision(build_line_stack(x[perm], lat, "W"))).rho
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_eta_uniform_four_positions():
    rho = np.full((4, 4), 0.3)
    np.fill_diagonal(rho, 1.0)
    assert eta_decay(rho, 1) == pytest.approx(0.5)
    assert eta_decay(rho, 0) == 1.0
    assert eta_decay(rho, 3) == 0.0
    np.testing.assert_allclose(eta_curve(rho), [1.0, 0.5, 2 / 12, 0.0])


def test_eta_flags_empty_mass():
    assert eta_decay(np.eye(3), 1, with_flag=True) == (0.0, True)
    with pytest.raises(ValueError):
        eta_decay(np.eye(3), -1)


def test_noise_floor_value():
    assert noise_floor(48, 2.9e4) == pytest.approx(0.081, abs=5e-4)
    with pytest.raises(ValueError):
        noise_floor(1, 0)


def test_too_few_lines_rejected():
    with pytest.raises(ValueError):
        block_precision(build_line_stack(np.random.default_rng(0).standard_normal((3, 8)), Lattice(2, 1, 1, 4), "W"))


def test_axis_diagnostic_skips_singleton_axes():
    lat = Lattice(1, 1, 3, 4)
    x = np.random.default_rng(10).standard_normal((500, 12))
    out = axis_diagnostic(x, lat)
    assert set(out) == {"H", "W"}
    assert out["W"].rho.shape == (4, 4)
