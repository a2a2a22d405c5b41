import math

import numpy as np
import pytest

from hcontrol.densities import (
    CHECKERBOARD_CENTERS,
    GmrfSpec,
    ObsModel,
    checkerboard_conditional_modes,
    checkerboard_logdensity,
    checkerboard_membership,
    checkerboard_posterior_sample,
    checkerboard_sample,
    gmrf_build,
    gmrf_conditional_oracle,
    gmrf_sample,
)
from hcontrol.schedule import SiteMask


def centers(idx):
    return [tuple(CHECKERBOARD_CENTERS[i]) for i in idx]


def test_eight_squares_with_symmetric_centers():
    assert CHECKERBOARD_CENTERS.shape == (8, 2)
    np.testing.assert_allclose(CHECKERBOARD_CENTERS.mean(axis=0), 0.0)


def test_logdensity_values():
    assert checkerboard_logdensity(np.array([0.5, 0.5])) == pytest.approx(math.log(1 / 8))
    assert checkerboard_logdensity(np.array([0.5, 1.5])) == -np.inf
    assert checkerboard_logdensity(np.array([3.0, 0.5])) == -np.inf


def test_logdensity_integrates_to_one():
    h = 0.01
    g = np.arange(-3 + h / 2, 3, h)
    xx, yy = np.meshgrid(g, g)
    dens = np.exp(checkerboard_logdensity(np.column_stack([xx.ravel(), yy.ravel()])))
    assert dens.sum() * h * h == pytest.approx(1.0, abs=1e-3)


def test_sampler_lands_in_squares_uniformly():
    rng = np.random.default_rng(1)
    n = 80_000
    x = checkerboard_sample(n, rng)
    member = checkerboard_membership(x)
    assert np.all(member >= 0)
    freq = np.bincount(member, minlength=8) / n
    se = math.sqrt((1 / 8) * (7 / 8) / n)
    assert np.all(np.abs(freq - 1 / 8) < 3 * se)
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)


def test_sampler_rejects_empty_request():
    with pytest.raises(ValueError):
        checkerboard_sample(0, np.random.default_rng(0))


@pytest.mark.parametrize(
    "y, expected",
    [
        (0.5, [(0.5, -1.5), (0.5, 0.5)]),
        (2.5, []),
        (-1.5, [(-1.5, -1.5), (-1.5, 0.5)]),
    ],
)
def test_conditional_modes(y, expected):
    assert centers(checkerboard_conditional_modes(ObsModel(y_obs=y))) == expected


def test_posterior_sampler_concentrates_on_modes():
    obs = ObsModel()
    x = checkerboard_posterior_sample(20_000, obs, np.random.default_rng(2))
    assert x.shape == (20_000, 2)
    member = checkerboard_membership(x)
    in_modes = np.isin(member, checkerboard_conditional_modes(obs))
    assert in_modes.mean() > 0.97
    # Two modes are equally likely by symmetry of the likelihood in x2.
    counts = np.bincount(member[in_modes])
    assert abs(counts[4] - counts[5]) / in_modes.sum() < 0.03


def test_obs_model_validation():
    with pytest.raises(ValueError):
        ObsModel(sigma_y=0.0)


def test_gmrf_tridiagonal_line():
    spec = gmrf_build((1, 1, 4), 0.3, 0.0, 2.0)
    expected = np.array([
        [2.0, -0.3, 0, 0],
        [-0.3, 2.0, -0.3, 0],
        [0, -0.3, 2.0, -0.3],
        [0, 0, -0.3, 2.0],
    ])
    np.testing.assert_array_equal(spec.Q, expected)
    assert spec.band == 1
    np.testing.assert_allclose(spec.cov @ spec.Q, np.eye(4), atol=1e-12)


def test_gmrf_order2_zero_pattern():
    spec = gmrf_build((4, 4, 4), 0.3, 0.1, 5.0)
    assert spec.band == 2
    coords = np.array(np.unravel_index(np.arange(64), (4, 4, 4))).T
    dist = np.abs(coords[:, None, :] - coords[None, :, :]).sum(-1)
    assert np.all(spec.Q[dist > 2] == 0)
    # only axis-aligned neighbours are linked
    diag2 = (dist == 2) & ((coords[:, None, :] != coords[None, :, :]).sum(-1) == 2)
    assert np.all(spec.Q[diag2] == 0)


def test_gmrf_requires_diagonal_dominance():
    # interior row sum on a 5x5x5 lattice is 6*0.3 + 6*0.1 = 2.4
    gmrf_build((5, 5, 5), 0.3, 0.1, 2.41)
    with pytest.raises(ValueError):
        gmrf_build((5, 5, 5), 0.3, 0.1, 2.4)
    with pytest.raises(ValueError):
        gmrf_build((1, 1, 4), 0.3, 0.0, 0.6)


def test_gmrf_independent_sites():
    spec = gmrf_build((2, 2, 2), 0.0, 0.0, 4.0)
    np.testing.assert_array_equal(spec.Q, 4.0 * np.eye(8))
    np.testing.assert_allclose(spec.cov, np.eye(8) / 4.0)
    assert spec.band == 0


def test_gmrf_json_round_trip():
    spec = gmrf_build((2, 3, 4), 0.2, 0.05, 4.0)
    back = GmrfSpec.from_json(spec.to_json())
    assert back == spec
    np.testing.assert_array_equal(back.Q, spec.Q)


def test_gmrf_sample_covariance():
    spec = gmrf_build((2, 2, 2), 0.3, 0.1, 5.0)
    n = 50_000
    x = gmrf_sample(spec, n, np.random.default_rng(3))
    S = np.cov(x, rowvar=False, bias=True)
    var = np.diag(spec.cov)
    se = np.sqrt((spec.cov**2 + np.outer(var, var)) / n)
    assert np.all(np.abs(S - spec.cov) < 5 * se)


def test_conditional_oracle_independent_sites():
    spec = gmrf_build((1, 1, 4), 0.0, 0.0, 1.0)
    mask = SiteMask(np.array([[[True, False, True, False]]]))
    mean, cov = gmrf_conditional_oracle(spec, mask, [0.7, -2.0], 0.5)
    np.testing.assert_allclose(mean, 0.0)
    np.testing.assert_allclose(cov, np.eye(2))


def test_conditional_oracle_matches_monte_carlo():
    spec = gmrf_build((1, 1, 4), 0.3, 0.0, 2.0)
    mask = SiteMask(np.array([[[False, True, False, False]]]))
    sigma, pin = 0.2, 1.0
    mean, cov = gmrf_conditional_oracle(spec, mask, [pin], sigma)

    rng = np.random.default_rng(4)
    n = 1_000_000
    z0 = gmrf_sample(spec, n, rng)
    zbar = (1 - sigma) * z0[:, 1] + sigma * rng.standard_normal(n)
    rest = z0[:, [0, 2, 3]]
    # jointly Gaussian: regress the free sites on the pin
    slope = (rest * zbar[:, None]).mean(0) / (zbar**2).mean()
    resid = rest - zbar[:, None] * slope
    np.testing.assert_allclose(slope * pin, mean, atol=5e-3)
    np.testing.assert_allclose(np.cov(resid, rowvar=False), cov, atol=5e-3)


def test_conditional_oracle_empty_mask_is_prior():
    spec = gmrf_build((2, 2, 2), 0.3, 0.1, 5.0)
    mean, cov = gmrf_conditional_oracle(spec, SiteMask.full(spec.lattice, 0), [], 0.3)
    np.testing.assert_array_equal(mean, np.zeros(8))
    np.testing.assert_array_equal(cov, spec.cov)


@pytest.mark.parametrize("sigma", [0.0, 1.0, 1.5])
def test_conditional_oracle_sigma_domain(sigma):
    spec = gmrf_build((1, 1, 2), 0.1, 0.0, 1.0)
    with pytest.raises(ValueError):
        gmrf_conditional_oracle(spec, SiteMask(np.array([[[True, False]]])), [0.0], sigma)
