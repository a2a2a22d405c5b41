import numpy as np
import pytest

from hcontrol.densities import ObsModel, checkerboard_sample, gmrf_build
from hcontrol.flowmodel import GaussianVelocity
from hcontrol.guidance import Observation
from hcontrol.metrics import (
    bin_delta_traces,
    energy_distance,
    manifold_hit,
    polyak_variance_ratio,
    posterior_hit,
)


def test_manifold_hit_values():
    assert manifold_hit(np.tile([0.5, 1.5], (10, 1))) == 0.0
    assert manifold_hit([[0.5, 0.5], [0.5, 1.5]]) == 0.5
    assert manifold_hit(checkerboard_sample(1000, np.random.default_rng(0))) == 1.0
    with pytest.raises(ValueError):
        manifold_hit(np.zeros((0, 2)))


@pytest.mark.parametrize(
    "point, hit, mode",
    [((0.5, 0.5), True, 1), ((0.5, -1.5), True, 0), ((0.5, 1.6), False, None), ((-0.5, -0.5), False, None)],
)
def test_posterior_hit_trace(point, hit, mode):
    rep = posterior_hit([point], ObsModel())
    assert rep.posterior_hits == int(hit)
    if hit:
        assert rep.mode_counts[mode] == 1
    assert rep.mode_centers == [[0.5, -1.5], [0.5, 0.5]]


def test_posterior_hit_implies_manifold_hit():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2.5, 2.5, (5000, 2))
    obs = ObsModel()
    rep = posterior_hit(pts, obs)
    assert rep.posterior_hits <= rep.manifold_hits <= rep.n_samples
    assert sum(rep.mode_counts) == rep.posterior_hits
    for p in pts[:500]:
        single = posterior_hit([p], obs)
        assert single.posterior_hits <= single.manifold_hits


def test_anchor_distance_is_checked():
    # inside a mode square but at distance 0.5 from y_obs=0.0 on the anchor coordinate
    rep = posterior_hit([[0.5, 0.5]], ObsModel(y_obs=0.0))
    assert rep.posterior_hits == 0
    rep = posterior_hit([[0.49, 0.5]], ObsModel(y_obs=0.0))
    assert rep.posterior_hits == 1


def test_mode_balance_and_serialisation():
    rep = posterior_hit([[0.5, 0.5], [0.5, -1.5], [0.2, -1.2]], ObsModel())
    assert rep.mode_balance == pytest.approx(2 / 3)
    d = rep.to_dict()
    assert d["posterior_rate"] == 1.0 and d["mode_counts"] == [2, 1]
    assert np.isnan(posterior_hit([[3.0, 3.0]], ObsModel()).mode_balance)


def test_energy_distance_far_apart():
    rng = np.random.default_rng(2)
    X = rng.standard_normal(1000)
    Y = 10 + rng.standard_normal(1000)
    assert energy_distance(X, Y) > 15


def test_energy_distance_nonnegative_same_law():
    rng = np.random.default_rng(3)
    vals = [energy_distance(rng.standard_normal((30, 2)), rng.standard_normal((30, 2))) for _ in range(1000)]
    assert min(vals) > -1e-10


def test_energy_distance_identical_and_symmetric():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((50, 3))
    Y = rng.standard_normal((40, 3)) + 0.3
    assert abs(energy_distance(X, X[::-1])) < 1e-12
    assert energy_distance(X, Y) == pytest.approx(energy_distance(Y, X), abs=1e-12)
    with pytest.raises(ValueError):
        energy_distance(X[:1], X)


def test_polyak_variance_ratio_below_one():
    spec = gmrf_build((2, 2, 2), 0.3, 0.1, 5.0)
    model = GaussianVelocity.from_spec(spec)
    mask = np.zeros(8, dtype=bool)
    mask[:4] = True
    obs = Observation(mask, np.zeros(8))
    r = polyak_variance_ratio(model, obs, 0.5, 16, 200, np.random.default_rng(5))
    assert r < 0.9
    assert polyak_variance_ratio(model, obs, 0.5, 1, 60, np.random.default_rng(5)) == 1.0
    with pytest.raises(ValueError):
        polyak_variance_ratio(model, obs, 0.5, 0, 200, np.random.default_rng(5))


def test_bin_delta_traces():
    sig = [0.9, 0.8, 0.5, 0.1, 1.0]
    tr = [np.array([1.0, 2.0]), np.array([3.0, np.nan]), np.array([5.0, 6.0]), np.array([7.0, 8.0]),
          np.array([1.0, 4.0])]
    out = bin_delta_traces(sig, tr)
    np.testing.assert_allclose(out["[0.66,1.00)"], [5 / 3, 3.0])
    np.testing.assert_allclose(out["[0.33,0.66)"], [5.0, 6.0])
    np.testing.assert_allclose(out["[0.00,0.33)"], [7.0, 8.0])
