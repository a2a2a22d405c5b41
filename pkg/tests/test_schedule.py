import numpy as np
import pytest

from hcontrol.schedule import (
    Lattice,
    NoiseSchedule,
    SiteMask,
    build_schedule,
    mask_compose,
    partition_complement,
)


def test_linear_schedule_endpoints_and_length():
    s = build_schedule(50)
    assert len(s) == 51 and s.steps == 50
    assert s[0] == 1.0 and s[50] == 0.0
    assert np.all(np.diff(s.sigmas) < 0)
    assert s[25] == pytest.approx(0.5)


@pytest.mark.parametrize("k", [0, 10, 49])
def test_linear_slope_is_minus_one(k):
    assert build_schedule(50).slope(k) == pytest.approx(-1.0)


@pytest.mark.parametrize("bad", [0, -3, 2.5])
def test_bad_step_count(bad):
    with pytest.raises(ValueError):
        build_schedule(bad)


@pytest.mark.parametrize("sig", [(1.0, 0.5), (0.9, 0.0), (1.0, 0.6, 0.7, 0.0), (1.0,)])
def test_schedule_validation(sig):
    with pytest.raises(ValueError):
        NoiseSchedule(sig)


def test_flat_index_layout():
    lat = Lattice(2, 2, 3, 4)
    assert lat.dim == 48 and lat.n_sites == 24
    z = np.arange(48.0)
    grid = lat.reshape(z)
    assert grid.shape == (2, 2, 3, 4)
    c, l, h, w = 1, 1, 2, 3
    assert grid[c, l, h, w] == c * 24 + (l * 3 + h) * 4 + w
    np.testing.assert_array_equal(lat.state_indices([5]), [5, 29])


def test_partition_full_complement_4x4x4():
    lat = Lattice(1, 4, 4, 4)
    part = partition_complement(SiteMask.full(lat, 0), (2, 2, 2))
    assert part.count == 8
    assert all(p.size == 8 for p in part.patches)
    allsites = np.sort(np.concatenate(part.patches))
    np.testing.assert_array_equal(allsites, np.arange(64))


def test_partition_toy_mask():
    lat = Lattice.flat(2)
    mask = SiteMask.from_flat([1, 0], lat)
    part = partition_complement(mask, (1, 1, 1))
    assert part.count == 1
    np.testing.assert_array_equal(part.patches[0], [1])


def test_partition_drops_observed_boxes():
    lat = Lattice(1, 1, 4, 4)
    bits = np.zeros((1, 4, 4), dtype=bool)
    bits[:, :2, :2] = True
    part = partition_complement(SiteMask(bits), (1, 2, 2))
    assert part.count == 3
    assert not np.intersect1d(np.concatenate(part.patches), np.flatnonzero(bits.ravel())).size


def test_partition_bad_sizes():
    with pytest.raises(ValueError):
        partition_complement(SiteMask.full(Lattice(1, 2, 2, 2), 0), (0, 1, 1))


def test_state_mask_tiles_channels():
    lat = Lattice(3, 1, 1, 2)
    m = SiteMask.from_flat([1, 0], lat).state_mask(3)
    np.testing.assert_array_equal(m, [1, 0, 1, 0, 1, 0])


def test_mask_compose_toy():
    out = mask_compose(np.array([0.5, 9.0]), np.array([0.2, 0.7]), np.array([True, False]))
    np.testing.assert_array_equal(out, [0.5, 0.7])


def test_mask_compose_shape_mismatch():
    with pytest.raises(ValueError):
        mask_compose(np.zeros(3), np.zeros(2), np.zeros(2, dtype=bool))
