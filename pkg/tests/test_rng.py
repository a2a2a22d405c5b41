import numpy as np

from hcontrol.rng import Streams


def test_named_streams_are_reproducible_and_distinct():
    a, b = Streams(7, 2), Streams(7, 2)
    x = a("init").standard_normal(5)
    np.testing.assert_array_equal(x, b("init").standard_normal(5))
    assert not np.array_equal(Streams(7, 2)("pin").standard_normal(5), x)
    assert not np.array_equal(Streams(7, 3)("init").standard_normal(5), x)
    assert not np.array_equal(Streams(8, 2)("init").standard_normal(5), x)


def test_stream_is_cached_and_fresh_restarts():
    s = Streams(1)
    first = s("inner").random(3)
    second = s("inner").random(3)
    assert not np.array_equal(first, second)
    np.testing.assert_array_equal(s.fresh("inner").random(3), first)


def test_child_changes_index_only():
    c = Streams(11, 0).child(4)
    assert (c.master_seed, c.index) == (11, 4)


def test_large_seed_accepted():
    Streams(2**64 - 1)("init").random()
