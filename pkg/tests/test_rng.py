import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gaussflow import rng


def test_reproducible_and_stream_separated():
    a = rng.normals(7, rng.INCREMENTS, 3, 1000)
    assert np.array_equal(a, rng.normals(7, rng.INCREMENTS, 3, 1000))
    assert not np.array_equal(a, rng.normals(7, rng.INITIALS, 3, 1000))
    assert not np.array_equal(a, rng.normals(7, rng.INCREMENTS, 4, 1000))
    assert not np.array_equal(a, rng.normals(8, rng.INCREMENTS, 3, 1000))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(0, 10**6), st.integers(0, 300), st.integers(1, 300))
def test_counter_offsets_compose(seed, index, start, count):
    """Drawing [start, start+count) equals slicing a longer draw."""
    whole = rng.normals(seed, rng.INCREMENTS, index, start + count)
    part = rng.normals(seed, rng.INCREMENTS, index, count, start=start)
    assert np.array_equal(whole[start:], part)


def test_normal_statistics():
    z = rng.normals(0, rng.MONTE_CARLO, 0, 200_000)
    assert abs(z.mean()) < 4 / np.sqrt(len(z))
    assert abs(z.var() - 1) < 0.02
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_uniforms_in_unit_interval():
    u = rng.uniforms(2, rng.PAIRS, 5, 100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert stats.kstest(u, "uniform").pvalue > 1e-3


def test_gaussian_points_shape():
    X = rng.gaussian_points(0, 1, 10, 3)
    assert X.shape == (10, 3)
    assert np.array_equal(X, rng.gaussian_points(0, 1, 10, 3))


def test_ks_pvalues_uniform_across_seeds():
    """Second-level check: KS p-values over independent seeds are themselves uniform."""
    ps = [stats.kstest(rng.normals(s, rng.MONTE_CARLO, 0, 20_000), "norm").pvalue for s in range(40)]
    assert stats.kstest(ps, "uniform").pvalue > 1e-3
