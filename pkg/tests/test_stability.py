import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaussflow import fields as F
from gaussflow import stability as T
from gaussflow.mollify import MollifyConfig, mollify_ensemble
from gaussflow.sde import TimeGrid
from oracles import gauss1, lattice_abs_average, smoothstep


# --- lattices and maximal functions


def test_sample_grid():
    g = T.SampleGrid(1.0, 0.25)
    assert np.allclose(g.axis, np.linspace(-1, 1, 9))
    c = T.SampleGrid(1.0, 0.25, offset="cell")
    assert 0.0 not in c.axis and np.allclose(np.diff(c.axis), 0.25)
    assert T.SampleGrid(1.0, 0.25, d=2).points().shape == (81, 2)
    assert g.refine().spacing == 0.125
    for bad in ((0.0, 0.1), (1.0, -0.1)):
        with pytest.raises(ValueError):
            T.SampleGrid(*bad)


def test_maximal_constant():
    for d in (1, 2):
        g = T.SampleGrid(2.0, 0.1, d=d)
        mf = T.maximal_function(g, np.full(g.shape, -1.5), 0.5)
        assert np.allclose(mf.values[mf.interior], 1.5)


def test_maximal_abs_at_origin():
    g = T.SampleGrid(3.0, 0.01)
    R = 1.0
    mf = T.maximal_function(g, np.abs(g.axis), R)
    i0 = int(np.argmin(np.abs(g.axis)))
    assert mf.values[i0] == pytest.approx(lattice_abs_average(100) * g.spacing, rel=1e-12)
    assert mf.values[i0] == pytest.approx(R / 2, abs=g.spacing)


def test_maximal_indicator_at_jump():
    g = T.SampleGrid(3.0, 0.01)
    x = g.axis
    # the lattice point on the jump carries the midpoint value
    f = np.where((x > 1e-12) & (x < 1 - 1e-12), 1.0, 0.0)
    f[np.isclose(x, 0.0)] = 0.5
    f[np.isclose(x, 1.0)] = 0.5
    mf = T.maximal_function(g, f, 1.0)
    assert mf.values[int(np.argmin(np.abs(x)))] == pytest.approx(0.5, abs=g.spacing)


def test_maximal_errors():
    g = T.SampleGrid(1.0, 0.1)
    with pytest.raises(ValueError):
        T.maximal_function(g, np.ones(g.shape), 1.0)
    with pytest.raises(ValueError):
        T.maximal_function(g, np.ones(g.shape), 0.05)
    with pytest.raises(ValueError):
        T.maximal_function(g, np.ones((3, 3)), 0.3)


def test_maximal_dominates_point_and_ball_averages():
    g = T.SampleGrid(3.0, 0.05, d=2)
    f = g.sample(lambda X: np.sin(3 * X[:, 0]) * np.exp(-X[:, 1] ** 2))
    mf = T.maximal_function(g, f, 0.5)
    inn = mf.interior
    assert np.all(mf.values[inn] >= np.abs(f[inn]))
    for k in (1, 4, 10):
        avg = T._ball_average(np.abs(f), k)
        assert np.all(mf.values[inn] >= avg[inn] - 1e-12)


_VALUES = st.lists(st.floats(-10, 10, allow_nan=False), min_size=61, max_size=61)


@settings(max_examples=40, deadline=None)
@given(_VALUES, st.integers(1, 6), st.integers(1, 6))
def test_maximal_monotone_in_R(vals, k1, k2):
    g = T.SampleGrid(3.0, 0.1)
    f = np.array(vals)
    lo, hi = sorted((k1, k2))
    a = T.maximal_function(g, f, lo * 0.1)
    b = T.maximal_function(g, f, hi * 0.1)
    both = a.interior & b.interior
    assert np.all(a.values[both] <= b.values[both] + 1e-12)


@settings(max_examples=40, deadline=None)
@given(_VALUES, _VALUES, st.integers(1, 6))
def test_maximal_sublinear(u, v, k):
    g = T.SampleGrid(3.0, 0.1)
    f, h = np.array(u), np.array(v)
    R = k * 0.1
    s = T.maximal_function(g, f + h, R)
    a = T.maximal_function(g, f, R)
    b = T.maximal_function(g, h, R)
    inn = s.interior
    assert np.all(s.values[inn] <= a.values[inn] + b.values[inn] + 1e-9)


# --- Lusin-Lipschitz and L^p ratios


def test_lusin_constant_is_zero():
    r = T.lusin_lipschitz_ratio(F.constant([1.0, 2.0]), T.SampleGrid(2.0, 0.1, d=2), 0.5, 5000)
    assert r.max == 0.0 and r.zero_denominator == 0


def test_lusin_linear_at_most_half():
    for d, M in ((1, [[2.0]]), (2, [[1.0, 2.0], [-0.5, 0.3]])):
        r = T.lusin_lipschitz_ratio(F.linear(M), T.SampleGrid(3.0, 0.05, d=d), 1.0, 20000)
        assert r.max <= 0.5 + 1e-12
        assert r.pairs == 20000


@pytest.mark.parametrize(
    "spec,spacing",
    [(F.power_alpha(0.5, [1.0]), 0.01), (F.sine(1), 0.01), (F.power_alpha(0.5, [0.6, 0.8]), 0.05), (F.osgood(2), 0.05)],
    ids=["power-1d", "sine-1d", "power-2d", "osgood-2d"],
)
def test_lusin_refinement_stable(spec, spacing):
    coarse = T.SampleGrid(3.0, spacing, d=spec.d, offset="cell")
    a = T.lusin_lipschitz_ratio(spec, coarse, 1.0, 20000, seed=1)
    b = T.lusin_lipschitz_ratio(spec, coarse.refine(), 1.0, 20000, seed=1)
    assert math.isfinite(a.max) and math.isfinite(b.max)
    assert 0.5 <= a.max / b.max <= 2.0


def test_lusin_dimension_check():
    with pytest.raises(ValueError):
        T.lusin_lipschitz_ratio(F.sine(2), T.SampleGrid(1.0, 0.1, d=1), 0.3, 10)


def test_lp_ratio_constant():
    g = T.SampleGrid(3.0, 0.01)
    ratio = T.maximal_lp_ratio(g, np.ones(g.shape), 1.0, 2.0, 1.0)
    assert ratio == pytest.approx(201 / 401, rel=1e-12)
    assert ratio < 1


@pytest.mark.parametrize("kind", ["bump", "box"])
def test_lp_ratio_three_resolutions(kind):
    vals = []
    for dx in (0.02, 0.01, 0.005):
        g = T.SampleGrid(4.0, dx)
        x = g.axis
        f = np.exp(-x**2) if kind == "bump" else ((x > -0.5) & (x < 0.25)).astype(float)
        vals.append(T.maximal_lp_ratio(g, f, 1.5, 2.0, 2.0))
    assert max(vals) / min(vals) <= 2.0


def test_lp_ratio_errors():
    g = T.SampleGrid(2.0, 0.1)
    with pytest.raises(ValueError):
        T.maximal_lp_ratio(g, np.ones(g.shape), 1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        T.maximal_lp_ratio(g, np.ones(g.shape), 1.0, 2.0, 1.5)


# --- log functional and Cauchy diagnostic

UNIT = F.FieldEnsemble(F.zero(1), (F.constant([1.0]),))


def test_log_functional_identical():
    ens = F.FieldEnsemble(F.sine(1), (F.constant([0.5]),))
    r = T.log_distance_functional(ens, ens, TimeGrid(1.0, 50), 0.1, 5.0, 32, 16)
    assert r.lhs == 0.0 and r.sup_moment == 0.0
    assert 0.0 <= r.gr_mass <= 1.0 and r.fitted_constant == 0.0


def test_log_functional_constant_gap():
    B = F.FieldEnsemble(F.constant([0.1]), (F.constant([1.0]),))
    r = T.log_distance_functional(UNIT, B, TimeGrid(1.0, 100), 0.1, 4.0, 64, 32)
    assert r.lhs == pytest.approx(math.log(2) * r.gr_mass, rel=1e-9)
    assert 0.5 < r.gr_mass < 1.0
    assert r.sup_moment == pytest.approx(0.01, rel=1e-9)
    assert r.bracket.sigma2_group == 0.0
    assert r.bracket.sigma1_group == pytest.approx(1.0, rel=1e-10)


def test_log_functional_lambda_and_errors():
    B = F.FieldEnsemble(F.constant([0.1]), (F.constant([1.0]),))
    r = T.log_distance_functional(UNIT, B, TimeGrid(0.5, 20), 0.1, 4.0, 16, 8, with_lambda=True, lambda_paths=32)
    assert r.lambda_pT is not None and r.lambda_pT >= 0.9
    with pytest.raises(ValueError):
        T.log_distance_functional(UNIT, B, TimeGrid(0.5, 20), 0.0, 4.0, 4, 4)
    with pytest.raises(ValueError):
        T.log_distance_functional(UNIT, F.FieldEnsemble.zero(2, 1), TimeGrid(0.5, 20), 0.1, 4.0, 4, 4)


def test_gr_exhaustion():
    ens = F.FieldEnsemble(F.linear([[-0.5]]), (F.constant([1.0]),))
    mass = [T.log_distance_functional(ens, ens, TimeGrid(1.0, 100), 0.1, R, 64, 64).gr_mass for R in (2.0, 4.0, 8.0)]
    assert mass[0] < mass[1] <= mass[2]
    assert mass[2] == pytest.approx(1.0, abs=1e-3)


def test_mollified_pairs_bounded():
    base = F.FieldEnsemble(F.sine(1), (F.constant([0.5]),))
    lhs, moments = [], []
    for eps in (0.25, 1 / 16, 1 / 64):
        me = mollify_ensemble(base, MollifyConfig(eps))
        sigma = T.sigma_nk(base, me, 2.0)
        r = T.log_distance_functional(base, me, TimeGrid(1.0, 100), sigma, 10.0, 64, 32)
        lhs.append(r.lhs)
        moments.append(r.sup_moment)
    assert moments[0] > moments[1] > moments[2]
    assert max(lhs) / min(lhs) <= 3.0


def test_cauchy_rejects_degenerate_pairs():
    with pytest.raises(ValueError):
        T.cauchy_diagnostic(UNIT, 4, 4, 2.0, TimeGrid(1.0, 10), 5.0, 4, 4)
    with pytest.raises(ValueError):
        T.cauchy_diagnostic(UNIT, 1, 4, 2.0, TimeGrid(1.0, 10), 5.0, 4, 4)


def test_cauchy_constant_field():
    base = F.FieldEnsemble(F.constant([0.3]), (F.constant([1.0]),))
    c = T.cauchy_diagnostic(base, 4, 8, 2.0, TimeGrid(1.0, 100), 3.0, 32, 32)
    # only the cutoff shells differ: 4 < |x| < 6 against 8 < |x| < 10
    def chi(x, inv):
        s = np.clip((abs(x) - inv) / 2, 0, 1)
        return 1 - smoothstep(s)

    def gap(q):
        return (2 * gauss1(lambda x: abs(chi(x, 4) - chi(x, 8)) ** q, 3.0, 12.0, [4.0, 6.0, 8.0, 10.0])) ** (1 / q)

    assert c.sigma_nk == pytest.approx(0.3 * gap(2) + gap(4), rel=1e-4)
    assert c.sup_moment < 1e-3


def test_cauchy_power_alpha_small():
    base = F.FieldEnsemble(F.power_alpha(0.5, [1.0]), (F.constant([1.0]),))
    g = TimeGrid(1.0, 200)
    a = T.cauchy_diagnostic(base, 4, 8, 2.0, g, 10.0, 64, 64, q=1.5)
    b = T.cauchy_diagnostic(base, 32, 64, 2.0, g, 10.0, 64, 64, q=1.5)
    assert b.sigma_nk < a.sigma_nk
    assert b.sup_moment < a.sup_moment / 5
