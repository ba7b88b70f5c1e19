import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaussflow import fields as F
from gaussflow.quadrature import gauss_hermite_rule


@pytest.fixture
def cube_field():
    try:
        F.register_family("test-cube", lambda p, X: X**3, growth=1e9, replace=True)
        yield F.FieldSpec("test-cube", 1)
    finally:
        F.unregister_family("test-cube")


# --- evaluation and derivatives


def test_eval_examples():
    assert F.eval_field(F.constant([3.0]), [2.0]) == pytest.approx([3.0])
    assert np.array_equal(F.eval_field(F.linear(np.eye(2)), [1.0, 1.0]), [1.0, 1.0])
    assert np.allclose(F.eval_field(F.rotation(), [1.0, 0.0]), [0.0, 1.0])


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        F.eval_field(F.rotation(), [1.0, 2.0, 3.0])


def test_jacobian_linear_is_exact():
    M = np.array([[1.0, 2.0], [-0.5, 0.3]])
    J = F.jacobian(F.linear(M), [0.7, -1.1])
    assert J.provenance == "analytic"
    assert np.array_equal(J.entries, M)


def test_jacobian_constant_zero():
    assert np.array_equal(F.jacobian(F.constant([1.0, 2.0]), [3.0, 4.0]).entries, np.zeros((2, 2)))


def test_jacobian_fd_cube(cube_field):
    J = F.jacobian(cube_field, [2.0], mode="finite-difference")
    assert J.provenance == "finite-difference"
    assert J.entries[0, 0] == pytest.approx(12.0, rel=1e-6)
    with pytest.raises(F.CapabilityError):
        F.jacobian(cube_field, [2.0], mode="analytic")


def test_gauss_divergence_examples(cube_field):
    assert F.gauss_divergence(F.constant([3.0]), [2.0]) == pytest.approx(6.0)
    assert F.gauss_divergence(F.linear(np.eye(2)), [1.0, 1.0]) == pytest.approx(0.0)
    assert F.gauss_divergence(cube_field, [2.0]) == pytest.approx(4.0, rel=1e-6)


def test_directional_derivative_examples():
    assert np.allclose(F.directional_derivative(F.constant([1.0, 2.0]), F.rotation(), [0.3, 0.4]), 0.0)
    x = F.linear([[1.0]])
    assert F.directional_derivative(x, x, [3.0]) == pytest.approx([3.0])
    s = F.sine(1)
    assert F.directional_derivative(s, s, [math.pi / 4], mode="finite-difference") == pytest.approx([0.5], abs=1e-8)


def test_power_alpha_singular():
    f = F.power_alpha(0.5, [1.0])
    assert np.array_equal(F.eval_field(f, [0.0]), [0.0])
    with pytest.raises(F.CapabilityError):
        F.jacobian(f, [1e-13])
    J = F.jacobian(f, [0.25]).entries
    assert J[0, 0] == pytest.approx(0.5 * 0.25**-0.5)


def test_osgood_profile_and_divergence_free():
    f = F.osgood(2)
    s = 0.1
    assert F.eval_field(f, [5.0, s])[0] == pytest.approx(s * math.log(1 / s))
    assert F.eval_field(f, [0.0, 3.0])[0] == pytest.approx(1 / math.e)
    J = F.jacobian(f, [0.4, 0.2]).entries
    assert np.trace(J) == 0.0


# --- registry


def test_registry_contains_builtins():
    names = {fam.name for fam in F.families()}
    assert {"constant", "linear", "rotation", "power-alpha", "osgood", "sine"} <= names


def test_custom_family_requires_growth():
    with pytest.raises(ValueError):
        F.register_family("bad", lambda p, X: X, growth=math.inf)
    with pytest.raises(ValueError):
        F.register_family("constant", lambda p, X: X, growth=1.0)


def test_param_arity_checked():
    with pytest.raises(ValueError):
        F.FieldSpec("linear", 2, (1.0, 2.0))
    with pytest.raises(ValueError):
        F.FieldSpec("rotation", 3)


@pytest.mark.parametrize(
    "spec",
    [
        F.constant([0.3, -2.0]),
        F.linear([[1.0, 2.0], [-0.5, 0.3]]),
        F.rotation(),
        F.power_alpha(0.5, [0.6, 0.8]),
        F.osgood(2),
        F.sine(2),
    ],
    ids=lambda s: s.family,
)
def test_declared_growth_holds(spec):
    assert F.measured_growth(spec, radius=1e3) <= spec.growth * (1 + 1e-12)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(4000, 2))
    X *= rng.uniform(0, 1e3, size=(4000, 1)) / np.linalg.norm(X, axis=1, keepdims=True)
    lhs = np.linalg.norm(spec.value(X), axis=1)
    assert np.all(lhs <= spec.growth * (1 + np.linalg.norm(X, axis=1)) * (1 + 1e-12))


# --- drift corrections and functionals


def test_strat_and_dual_drift_examples():
    xdiff = F.FieldEnsemble(F.zero(1), (F.linear([[1.0]]),))
    assert F.strat_drift(xdiff, [3.0]) == pytest.approx([-1.5])
    assert F.dual_drift(xdiff, [3.0]) == pytest.approx([-3.0])
    sdiff = F.FieldEnsemble(F.zero(1), (F.sine(1),))
    assert F.strat_drift(sdiff, [math.pi / 4]) == pytest.approx([-0.25])
    ou = F.FieldEnsemble(F.linear([[-1.0]]), (F.constant([1.0]),))
    assert F.dual_drift(ou, [2.0]) == pytest.approx([-2.0])
    assert F.strat_drift(ou, [2.0]) == pytest.approx([-2.0])


def test_phi_examples():
    assert F.phi_functional(F.FieldEnsemble.zero(2, 2), [0.4, 1.0]) == 0.0
    rot = F.FieldEnsemble(F.rotation(), ())
    X = np.random.default_rng(0).normal(size=(50, 2))
    assert np.all(F.gauss_divergence(F.rotation(), X) == 0.0)
    assert np.all(F.phi_functional(rot, X) == 0.0)
    ou = F.FieldEnsemble(F.linear([[-1.0]]), (F.constant([1.0]),))
    assert F.phi_functional(ou, [0.0]) == pytest.approx(1.5)


def test_phi_tilde_examples():
    c = 1.7
    ens = F.FieldEnsemble(F.zero(1), (F.constant([c]),))
    assert F.phi_tilde(ens, [1.0], 1.0) == pytest.approx(3 * c * c)
    assert F.phi_tilde(ens, [1.0], 0.0) == 0.0
    assert F.phi_tilde(F.FieldEnsemble.zero(1, 1), [2.0], 3.0) == 0.0
    with pytest.raises(ValueError):
        F.phi_tilde(ens, [1.0], -0.1)


_ENSEMBLES = [
    F.FieldEnsemble(F.linear([[0.5, -1.0], [0.2, -0.3]]), (F.constant([1.0, 0.0]), F.constant([0.3, 0.4]))),
    F.FieldEnsemble(F.sine(2), (F.linear([[0.1, 0.2], [0.0, -0.4]]), F.sine(2))),
    F.FieldEnsemble(F.rotation(), (F.sine(2),)),
]


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(range(len(_ENSEMBLES))),
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    st.floats(0, 5),
    st.floats(0, 5),
)
def test_phi_tilde_monotone_nonnegative(i, x, r1, r2):
    ens = _ENSEMBLES[i]
    lo, hi = sorted((r1, r2))
    a, b = F.phi_tilde(ens, x, lo), F.phi_tilde(ens, x, hi)
    assert a >= 0.0
    assert a <= b * (1 + 1e-14) + 1e-300


def test_lemma21_examples():
    assert F.lemma21_residual(F.FieldEnsemble.zero(2, 1), [0.3, 0.1]) == 0.0
    ens = F.FieldEnsemble(F.linear([[0.5, -1.0], [0.2, -0.3]]), (F.constant([1.0, 0.0]),))
    X = np.random.default_rng(3).normal(size=(10, 2))
    assert np.max(F.lemma21_residual(ens, X)) <= 1e-6
    s = F.FieldEnsemble(F.zero(1), (F.sine(1),))
    assert F.lemma21_residual(s, [1.0], mode="finite-difference") <= 1e-4


def test_lemma21_singular_refused():
    ens = F.FieldEnsemble(F.power_alpha(0.5, [1.0]), (F.constant([1.0]),))
    with pytest.raises(F.CapabilityError):
        F.lemma21_residual(ens, [0.0])


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["linear", "sine", "rotation", "constant"]), st.integers(0, 2), st.floats(1.0, 3.0))
def test_integration_by_parts_law(kind, power, scale):
    """int <grad phi, A> dgamma = int phi delta(A) dgamma for polynomial x Gaussian-cutoff phi."""
    spec = {
        "linear": F.linear([[0.4, -1.0], [0.7, 0.2]]),
        "sine": F.sine(2),
        "rotation": F.rotation(),
        "constant": F.constant([0.5, -1.5]),
    }[kind]
    rule = gauss_hermite_rule(2, 40)
    X = rule.nodes
    c = np.array([1.0, 0.5])
    poly = (X @ c) ** power
    cut = np.exp(-np.sum(X**2, axis=1) / (2 * scale**2))
    phi = poly * cut
    dpoly = (power * (X @ c) ** (power - 1))[:, None] * c if power else np.zeros_like(X)
    grad = dpoly * cut[:, None] - phi[:, None] * X / scale**2
    lhs = rule.expect(np.einsum("ni,ni->n", grad, spec.value(X)))
    rhs = rule.expect(phi * F.gauss_divergence(spec, X))
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_strat_divergence_matches_fd():
    ens = _ENSEMBLES[1]
    X = np.random.default_rng(2).normal(size=(20, 2))
    a = F.strat_divergence(ens, X, mode="analytic")
    b = F.strat_divergence(ens, X, mode="finite-difference")
    assert np.max(np.abs(a - b)) < 1e-5
