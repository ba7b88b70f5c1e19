"""Ornstein-Uhlenbeck smoothing with a radial cutoff.

P_eps A(x) = E A(e^-eps x + s Z) with s = sqrt(1 - e^-2eps) and Z ~ gamma_d,
evaluated by tensor Gauss-Hermite quadrature (Monte Carlo for d > 3).  The
mollified field is A^eps = phi_eps P_eps A where phi_eps equals one on the ball
of radius 1/eps and vanishes outside radius 1/eps + 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import fftconvolve

from . import quadrature
from .fields import (
    CapabilityError,
    Field,
    FieldEnsemble,
    as_points,
    jacobian_array,
    _unbatch,
)

E = float(np.e)
_POINT_BUDGET = 1 << 20  # integrand evaluations per batch


@dataclass(frozen=True)
class MollifyConfig:
    epsilon: float
    order: int = 32
    mc_samples: int = 2**16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.order < 1 or self.mc_samples < 1:
            raise ValueError("quadrature sizes must be positive")

    @property
    def decay(self) -> float:
        return float(np.exp(-self.epsilon))

    @property
    def spread(self) -> float:
        return float(np.sqrt(-np.expm1(-2.0 * self.epsilon)))

    @property
    def plateau(self) -> float:
        return 1.0 / self.epsilon

    def rule(self, d: int) -> quadrature.QuadratureRule:
        return quadrature.gaussian_rule(d, self.order, self.mc_samples, self.seed)


def ou_expect(fn: Callable[[np.ndarray], np.ndarray], X: np.ndarray, cfg: MollifyConfig) -> np.ndarray:
    """P_eps of an arbitrary (possibly tensor-valued) function at each row of X."""
    n, d = X.shape
    rule = cfg.rule(d)
    K = len(rule.weights)
    a, s = cfg.decay, cfg.spread
    step = max(1, _POINT_BUDGET // K)
    out = []
    for start in range(0, n, step):
        Xc = X[start : start + step]
        pts = (a * Xc[:, None, :] + s * rule.nodes[None, :, :]).reshape(-1, d)
        vals = np.asarray(fn(pts))
        vals = vals.reshape(len(Xc), K, *vals.shape[1:])
        out.append(np.tensordot(vals, rule.weights, axes=(1, 0)))
    if not out:
        return np.zeros((0,))
    return np.concatenate(out, axis=0)


def ou_gradient(f: Field, X: np.ndarray, cfg: MollifyConfig) -> np.ndarray:
    """grad P_eps A by Gaussian integration by parts: (e^-eps / s) E[A(.) Z^T]."""
    n, d = X.shape
    rule = cfg.rule(d)
    K = len(rule.weights)
    a, s = cfg.decay, cfg.spread
    step = max(1, _POINT_BUDGET // K)
    out = []
    for start in range(0, n, step):
        Xc = X[start : start + step]
        pts = (a * Xc[:, None, :] + s * rule.nodes[None, :, :]).reshape(-1, d)
        vals = f.value(pts).reshape(len(Xc), K, d)
        out.append(np.einsum("nki,kj,k->nij", vals, rule.nodes, rule.weights))
    return (a / s) * np.concatenate(out, axis=0)


def ou_apply(spec: Field, cfg: MollifyConfig, x):
    X, single = as_points(x, spec.d)
    return _unbatch(ou_expect(spec.value, X, cfg), single)


def _smoothstep(s):
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def _dsmoothstep(s):
    return 30.0 * s**2 * (1.0 - s) ** 2


def cutoff_batch(X: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    r = np.linalg.norm(X, axis=1)
    s = np.clip((r - 1.0 / epsilon) / 2.0, 0.0, 1.0)
    val = 1.0 - _smoothstep(s)
    slope = -0.5 * _dsmoothstep(s)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[:, None] > 0, X / r[:, None], 0.0)
    return val, slope[:, None] * unit


def cutoff(cfg: MollifyConfig, x):
    """(phi_eps(x), grad phi_eps(x))."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    val, grad = cutoff_batch(X, cfg.epsilon)
    if single:
        return float(val[0]), grad[0]
    return val, grad


def _use_ibp(f: Field) -> bool:
    return (not f.has_jacobian) or f.singular


_CONV_TAIL = 12.0  # kernel truncation in units of the spread


class _LineConvolution:
    """P_eps A and its derivative in d = 1 as a convolution in y = e^-eps x + s z.

    Gauss-Hermite nodes converge slowly across a cusp of the integrand, so
    singular one-dimensional bases are sampled on a fine uniform y-grid and
    convolved with the Gaussian kernel (trapezoid rule, error O(dy^1.5) at an
    |y|^alpha cusp).  Values between grid points are linearly interpolated.
    """

    def __init__(self, base: Field, cfg: MollifyConfig, reach: float, dy: float = 1e-4):
        a, s = cfg.decay, cfg.spread
        dy = min(dy, s / 200.0)
        half = int(np.ceil(_CONV_TAIL * s / dy))
        k = np.arange(-half, half + 1) * dy
        ker = np.exp(-0.5 * (k / s) ** 2)
        ker /= ker.sum()
        # d/dc of E A(c + s Z) is E[A(c + s Z) Z] / s
        dker = ker * k / s**2
        n = int(np.ceil(a * reach / dy))
        c = np.arange(-n, n + 1) * dy
        y = np.arange(-n - half, n + half + 1) * dy
        Ay = base.value(y[:, None])[:, 0]
        self.c0, self.dy, self.a = c[0], dy, a
        self.P = fftconvolve(Ay, ker[::-1], mode="valid")
        self.dP = a * fftconvolve(Ay, dker[::-1], mode="valid")

    def _interp(self, table, X):
        u = (self.a * X[:, 0] - self.c0) / self.dy
        u = np.clip(u, 0.0, len(table) - 1.000001)
        i = u.astype(np.intp)
        f = u - i
        return table[i] * (1.0 - f) + table[i + 1] * f

    def value(self, X):
        return self._interp(self.P, X)[:, None]

    def jacobian(self, X):
        return self._interp(self.dP, X)[:, None, None]


class MollifiedField(Field):
    """A^eps = phi_eps P_eps A, with Jacobian by the product rule.

    In d = 1 the field can be tabulated on a uniform grid covering the cutoff
    support and evaluated by linear interpolation, which is what makes
    large Monte Carlo runs over mollified coefficients affordable.
    """

    has_hessian = False
    has_jacobian = True
    singular = False

    def __init__(self, base: Field, cfg: MollifyConfig, *, tabulate: bool = False, table_step: float = 1e-3):
        self.base = base
        self.cfg = cfg
        self.d = base.d
        self.growth = base.growth
        self.label = f"mollified[{base.label}, eps={cfg.epsilon:g}]"
        self._table = None
        self._line = None
        if self.d == 1 and base.singular:
            self._line = _LineConvolution(base, cfg, cfg.plateau + 2.0)
        if tabulate:
            if self.d != 1:
                raise ValueError("tabulation is available in dimension 1 only")
            self._build_table(table_step)

    # -- direct evaluation
    def _direct_value(self, X):
        phi, _ = cutoff_batch(X, self.cfg.epsilon)
        out = np.zeros_like(X)
        live = phi > 0
        if np.any(live):
            P = self._line.value(X[live]) if self._line is not None else ou_expect(self.base.value, X[live], self.cfg)
            out[live] = phi[live, None] * P
        return out

    def _direct_jacobian(self, X):
        n, d = X.shape
        phi, dphi = cutoff_batch(X, self.cfg.epsilon)
        J = np.zeros((n, d, d))
        live = phi > 0
        if not np.any(live):
            return J
        Xl = X[live]
        if self._line is not None:
            P, G = self._line.value(Xl), self._line.jacobian(Xl)
        else:
            P = ou_expect(self.base.value, Xl, self.cfg)
            if _use_ibp(self.base):
                G = ou_gradient(self.base, Xl, self.cfg)
            else:
                G = self.cfg.decay * ou_expect(self.base.jacobian, Xl, self.cfg)
        J[live] = P[:, :, None] * dphi[live][:, None, :] + phi[live, None, None] * G
        return J

    # -- tabulation
    def _build_table(self, step: float):
        half = self.cfg.plateau + 2.0
        n = int(np.ceil(half / step))
        grid = np.linspace(-n * step, n * step, 2 * n + 1)
        pts = grid[:, None]
        vals = self._direct_value(pts)[:, 0]
        ders = self._direct_jacobian(pts)[:, 0, 0]
        # one zero cell on each side so that clipped indices read zero
        pad = lambda a: np.concatenate([[0.0], a, [0.0, 0.0]])
        self._table = (grid[0] - step, step, pad(vals), pad(ders))

    def _lookup(self, x: np.ndarray, table: np.ndarray) -> np.ndarray:
        x0, step, _, _ = self._table
        u = (x - x0) / step
        u = np.clip(u, 0.0, len(table) - 2.0)
        i = u.astype(np.intp)
        f = u - i
        return table[i] * (1.0 - f) + table[i + 1] * f

    def value(self, X):
        if self._table is None:
            return self._direct_value(X)
        return self._lookup(X[:, 0], self._table[2])[:, None]

    def jacobian(self, X):
        if self._table is None:
            return self._direct_jacobian(X)
        return self._lookup(X[:, 0], self._table[3])[:, None, None]


def mollify(f: Field, cfg: MollifyConfig, tabulate: bool = False) -> MollifiedField:
    return MollifiedField(f, cfg, tabulate=tabulate)


def mollify_ensemble(ens: FieldEnsemble, cfg: MollifyConfig, tabulate: bool = False) -> FieldEnsemble:
    return FieldEnsemble(
        mollify(ens.drift, cfg, tabulate),
        tuple(mollify(f, cfg, tabulate) for f in ens.diffusions),
    )


# ---------------------------------------------------------------------------
# checks


def _delta_values(f: Field, X: np.ndarray) -> np.ndarray:
    J = jacobian_array(f, X)
    return np.einsum("ni,ni->n", X, f.value(X)) - np.trace(J, axis1=1, axis2=2)


def ou_identity_residuals(spec: Field, cfg: MollifyConfig, x) -> tuple[float, float]:
    """Residuals of grad P_eps A = e^-eps P_eps grad A and delta(P_eps A) = e^eps P_eps delta(A).

    Left sides use the integration-by-parts form of grad P_eps A, right sides
    the analytic Jacobian, so the two are computed independently.
    """
    if not spec.has_jacobian:
        raise CapabilityError(f"{spec.label}: identities need an analytic Jacobian")
    X, single = as_points(x, spec.d)
    grad_lhs = ou_gradient(spec, X, cfg)
    grad_rhs = cfg.decay * ou_expect(spec.jacobian, X, cfg)
    jac_res = np.linalg.norm(grad_lhs - grad_rhs, axis=(1, 2))
    P = ou_expect(spec.value, X, cfg)
    div_lhs = np.einsum("ni,ni->n", X, P) - np.trace(grad_lhs, axis1=1, axis2=2)
    div_rhs = np.exp(cfg.epsilon) * ou_expect(lambda Y: _delta_values(spec, Y), X, cfg)
    div_res = np.abs(div_lhs - div_rhs)
    if single:
        return float(jac_res[0]), float(div_res[0])
    return jac_res, div_res


@dataclass(frozen=True)
class Lemma32Report:
    """Largest LHS - RHS over the sample for each of the four inequalities."""

    delta: float
    value_sq: float
    grad_sq: float
    delta_sq: float
    points: int

    @property
    def worst(self) -> float:
        return max(self.delta, self.value_sq, self.grad_sq, self.delta_sq)


def lemma32_check(spec: Field, cfg: MollifyConfig, sample) -> Lemma32Report:
    X, _ = as_points(sample, spec.d)
    if X.shape[0] == 0:
        raise ValueError("empty sample")
    moll = MollifiedField(spec, cfg)
    v = moll.value(X)
    J = moll.jacobian(X)
    dl = np.einsum("ni,ni->n", X, v) - np.trace(J, axis1=1, axis2=2)

    def pieces(Y):
        a = spec.value(Y)
        JA = jacobian_array(spec, Y)
        a2 = np.einsum("ni,ni->n", a, a)
        g2 = np.einsum("nij,nij->n", JA, JA)
        da = np.einsum("ni,ni->n", Y, a) - np.trace(JA, axis1=1, axis2=2)
        return np.stack(
            [
                np.sqrt(a2) + E * np.abs(da),
                a2,
                2.0 * (a2 + g2),
                2.0 * (a2 + E**2 * da**2),
            ],
            axis=1,
        )

    rhs = ou_expect(pieces, X, cfg)
    lhs = np.stack(
        [np.abs(dl), np.einsum("ni,ni->n", v, v), np.einsum("nij,nij->n", J, J), dl**2],
        axis=1,
    )
    m = np.max(lhs - rhs, axis=0)
    return Lemma32Report(float(m[0]), float(m[1]), float(m[2]), float(m[3]), X.shape[0])


def uniform_error(f: Field, cfg: MollifyConfig, radius: float = 3.0, n: int = 601) -> float:
    """sup over a lattice of the ball B(radius) of |P_eps A - A|."""
    axis = np.linspace(-radius, radius, n if f.d == 1 else max(41, n // 10))
    grids = np.meshgrid(*([axis] * f.d), indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1)
    X = X[np.linalg.norm(X, axis=1) <= radius]
    diff = ou_expect(f.value, X, cfg) - f.value(X)
    return float(np.max(np.linalg.norm(diff, axis=1)))
