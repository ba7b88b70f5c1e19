"""Vector fields on R^d and their calculus against the standard Gaussian measure.

A field is anything exposing ``d``, ``growth`` and a batched ``value(X)`` with
``X`` of shape ``(n, d)``; analytic first and second derivatives are optional
capabilities.  Built-in families live in a registry keyed by name, custom
families are added with :func:`register_family`.

All public operations accept a single point of shape ``(d,)`` or a batch of
shape ``(n, d)`` and return results of the matching rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

EPS = np.finfo(float).eps
FD_STEP = EPS ** (1.0 / 3.0)
FD2_STEP = EPS ** (1.0 / 4.0)
SINGULAR_TOL = 1e-12


class CapabilityError(RuntimeError):
    """An operation needs a derivative the field does not provide."""


# ---------------------------------------------------------------------------
# point handling


def as_points(x, d: int) -> tuple[np.ndarray, bool]:
    """Return ``(X, single)`` with ``X`` of shape (n, d)."""
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        if X.shape[0] != d:
            raise ValueError(f"point has length {X.shape[0]}, field dimension is {d}")
        return X[None, :], True
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"expected points of shape (n, {d}), got {X.shape}")
    return X, False


def _unbatch(out: np.ndarray, single: bool):
    if single:
        out = out[0]
        return float(out) if np.ndim(out) == 0 else out
    return out


# ---------------------------------------------------------------------------
# field protocol


class Field:
    """Base class for vector fields R^d -> R^d."""

    d: int
    growth: float
    label: str = "field"

    has_jacobian = False
    has_hessian = False

    def value(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        """Analytic Jacobian, shape (n, d, d) with entry (i, j) = dA^i/dx_j."""
        raise CapabilityError(f"{self.label}: no analytic Jacobian registered")

    def hessian(self, X: np.ndarray) -> np.ndarray:
        """Analytic second derivatives, shape (n, d, d, d), entry (i, j, l)."""
        raise CapabilityError(f"{self.label}: no analytic second derivatives registered")

    def singular_distance(self, X: np.ndarray) -> np.ndarray:
        """Distance to the declared singular set (inf when there is none)."""
        return np.full(X.shape[0], np.inf)

    @property
    def smooth(self) -> bool:
        return self.has_jacobian and self.has_hessian and not self.singular

    singular = False


# ---------------------------------------------------------------------------
# family registry


@dataclass(frozen=True)
class Family:
    name: str
    arity: Callable[[int], int]
    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    growth: Callable[[np.ndarray, int], float]
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    hessian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    singular_distance: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    smoothness: str = "C-infinity"
    singular_set: str = "none"
    dims: Callable[[int], bool] = lambda d: d >= 1
    validate: Optional[Callable[[np.ndarray, int], None]] = None
    note: str = ""
    growth_text: str = ""
    builtin: bool = False


_REGISTRY: dict[str, Family] = {}


def register_family(
    name: str,
    value: Callable[[np.ndarray, np.ndarray], np.ndarray],
    *,
    growth: float | Callable[[np.ndarray, int], float],
    arity: int | Callable[[int], int] = 0,
    jacobian=None,
    hessian=None,
    singular_distance=None,
    smoothness: str = "custom",
    singular_set: str = "none",
    note: str = "",
    replace: bool = False,
) -> Family:
    """Register a custom family.

    ``value(params, X)`` maps parameters and a batch of points (n, d) to
    (n, d).  ``growth`` is the declared constant C with |A(x)| <= C(1+|x|);
    a family without one cannot be registered.
    """
    if name in _REGISTRY and (_REGISTRY[name].builtin or not replace):
        raise ValueError(f"family {name!r} already registered")
    if callable(growth):
        growth_fn = growth
    else:
        c = float(growth)
        if not np.isfinite(c) or c < 0:
            raise ValueError("declared growth constant must be finite and nonnegative")
        growth_fn = lambda params, d, c=c: c
    growth_text = "params-dependent" if callable(growth) else repr(float(growth))
    arity_fn = arity if callable(arity) else (lambda d, k=int(arity): k)
    fam = Family(
        name=name,
        arity=arity_fn,
        value=value,
        growth=growth_fn,
        jacobian=jacobian,
        hessian=hessian,
        singular_distance=singular_distance,
        smoothness=smoothness,
        singular_set=singular_set,
        note=note,
        growth_text=growth_text,
    )
    _REGISTRY[name] = fam
    return fam


def unregister_family(name: str) -> None:
    fam = _REGISTRY.get(name)
    if fam is None:
        return
    if fam.builtin:
        raise ValueError(f"cannot remove built-in family {name!r}")
    del _REGISTRY[name]


def get_family(name: str) -> Family:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown field family {name!r}") from None


def families() -> list[Family]:
    return list(_REGISTRY.values())


@dataclass(frozen=True)
class FieldSpec(Field):
    """A member of a registered family: ``family`` id, dimension and parameters."""

    family: str
    d: int
    params: tuple = ()
    growth: float = dc_field(init=False)

    def __post_init__(self):
        fam = get_family(self.family)
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if not fam.dims(self.d):
            raise ValueError(f"family {self.family!r} is not defined in dimension {self.d}")
        params = tuple(float(p) for p in self.params)
        need = fam.arity(self.d)
        if len(params) != need:
            raise ValueError(
                f"family {self.family!r} in d={self.d} takes {need} parameters, got {len(params)}"
            )
        object.__setattr__(self, "params", params)
        if fam.validate is not None:
            fam.validate(np.array(params), self.d)
        object.__setattr__(self, "growth", float(fam.growth(np.array(params), self.d)))

    # -- capabilities
    @property
    def _fam(self) -> Family:
        return get_family(self.family)

    @property
    def label(self) -> str:
        return f"{self.family}(d={self.d})"

    @property
    def has_jacobian(self) -> bool:
        return self._fam.jacobian is not None

    @property
    def has_hessian(self) -> bool:
        return self._fam.hessian is not None

    @property
    def singular(self) -> bool:
        return self._fam.singular_distance is not None

    def _p(self) -> np.ndarray:
        return np.array(self.params)

    def value(self, X):
        return np.asarray(self._fam.value(self._p(), X), dtype=float)

    def jacobian(self, X):
        fam = self._fam
        if fam.jacobian is None:
            raise CapabilityError(f"{self.label}: no analytic Jacobian registered")
        return np.asarray(fam.jacobian(self._p(), X), dtype=float)

    def hessian(self, X):
        fam = self._fam
        if fam.hessian is None:
            raise CapabilityError(f"{self.label}: no analytic second derivatives registered")
        return np.asarray(fam.hessian(self._p(), X), dtype=float)

    def singular_distance(self, X):
        fam = self._fam
        if fam.singular_distance is None:
            return np.full(X.shape[0], np.inf)
        return fam.singular_distance(self._p(), X)


# -- built-in families -------------------------------------------------------


def _constant_value(p, X):
    return np.broadcast_to(p, X.shape).copy()


def _zeros_jac(p, X):
    n, d = X.shape
    return np.zeros((n, d, d))


def _zeros_hess(p, X):
    n, d = X.shape
    return np.zeros((n, d, d, d))


def _linear_matrix(p, d):
    return p.reshape(d, d)


def _linear_value(p, X):
    M = _linear_matrix(p, X.shape[1])
    return X @ M.T


def _linear_jac(p, X):
    n, d = X.shape
    return np.broadcast_to(_linear_matrix(p, d), (n, d, d)).copy()


def _rotation_value(p, X):
    return np.stack([-X[:, 1], X[:, 0]], axis=1)


def _rotation_jac(p, X):
    J = np.zeros((X.shape[0], 2, 2))
    J[:, 0, 1] = -1.0
    J[:, 1, 0] = 1.0
    return J


def _pa_split(p):
    alpha = p[0]
    u = p[1:]
    return alpha, u / np.linalg.norm(u)


def _pa_validate(p, d):
    alpha = p[0]
    if not 0.0 < alpha < 1.0:
        raise ValueError("power-alpha exponent must lie in (0, 1)")
    if np.linalg.norm(p[1:]) == 0.0:
        raise ValueError("power-alpha direction must be nonzero")


def _pa_value(p, X):
    alpha, u = _pa_split(p)
    r = np.linalg.norm(X, axis=1)
    return (r ** alpha)[:, None] * u[None, :]


def _check_away(dist, label):
    if np.any(dist < SINGULAR_TOL):
        raise CapabilityError(f"{label}: derivative requested on the singular set")


def _pa_jac(p, X):
    alpha, u = _pa_split(p)
    r = np.linalg.norm(X, axis=1)
    _check_away(r, "power-alpha")
    coef = alpha * r ** (alpha - 2.0)
    return coef[:, None, None] * u[None, :, None] * X[:, None, :]


def _pa_hess(p, X):
    alpha, u = _pa_split(p)
    n, d = X.shape
    r = np.linalg.norm(X, axis=1)
    _check_away(r, "power-alpha")
    outer = X[:, :, None] * X[:, None, :]
    inner = (alpha - 2.0) * (r ** (alpha - 4.0))[:, None, None] * outer
    inner = inner + (r ** (alpha - 2.0))[:, None, None] * np.eye(d)[None]
    return alpha * u[None, :, None, None] * inner[:, None, :, :]


_INV_E = float(np.exp(-1.0))


def _osgood_profile(s):
    a = np.abs(s)
    out = np.full_like(a, _INV_E)
    inside = (a > 0) & (a < _INV_E)
    out[inside] = -a[inside] * np.log(a[inside])
    out[a == 0] = 0.0
    return out


def _osgood_dprofile(s):
    a = np.abs(s)
    out = np.zeros_like(a)
    inside = a < _INV_E
    out[inside] = np.sign(s[inside]) * (-np.log(a[inside]) - 1.0)
    return out


def _osgood_d2profile(s):
    a = np.abs(s)
    out = np.zeros_like(a)
    inside = a < _INV_E
    out[inside] = -1.0 / a[inside]
    return out


def _osgood_value(p, X):
    out = np.zeros_like(X)
    out[:, 0] = _osgood_profile(X[:, 1])
    return out


def _osgood_jac(p, X):
    _check_away(np.abs(X[:, 1]), "osgood")
    n, d = X.shape
    J = np.zeros((n, d, d))
    J[:, 0, 1] = _osgood_dprofile(X[:, 1])
    return J


def _osgood_hess(p, X):
    _check_away(np.abs(X[:, 1]), "osgood")
    n, d = X.shape
    H = np.zeros((n, d, d, d))
    H[:, 0, 1, 1] = _osgood_d2profile(X[:, 1])
    return H


def _sine_value(p, X):
    return np.sin(X)


def _sine_jac(p, X):
    n, d = X.shape
    J = np.zeros((n, d, d))
    idx = np.arange(d)
    J[:, idx, idx] = np.cos(X)
    return J


def _sine_hess(p, X):
    n, d = X.shape
    H = np.zeros((n, d, d, d))
    idx = np.arange(d)
    H[:, idx, idx, idx] = -np.sin(X)
    return H


def _builtin(**kw) -> None:
    fam = Family(builtin=True, **kw)
    _REGISTRY[fam.name] = fam


_builtin(
    name="constant",
    growth_text="|c|",
    arity=lambda d: d,
    value=_constant_value,
    jacobian=_zeros_jac,
    hessian=_zeros_hess,
    growth=lambda p, d: float(np.linalg.norm(p)),
    note="A(x) = c",
)
_builtin(
    name="linear",
    growth_text="||M||_2",
    arity=lambda d: d * d,
    value=_linear_value,
    jacobian=_linear_jac,
    hessian=_zeros_hess,
    growth=lambda p, d: float(np.linalg.norm(_linear_matrix(p, d), 2)),
    note="A(x) = M x, params row-major",
)
_builtin(
    name="rotation",
    growth_text="1",
    arity=lambda d: 0,
    value=_rotation_value,
    jacobian=_rotation_jac,
    hessian=_zeros_hess,
    growth=lambda p, d: 1.0,
    dims=lambda d: d == 2,
    note="A(x) = (-x2, x1); |A(x)| = |x| <= 1 + |x|",
)
_builtin(
    name="power-alpha",
    growth_text="1",
    arity=lambda d: 1 + d,
    value=_pa_value,
    jacobian=_pa_jac,
    hessian=_pa_hess,
    singular_distance=lambda p, X: np.linalg.norm(X, axis=1),
    growth=lambda p, d: 1.0,
    validate=_pa_validate,
    smoothness="Holder-alpha, W1p_loc iff p(1-alpha) < d",
    singular_set="origin",
    note="A(x) = |x|^alpha u, params (alpha, u)",
)
_builtin(
    name="osgood",
    growth_text="1/e",
    arity=lambda d: 0,
    value=_osgood_value,
    jacobian=_osgood_jac,
    hessian=_osgood_hess,
    singular_distance=lambda p, X: np.abs(X[:, 1]),
    growth=lambda p, d: _INV_E,
    dims=lambda d: d >= 2,
    smoothness="log-Lipschitz (Osgood modulus s log 1/s), C1 off the singular set",
    singular_set="hyperplane x2 = 0",
    note="A(x) = g(x2) e1, g(s) = |s| log(1/|s|) for |s| < 1/e, 1/e beyond; div A = 0",
)
_builtin(
    name="sine",
    growth_text="sqrt(d)",
    arity=lambda d: 0,
    value=_sine_value,
    jacobian=_sine_jac,
    hessian=_sine_hess,
    growth=lambda p, d: float(np.sqrt(d)),
    note="A(x)_i = sin(x_i)",
)


# convenience constructors


def constant(c) -> FieldSpec:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return FieldSpec("constant", c.size, tuple(c))


def zero(d: int) -> FieldSpec:
    return FieldSpec("constant", d, (0.0,) * d)


def linear(M) -> FieldSpec:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return FieldSpec("linear", M.shape[0], tuple(M.ravel()))


def rotation() -> FieldSpec:
    return FieldSpec("rotation", 2)


def power_alpha(alpha: float, u) -> FieldSpec:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return FieldSpec("power-alpha", u.size, (alpha, *u))


def osgood(d: int = 2) -> FieldSpec:
    return FieldSpec("osgood", d)


def sine(d: int = 1) -> FieldSpec:
    return FieldSpec("sine", d)


# ---------------------------------------------------------------------------
# derivatives


def fd_jacobian(f: Field, X: np.ndarray) -> np.ndarray:
    """Central differences with step max(1, |x|) * eps^(1/3)."""
    n, d = X.shape
    h = np.maximum(1.0, np.linalg.norm(X, axis=1)) * FD_STEP
    J = np.empty((n, d, d))
    for j in range(d):
        step = np.zeros_like(X)
        step[:, j] = h
        J[:, :, j] = (f.value(X + step) - f.value(X - step)) / (2.0 * h)[:, None]
    return J


def jacobian_array(f: Field, X: np.ndarray, mode: str = "auto") -> np.ndarray:
    if mode == "analytic":
        return f.jacobian(X)
    if mode == "finite-difference":
        return fd_jacobian(f, X)
    if mode != "auto":
        raise ValueError(f"unknown Jacobian mode {mode!r}")
    if f.has_jacobian:
        return f.jacobian(X)
    return fd_jacobian(f, X)


def hessian_array(f: Field, X: np.ndarray, mode: str = "auto") -> np.ndarray:
    """Second derivatives; nested central differences when not analytic."""
    if mode in ("auto", "analytic") and f.has_hessian:
        return f.hessian(X)
    if mode == "analytic":
        raise CapabilityError(f"{f.label}: no analytic second derivatives registered")
    n, d = X.shape
    h = np.maximum(1.0, np.linalg.norm(X, axis=1)) * FD2_STEP
    H = np.empty((n, d, d, d))
    for l in range(d):
        step = np.zeros_like(X)
        step[:, l] = h
        Jp = jacobian_array(f, X + step, mode)
        Jm = jacobian_array(f, X - step, mode)
        H[:, :, :, l] = (Jp - Jm) / (2.0 * h)[:, None, None]
    return H


@dataclass(frozen=True)
class JacobianMatrix:
    entries: np.ndarray
    provenance: str


def eval_field(spec: Field, x):
    X, single = as_points(x, spec.d)
    return _unbatch(spec.value(X), single)


def jacobian(spec: Field, x, mode: str = "analytic") -> JacobianMatrix:
    """Jacobian at one point or a batch; ``mode`` is analytic or finite-difference."""
    X, single = as_points(x, spec.d)
    J = jacobian_array(spec, X, mode)
    if not np.all(np.isfinite(J)):
        raise FloatingPointError("non-finite Jacobian entries")
    prov = "analytic" if mode == "analytic" else "finite-difference"
    return JacobianMatrix(J[0] if single else J, prov)


def _divergence(f: Field, X: np.ndarray, J: np.ndarray) -> np.ndarray:
    return np.einsum("ni,ni->n", X, f.value(X)) - np.trace(J, axis1=1, axis2=2)


def gauss_divergence(spec: Field, x, mode: str = "auto"):
    """delta(A)(x) = <x, A(x)> - div A(x), the adjoint of the gradient under gamma_d."""
    X, single = as_points(x, spec.d)
    J = jacobian_array(spec, X, mode)
    return _unbatch(_divergence(spec, X, J), single)


def directional_derivative(specB: Field, specA: Field, x, mode: str = "auto"):
    """(grad B)(x) A(x): the derivative of B along A."""
    if specA.d != specB.d:
        raise ValueError("fields have different dimensions")
    X, single = as_points(x, specA.d)
    JB = jacobian_array(specB, X, mode)
    return _unbatch(np.einsum("nij,nj->ni", JB, specA.value(X)), single)


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class FieldEnsemble:
    """Drift A_0 and diffusion fields A_1..A_m sharing one dimension."""

    drift: Field
    diffusions: tuple = ()

    def __post_init__(self):
        diffs = tuple(self.diffusions)
        object.__setattr__(self, "diffusions", diffs)
        d = self.drift.d
        for k, f in enumerate(diffs, start=1):
            if f.d != d:
                raise ValueError(f"diffusion {k} has dimension {f.d}, drift has {d}")

    @property
    def d(self) -> int:
        return self.drift.d

    @property
    def m(self) -> int:
        return len(self.diffusions)

    @property
    def fields(self) -> tuple:
        return (self.drift, *self.diffusions)

    @classmethod
    def zero(cls, d: int, m: int = 0) -> "FieldEnsemble":
        return cls(zero(d), tuple(zero(d) for _ in range(m)))

    @property
    def growth(self) -> float:
        return max(f.growth for f in self.fields)


@dataclass(frozen=True)
class ScalarDiagnostics:
    delta: float
    phi: float
    phi_tilde_r: float
    r: float


@dataclass
class LocalTerms:
    """Values, Jacobians and Gaussian divergences of every member at a batch."""

    values: list
    jacobians: list
    deltas: list


def local_terms(ens: FieldEnsemble, X: np.ndarray, mode: str = "auto") -> LocalTerms:
    vals, jacs, dels = [], [], []
    for f in ens.fields:
        v = f.value(X)
        J = jacobian_array(f, X, mode)
        vals.append(v)
        jacs.append(J)
        dels.append(np.einsum("ni,ni->n", X, v) - np.trace(J, axis1=1, axis2=2))
    return LocalTerms(vals, jacs, dels)


def _phi_from_terms(t: LocalTerms) -> np.ndarray:
    out = t.deltas[0].copy()
    for v, J in zip(t.values[1:], t.jacobians[1:]):
        out += 0.5 * np.einsum("ni,ni->n", v, v)
        out += 0.5 * np.einsum("nik,nki->n", J, J)
    return out


def density_terms(ens: FieldEnsemble, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian divergences of the diffusions, shape (n, m), and Phi, shape (n,)."""
    t = local_terms(ens, X)
    if ens.m:
        deltas = np.stack(t.deltas[1:], axis=1)
    else:
        deltas = np.zeros((X.shape[0], 0))
    return deltas, _phi_from_terms(t)


def _corrected_drift(ens: FieldEnsemble, x, weight: float):
    X, single = as_points(x, ens.d)
    out = ens.drift.value(X)
    for f in ens.diffusions:
        J = jacobian_array(f, X)
        out = out - weight * np.einsum("nij,nj->ni", J, f.value(X))
    return _unbatch(out, single)


def strat_drift(ens: FieldEnsemble, x):
    """A_0 - 1/2 sum_j (grad A_j) A_j: the drift of the equivalent Stratonovich equation."""
    return _corrected_drift(ens, x, 0.5)


def dual_drift(ens: FieldEnsemble, x):
    """A_0 - sum_j (grad A_j) A_j: the drift whose negative drives the inverse flow."""
    return _corrected_drift(ens, x, 1.0)


def phi_functional(ens: FieldEnsemble, x):
    """delta(A_0) + 1/2 sum |A_j|^2 + 1/2 sum <grad A_j, (grad A_j)^T>."""
    X, single = as_points(x, ens.d)
    return _unbatch(_phi_from_terms(local_terms(ens, X)), single)


def phi_tilde(ens: FieldEnsemble, x, r: float):
    """2r|delta(A_0)| + r sum (|A_j|^2 + |grad A_j|^2 + 2r |delta(A_j)|^2)."""
    if r < 0:
        raise ValueError("r must be nonnegative")
    X, single = as_points(x, ens.d)
    t = local_terms(ens, X)
    out = 2.0 * r * np.abs(t.deltas[0])
    for v, J, dl in zip(t.values[1:], t.jacobians[1:], t.deltas[1:]):
        out += r * (
            np.einsum("ni,ni->n", v, v)
            + np.einsum("nik,nik->n", J, J)
            + 2.0 * r * dl**2
        )
    return _unbatch(out, single)


def diagnostics(ens: FieldEnsemble, x, r: float = 1.0) -> ScalarDiagnostics:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("diagnostics take a single point")
    return ScalarDiagnostics(
        delta=float(gauss_divergence(ens.drift, x)),
        phi=float(phi_functional(ens, x)),
        phi_tilde_r=float(phi_tilde(ens, x, r)),
        r=float(r),
    )


def _lie_of_delta(f: Field, X, v, J, H) -> np.ndarray:
    """<grad delta(A), A> from first and second derivatives."""
    # d_l delta(A) = A^l + sum_k x_k dA^k/dx_l - sum_k d^2 A^k / dx_k dx_l
    grad = v + np.einsum("nk,nkl->nl", X, J) - np.einsum("nkkl->nl", H)
    return np.einsum("nl,nl->n", grad, v)


def _div_of_self_derivative(v, J, H) -> np.ndarray:
    """div((grad A) A) = sum_{i,k} d_i d_k A^i A^k + dA^i/dx_k dA^k/dx_i."""
    return np.einsum("niki,nk->n", H, v) + np.einsum("nik,nki->n", J, J)


def lemma_lhs(ens: FieldEnsemble, X: np.ndarray, mode: str = "auto") -> np.ndarray:
    """1/2 sum_j L_{A_j} delta(A_j) + delta(A_0 - 1/2 sum_j (grad A_j) A_j)."""
    A0 = ens.drift
    v0 = A0.value(X)
    J0 = jacobian_array(A0, X, mode)
    tilde = v0.copy()
    div_tilde = np.trace(J0, axis1=1, axis2=2).copy()
    lie = np.zeros(X.shape[0])
    for f in ens.diffusions:
        v = f.value(X)
        J = jacobian_array(f, X, mode)
        H = hessian_array(f, X, mode)
        tilde -= 0.5 * np.einsum("nij,nj->ni", J, v)
        div_tilde -= 0.5 * _div_of_self_derivative(v, J, H)
        lie += 0.5 * _lie_of_delta(f, X, v, J, H)
    return lie + np.einsum("ni,ni->n", X, tilde) - div_tilde


def lemma21_residual(ens: FieldEnsemble, x, mode: str = "auto"):
    """|LHS - RHS| of the identity turning the Ito density exponent into Phi.

    The left side is assembled from second derivatives (analytic when the
    family registers them, nested central differences otherwise); the right
    side is :func:`phi_functional`.  Points within ``SINGULAR_TOL`` of a
    declared singular set raise :class:`CapabilityError`.
    """
    X, single = as_points(x, ens.d)
    for f in ens.fields:
        _check_away(f.singular_distance(X), f.label)
    lhs = lemma_lhs(ens, X, mode)
    rhs = _phi_from_terms(local_terms(ens, X, mode))
    return _unbatch(np.abs(lhs - rhs), single)


def measured_growth(f: Field, radius: float = 1e3, n: int = 4096, seed: int = 0) -> float:
    """max |A(x)| / (1 + |x|) over a deterministic sample of the ball B(radius)."""
    from . import rng

    dirs = rng.gaussian_points(seed, 0, n, f.d, stream=rng.MONTE_CARLO)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    u = rng.uniforms(seed, rng.MONTE_CARLO, 1, n)
    radii = radius * u ** (1.0 / f.d)
    # include the outer shell and a log-spaced set of radii
    shell = np.geomspace(1e-3, radius, 64)
    pts = np.concatenate([dirs * radii[:, None], dirs[: len(shell)] * shell[:, None]])
    vals = np.linalg.norm(f.value(pts), axis=1)
    return float(np.max(vals / (1.0 + np.linalg.norm(pts, axis=1))))


def strat_divergence(ens: FieldEnsemble, x, mode: str = "auto"):
    """delta of the Stratonovich drift A_0 - 1/2 sum_j (grad A_j) A_j."""
    X, single = as_points(x, ens.d)
    A0 = ens.drift
    tilde = A0.value(X)
    div = np.trace(jacobian_array(A0, X, mode), axis1=1, axis2=2)
    for f in ens.diffusions:
        v = f.value(X)
        J = jacobian_array(f, X, mode)
        H = hessian_array(f, X, mode)
        tilde = tilde - 0.5 * np.einsum("nij,nj->ni", J, v)
        div = div - 0.5 * _div_of_self_derivative(v, J, H)
    return _unbatch(np.einsum("ni,ni->n", X, tilde) - div, single)
