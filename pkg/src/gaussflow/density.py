"""Densities of push-forwards of gamma_d under the flow, and their bounds.

K_t is the density of (X_t)# gamma_d and K~_t that of the inverse flow's
push-forward, both relative to gamma_d.  Along a trajectory

    log K~_t(x) = -sum_j int delta(A_j)(X_s) dw^j - int Phi(X_s) ds,

so K~ is accumulated in log space by the Euler integrator.  Moments of K_t
are estimated through the change of variables
E int K_t^p dgamma = E int K~_t^(1-p) dgamma, and E int K_t |log K_t| dgamma =
E int |log K~_t| dgamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy.stats import gaussian_kde

from . import rng
from ._parallel import chunk_map, chunks, mean_se, tree_sum
from .fields import FieldEnsemble, as_points, gauss_divergence, local_terms, strat_divergence
from .quadrature import GaussIntegral, log_exp_integral, lq_norm
from .sde import (
    BrownianPath,
    TimeGrid,
    Trajectory,
    brownian_block,
    density_callback,
    euler,
    invert_batch,
    sample_brownian,
)

E = math.e
LAMBDA_CAP = 1e6
MIN_T0 = 2.0**-20
MAX_LEVEL = 8
PATH_CHUNK = 64


# ---------------------------------------------------------------------------
# pathwise densities


@dataclass
class PathDensityRecord:
    times: np.ndarray
    log_tilde_K: np.ndarray
    trajectory: Trajectory

    @property
    def tilde_K(self) -> np.ndarray:
        return np.exp(self.log_tilde_K)


def tilde_density(ens: FieldEnsemble, traj: Trajectory) -> PathDensityRecord:
    if not traj.has_density:
        raise ValueError("trajectory was integrated without density accumulators")
    return PathDensityRecord(traj.times, -traj.ito_sum - traj.phi_sum, traj)


def stratonovich_log_density(ens: FieldEnsemble, traj: Trajectory, increments: np.ndarray, h: float) -> np.ndarray:
    """log K~ from the Stratonovich form with midpoint stochastic integrals.

    Cross-check of the Ito accumulation; the two agree to O(h^(1/2)) pathwise
    and to O(h) in mean.
    """
    S = traj.states
    mid = 0.5 * (S[:-1] + S[1:])
    steps = np.zeros(len(S) - 1)
    for j, f in enumerate(ens.diffusions):
        steps -= gauss_divergence(f, mid) * increments[:, j]
    steps -= strat_divergence(ens, S[:-1]) * h
    return np.concatenate([[0.0], np.cumsum(steps)])


# ---------------------------------------------------------------------------
# duality Monte Carlo


def _initials(seed: int, index: int, n: int, d: int) -> np.ndarray:
    return rng.gaussian_points(seed, index, n, d, stream=rng.INITIALS)


@dataclass
class _Partial:
    lp_path_means: np.ndarray  # (P,) mean over initials of K~_T^(1-p)
    ent_path_means: np.ndarray  # (P,) mean of |log K~_T|
    lp_time_sums: np.ndarray  # (N+1,) sum over paths of per-path means of K~_t^(1-p)


def _duality_chunk(ens: FieldEnsemble, grid: TimeGrid, p: float, n_initials: int, seed: int, span):
    idx = list(range(*span))
    dW = brownian_block(grid, ens.m, seed, idx)
    X0 = np.vstack([_initials(seed, i, n_initials, ens.d) for i in idx])
    run = euler(ens.drift.value, ens.diffusions, X0, dW, grid.h, group=n_initials, terms=density_callback(ens), record=False)
    logk = -(run.ito + run.phi)  # (N+1, n)
    P = len(idx)
    powered = np.exp((1.0 - p) * logk).reshape(grid.N + 1, P, n_initials).mean(axis=2)
    ent = np.abs(logk[-1]).reshape(P, n_initials).mean(axis=1)
    return _Partial(powered[-1].copy(), ent, powered.sum(axis=1))


def _duality_pass(ens, grid, p, n_paths, n_initials, seed) -> _Partial:
    spans = chunks(n_paths, PATH_CHUNK)
    parts = chunk_map(lambda sp: _duality_chunk(ens, grid, p, n_initials, seed, sp), spans)
    return _Partial(
        np.concatenate([pt.lp_path_means for pt in parts]),
        np.concatenate([pt.ent_path_means for pt in parts]),
        tree_sum([pt.lp_time_sums for pt in parts]),
    )


@dataclass
class MomentReport:
    p: float
    lp_estimate: float
    lp_se: float
    entropy_estimate: float
    entropy_se: float
    lambda_pT: float
    n_paths: int
    n_initials: int
    T: float

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)


def _moment_report(ens, grid, p, n_paths, n_initials, seed) -> MomentReport:
    if p <= 1:
        raise ValueError("p must exceed 1")
    if n_paths < 2 or n_initials < 1:
        raise ValueError("need at least two paths and one initial point per path")
    part = _duality_pass(ens, grid, p, n_paths, n_initials, seed)
    m, se = mean_se(part.lp_path_means)
    lp = m ** (1.0 / p)
    lp_se = (1.0 / p) * m ** (1.0 / p - 1.0) * se
    ent, ent_se = mean_se(part.ent_path_means)
    lam = float(np.max(part.lp_time_sums / n_paths) ** (1.0 / p))
    return MomentReport(p, lp, lp_se, ent, ent_se, lam, n_paths, n_initials, grid.T)


def lp_norm_via_duality(ens: FieldEnsemble, grid: TimeGrid, p: float, n_paths: int, n_initials: int, seed: int = 0) -> MomentReport:
    """||K_T||_{L^p(P x gamma_d)} as (E int K~_T^(1-p) dgamma)^(1/p).

    The standard error treats paths as the independent unit (initial points
    sharing a path are correlated); the 1/p power is propagated by the delta
    method.  ``lambda_pT`` is the running maximum over grid times.
    """
    return _moment_report(ens, grid, p, n_paths, n_initials, seed)


def entropy_via_duality(ens: FieldEnsemble, grid: TimeGrid, n_paths: int, n_initials: int, seed: int = 0, p: float = 2.0) -> MomentReport:
    """E int K_T |log K_T| dgamma as E int |log K~_T| dgamma (same pass as the L^p estimate)."""
    return _moment_report(ens, grid, p, n_paths, n_initials, seed)


# ---------------------------------------------------------------------------
# direct density estimates


@dataclass
class DensityEstimate:
    points: np.ndarray
    K: np.ndarray
    method: str
    bandwidth: Optional[float] = None
    mode: str = "per-path"
    flagged: int = 0
    kept: Optional[np.ndarray] = None


def gaussian_pdf(Y: np.ndarray) -> np.ndarray:
    d = Y.shape[1]
    return np.exp(-0.5 * np.einsum("ni,ni->n", Y, Y)) / (2 * np.pi) ** (d / 2)


def pushforward_sample(
    ens: FieldEnsemble,
    grid: TimeGrid,
    n_samples: int,
    seed: int = 0,
    mode: str = "per-path",
    path_index: int = 0,
) -> np.ndarray:
    """Endpoints X_T(x) for x ~ gamma_d, through one path or one path per sample."""
    if mode == "per-path":
        X0 = _initials(seed, path_index, n_samples, ens.d)
        dW = sample_brownian(grid, ens.m, seed, path_index).increments[:, None, :]
        return euler(ens.drift.value, ens.diffusions, X0, dW, grid.h, group=n_samples, record=False).final
    if mode == "annealed":
        X0 = _initials(seed, path_index, n_samples, ens.d)
        dW = brownian_block(grid, ens.m, seed, range(path_index, path_index + n_samples))
        return euler(ens.drift.value, ens.diffusions, X0, dW, grid.h, record=False).final
    raise ValueError(f"unknown sampling mode {mode!r}")


def pushforward_kde(endpoints, points, bandwidth=None, mode: str = "per-path") -> DensityEstimate:
    """Gaussian KDE of the endpoints divided by the gamma_d density."""
    Xs = np.atleast_2d(np.asarray(endpoints, dtype=float))
    if Xs.shape[0] < 100:
        raise ValueError(f"KDE needs at least 100 samples, got {Xs.shape[0]}")
    Y = np.asarray(points, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None] if Xs.shape[1] == 1 else Y[None, :]
    kde = gaussian_kde(Xs.T, bw_method="silverman" if bandwidth is None else bandwidth)
    K = kde(Y.T) / gaussian_pdf(Y)
    return DensityEstimate(Y, K, "kde", float(kde.factor), mode)


def density_via_inverse(
    ens: FieldEnsemble,
    grid: TimeGrid,
    t: float,
    points,
    path: BrownianPath,
    tol: Optional[float] = None,
) -> DensityEstimate:
    """K_t(y) = 1 / K~_t(X_t^{-1}(y)) with the inverse from the dual flow.

    Points whose round trip |X_t(x_hat) - y| exceeds ``tol`` (default
    10 sqrt(h)) are flagged and dropped from ``points``/``K``.
    """
    Y, _ = as_points(points, ens.d)
    K_idx = grid.index_of(t)
    tol = 10.0 * math.sqrt(grid.h) if tol is None else tol
    if K_idx == 0:
        return DensityEstimate(Y, np.ones(len(Y)), "inverse-flow", kept=np.ones(len(Y), bool))
    xhat = invert_batch(ens, Y, path, K_idx)
    fwd = path.restrict(K_idx)
    run = euler(
        ens.drift.value, ens.diffusions, xhat, fwd.increments[:, None, :], grid.h,
        group=len(Y), terms=density_callback(ens), record=False,
    )
    err = np.linalg.norm(run.final - Y, axis=1)
    keep = err <= tol
    K = np.exp(run.ito[-1] + run.phi[-1])
    return DensityEstimate(Y[keep], K[keep], "inverse-flow", flagged=int(np.sum(~keep)), kept=keep)


def relative_l1(K1: np.ndarray, K2: np.ndarray, points: np.ndarray) -> float:
    """int |K1 - K2| dgamma / int K2 dgamma over a uniform grid of points."""
    pts = np.asarray(points, dtype=float)
    w = gaussian_pdf(pts[:, None] if pts.ndim == 1 else pts)
    return float(np.sum(np.abs(K1 - K2) * w) / np.sum(np.abs(K2) * w))


# ---------------------------------------------------------------------------
# analytic bounds


@dataclass
class _Pointwise:
    a0: np.ndarray  # |A_0|
    d0: np.ndarray  # delta(A_0)
    a2: np.ndarray  # sum_j |A_j|^2
    g2: np.ndarray  # sum_j |grad A_j|^2 (Frobenius)
    dj2: np.ndarray  # sum_j delta(A_j)^2


def pointwise(ens: FieldEnsemble, X: np.ndarray) -> _Pointwise:
    t = local_terms(ens, X)
    n = X.shape[0]
    a2 = np.zeros(n)
    g2 = np.zeros(n)
    dj2 = np.zeros(n)
    for v, J, dl in zip(t.values[1:], t.jacobians[1:], t.deltas[1:]):
        a2 += np.einsum("ni,ni->n", v, v)
        g2 += np.einsum("nij,nij->n", J, J)
        dj2 += dl**2
    return _Pointwise(np.linalg.norm(t.values[0], axis=1), t.deltas[0], a2, g2, dj2)


def _exp_integral(ens: FieldEnsemble, exponent) -> GaussIntegral:
    return log_exp_integral(lambda X: exponent(pointwise(ens, X)), ens.d)


def _powered(res: GaussIntegral, power: float) -> float:
    if res.status == "divergent":
        return math.inf
    return float(math.exp(res.log_value * power))


def theorem22_bound(ens: FieldEnsemble, p: float, t: float) -> float:
    """Upper bound on ||K_t||_p; +inf when the exponential moment diverges."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    res = _exp_integral(ens, lambda w: p * t * (2 * np.abs(w.d0) + w.a2 + w.g2 + 2 * (p - 1) * w.dj2))
    return _powered(res, (p - 1) / (p * (2 * p - 1)))


def corollary23_bound(ens: FieldEnsemble, p: float, t: float) -> float:
    """Upper bound on ||K~_t||_p, the density of the inverse flow's push-forward."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    res = _exp_integral(ens, lambda w: (p + 1) * t * (2 * np.abs(w.d0) + w.a2 + w.g2 + 2 * p * w.dj2))
    return _powered(res, 1.0 / (2 * p + 1))


def lambda_T0(ens: FieldEnsemble, T0: float) -> tuple[float, str]:
    res = _exp_integral(
        ens,
        lambda w: 4 * T0 * (w.a0 + E * np.abs(w.d0) + 4 * w.a2 + w.g2 + 2 * E**2 * w.dj2),
    )
    return _powered(res, 1.0 / 6.0), res.status


def _admissible(ens, T0) -> tuple[bool, float]:
    lam, status = lambda_T0(ens, T0)
    return status == "finite" and lam <= LAMBDA_CAP, lam


def find_T0(ens: FieldEnsemble, T: float, iterations: int = 40) -> tuple[Optional[float], float]:
    """Largest T0 <= T with Lambda_T0 finite and at most 1e6 (bisection)."""
    ok, lam = _admissible(ens, T)
    if ok:
        return T, lam
    lo = MIN_T0 * T if T > 1 else MIN_T0
    ok, lam_lo = _admissible(ens, lo)
    if not ok:
        return None, math.inf
    hi = T
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        ok, lam_mid = _admissible(ens, mid)
        if ok:
            lo, lam_lo = mid, lam_mid
        else:
            hi = mid
    return lo, lam_lo


@dataclass
class BoundReport:
    T: float
    p: float
    bound_2_7: float
    bound_2_8: float
    T0: Optional[float]
    lambda_T0: float
    N: Optional[int]
    C1: float
    C2: float
    entropy_bound: float
    status: str  # ok | condition-violated | refused
    integrable: bool
    notes: list = dc_field(default_factory=list)

    @property
    def condition_violated(self) -> bool:
        return self.status != "ok"


def entropy_bound_thm33(ens: FieldEnsemble, T: float, p: float = 2.0) -> BoundReport:
    """2 (C1 T)^(1/2) Lambda_T0 + C2 T Lambda_T0^2 with T0 found by bisection."""
    if p != 2:
        raise ValueError("the entropy bound is stated for p = 2")
    b27 = theorem22_bound(ens, p, T)
    b28 = corollary23_bound(ens, p, T)
    T0, lam = find_T0(ens, T)
    if T0 is None:
        return BoundReport(T, p, b27, b28, None, math.inf, None, math.inf, math.inf, math.inf,
                           "condition-violated", False, ["no admissible T0 down to 2^-20"])
    N = max(1, math.ceil(T / T0 - 1e-12))
    if N > MAX_LEVEL:
        return BoundReport(T, p, b27, b28, T0, lam, N, math.inf, math.inf, math.inf, "refused", True,
                           [f"N = {N} exceeds {MAX_LEVEL}; L^(2^N) norms are out of reach"])
    q = 2.0**N
    C1 = lq_norm(lambda X: (lambda w: 2 * (w.a2 + E**2 * w.dj2))(pointwise(ens, X)), q, ens.d)
    C2 = lq_norm(lambda X: (lambda w: w.a0 + E * np.abs(w.d0) + 1.5 * w.a2 + w.g2)(pointwise(ens, X)), q, ens.d)
    bound = 2.0 * math.sqrt(C1 * T) * lam + C2 * T * lam**2
    return BoundReport(T, p, b27, b28, T0, lam, N, C1, C2, bound, "ok", True)


CONDITIONS = {
    "1.2": lambda w: np.abs(w.d0) + w.dj2 + w.g2,
    "A3": lambda w: np.abs(w.d0) + w.dj2,
    "A4": lambda w: w.g2,
}


@dataclass
class ConditionReport:
    condition: str
    lambda0: float
    value: float
    status: str

    @property
    def finite(self) -> bool:
        return self.status != "divergent"


def check_exponential_condition(ens: FieldEnsemble, lambda0: float, condition: str = "1.2") -> ConditionReport:
    """Exponential integrability of the divergence and gradient terms."""
    if lambda0 <= 0:
        raise ValueError("lambda0 must be positive")
    try:
        expr = CONDITIONS[condition]
    except KeyError:
        raise ValueError(f"unknown condition {condition!r}; choose from {sorted(CONDITIONS)}") from None
    res = _exp_integral(ens, lambda w: lambda0 * expr(w))
    return ConditionReport(condition, lambda0, res.value, res.status)
