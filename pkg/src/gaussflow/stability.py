"""Maximal functions on lattices and the logarithmic stability functional.

The lattice tools estimate the local maximal function M_R f (sup over radii
r <= R of ball averages of |f|) and the two inequalities it satisfies: the
pointwise Lusin-Lipschitz bound and the L^p bound.  The Monte Carlo part
couples two flows on the same noise and measures
E int_{G_R} log(sup_t |X_t - Xhat_t|^2 / sigma^2 + 1) dgamma_d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve

from . import rng
from ._parallel import chunk_map, chunks, mean_se
from .density import lp_norm_via_duality
from .fields import Field, FieldEnsemble, jacobian_array
from .mollify import MollifyConfig, mollify_ensemble
from .quadrature import lq_norm
from .sde import TimeGrid, brownian_block, coupled_sup

PATH_CHUNK = 16
SINGULAR_EXCLUSION = 1e-6


# ---------------------------------------------------------------------------
# lattices


@dataclass(frozen=True)
class SampleGrid:
    """Cubic lattice covering B(radius); ``offset`` is ``node`` (origin on the
    lattice) or ``cell`` (half-shifted, origin at a cell centre)."""

    radius: float
    spacing: float
    d: int = 1
    offset: str = "node"

    def __post_init__(self):
        if self.spacing <= 0 or self.radius <= 0:
            raise ValueError("radius and spacing must be positive")
        if self.offset not in ("node", "cell"):
            raise ValueError("offset is 'node' or 'cell'")

    @property
    def axis(self) -> np.ndarray:
        n = int(math.ceil(self.radius / self.spacing - 1e-9))
        if self.offset == "node":
            return np.arange(-n, n + 1) * self.spacing
        return (np.arange(-n - 1, n + 1) + 0.5) * self.spacing

    @property
    def shape(self) -> tuple:
        return (len(self.axis),) * self.d

    def points(self) -> np.ndarray:
        grids = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def sample(self, fn) -> np.ndarray:
        """Values of fn (batch -> (n,) or (n, k)) reshaped onto the lattice."""
        vals = np.asarray(fn(self.points()))
        return vals.reshape(*self.shape, *vals.shape[1:])

    def refine(self) -> "SampleGrid":
        return SampleGrid(self.radius, self.spacing / 2, self.d, self.offset)


def _ball_offsets(k: int, d: int) -> np.ndarray:
    rng_ = np.arange(-k, k + 1)
    grids = np.meshgrid(*([rng_] * d), indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1)
    return offs[np.einsum("ni,ni->n", offs, offs) <= k * k]


def _disc_kernel(k: int, d: int) -> np.ndarray:
    rng_ = np.arange(-k, k + 1)
    grids = np.meshgrid(*([rng_] * d), indexing="ij")
    sq = sum(g * g for g in grids)
    return (sq <= k * k).astype(float)


def _ball_average(a: np.ndarray, k: int) -> np.ndarray:
    d = a.ndim
    if d == 1:
        c = np.concatenate([[0.0], np.cumsum(a)])
        out = np.full_like(a, np.nan)
        n = len(a)
        if n > 2 * k:
            out[k : n - k] = (c[2 * k + 1 :] - c[: n - 2 * k]) / (2 * k + 1)
        return out
    ker = _disc_kernel(k, d)
    return fftconvolve(a, ker, mode="same") / ker.sum()


@dataclass
class MaximalField:
    R: float
    values: np.ndarray  # M_R f on the lattice, NaN off the interior
    interior: np.ndarray  # boolean mask
    grid: SampleGrid


def _magnitude(values: np.ndarray, grid: SampleGrid) -> np.ndarray:
    a = np.abs(np.asarray(values, dtype=float))
    if a.ndim == grid.d + 1:
        a = np.linalg.norm(values, axis=-1)
    elif a.ndim != grid.d:
        raise ValueError("values do not match the lattice")
    return a


def _interior_mask(grid: SampleGrid, margin: int) -> np.ndarray:
    n = grid.shape[0]
    ok1 = np.zeros(n, bool)
    ok1[margin : n - margin] = True
    mask = ok1
    for _ in range(grid.d - 1):
        mask = mask[..., None] & ok1
    return mask


def maximal_function(grid: SampleGrid, values: np.ndarray, R: float) -> MaximalField:
    """Discrete M_R |f|: sup over radii k*dx <= R of lattice ball averages.

    The point value itself enters as the r -> 0 limit.
    """
    if R <= 0:
        raise ValueError("R must be positive")
    K = int(math.floor(R / grid.spacing + 1e-9))
    if K < 1:
        raise ValueError("R is smaller than the lattice spacing")
    a = _magnitude(values, grid)
    if R > grid.radius - grid.spacing + 1e-12 or 2 * K >= a.shape[0]:
        raise ValueError(f"R = {R} is too large for a box of radius {grid.radius}")
    M = a.copy()
    for k in range(1, K + 1):
        np.fmax(M, _ball_average(a, k), out=M)
    interior = _interior_mask(grid, K)
    M = np.where(interior, M, np.nan)
    return MaximalField(R, M, interior, grid)


def maximal_lp_ratio(grid: SampleGrid, values: np.ndarray, R: float, p: float, r: float) -> float:
    """Lattice version of int_{B(r)} (M_R f)^p / int_{B(r+R)} |f|^p."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    if r + R > grid.radius + 1e-12:
        raise ValueError("box too small: need r + R <= box radius")
    mf = maximal_function(grid, values, R)
    a = _magnitude(values, grid)
    rad = np.linalg.norm(grid.points(), axis=1).reshape(grid.shape)
    inner = rad <= r + 1e-12
    outer = rad <= r + R + 1e-12
    if np.any(np.isnan(mf.values[inner])):
        raise ValueError("box too small: maximal function undefined on B(r)")
    num = np.sum(mf.values[inner] ** p)
    den = np.sum(a[outer] ** p)
    return float(num / den) if den > 0 else math.inf


@dataclass(frozen=True)
class RatioStats:
    max: float
    p99: float
    pairs: int
    zero_denominator: int  # zero denominator with nonzero numerator
    spacing: float


def gradient_magnitude(spec: Field, X: np.ndarray) -> np.ndarray:
    return np.linalg.norm(jacobian_array(spec, X), axis=(1, 2))


def lusin_lipschitz_ratio(spec: Field, grid: SampleGrid, R: float, n_pairs: int, seed: int = 0) -> RatioStats:
    """Ratios |f(x) - f(y)| / (|x - y| (M_R|grad f|(x) + M_R|grad f|(y))) over lattice pairs.

    Pairs are drawn uniformly: x from the lattice interior, y = x + o with o a
    nonzero lattice offset of length <= R.  Pairs touching a 1e-6
    neighbourhood of a declared singular set are discarded.
    """
    if grid.d != spec.d:
        raise ValueError("grid and field dimensions differ")
    pts = grid.points()
    far = spec.singular_distance(pts) > SINGULAR_EXCLUSION
    grad = np.zeros(len(pts))
    grad[far] = gradient_magnitude(spec, pts[far])
    vals = spec.value(pts)
    mf = maximal_function(grid, grad.reshape(grid.shape), R)
    M = mf.values.ravel()
    K = int(math.floor(R / grid.spacing + 1e-9))
    n = grid.shape[0]
    offs = _ball_offsets(K, grid.d)
    offs = offs[np.any(offs != 0, axis=1)]
    # x must keep both itself and x + o inside the interior (margin 2K)
    lo, hi = 2 * K, n - 2 * K
    if hi <= lo:
        raise ValueError("box too small for pairs at this R")
    u = rng.uniforms(seed, rng.PAIRS, 0, n_pairs * (grid.d + 1)).reshape(n_pairs, grid.d + 1)
    ix = lo + np.floor(u[:, : grid.d] * (hi - lo)).astype(int)
    o = offs[np.floor(u[:, grid.d] * len(offs)).astype(int)]
    iy = ix + o
    strides = np.array([n ** (grid.d - 1 - i) for i in range(grid.d)])
    fx, fy = ix @ strides, iy @ strides
    keep = far[fx] & far[fy]
    fx, fy = fx[keep], fy[keep]
    num = np.linalg.norm(vals[fx] - vals[fy], axis=1)
    dist = np.linalg.norm(pts[fx] - pts[fy], axis=1)
    den = dist * (M[fx] + M[fy])
    ratio = np.zeros(len(num))
    pos = den > 0
    ratio[pos] = num[pos] / den[pos]
    zero_bad = int(np.sum(~pos & (num > 0)))
    if len(ratio) == 0:
        return RatioStats(0.0, 0.0, 0, 0, grid.spacing)
    return RatioStats(float(ratio.max()), float(np.quantile(ratio, 0.99)), len(ratio), zero_bad, grid.spacing)


# ---------------------------------------------------------------------------
# coupled Monte Carlo


def _initials(seed: int, index: int, n: int, d: int) -> np.ndarray:
    return rng.gaussian_points(seed, index, n, d, stream=rng.INITIALS)


@dataclass
class _CoupledPart:
    log_term: np.ndarray  # per-path means of 1_{G_R} log(sup^2/sigma^2 + 1)
    gr: np.ndarray  # per-path fraction of initials in G_R
    moment: np.ndarray  # per-path means of sup^alpha


def _coupled_chunk(ensA, ensB, grid, n_initials, seed, sigma, R, alpha, span):
    idx = list(range(*span))
    dW = brownian_block(grid, ensA.m, seed, idx)
    X0 = np.vstack([_initials(seed, i, n_initials, ensA.d) for i in idx])
    dist, size = coupled_sup(ensA, ensB, X0, dW, grid.h, n_initials)
    P = len(idx)
    inside = size <= R
    log_term = np.where(inside, np.log1p((dist / sigma) ** 2), 0.0)
    return _CoupledPart(
        log_term.reshape(P, n_initials).mean(axis=1),
        inside.reshape(P, n_initials).mean(axis=1),
        (dist**alpha).reshape(P, n_initials).mean(axis=1),
    )


def coupled_statistics(ensA, ensB, grid: TimeGrid, sigma: float, R: float, n_paths: int, n_initials: int,
                       seed: int = 0, alpha: float = 2.0) -> _CoupledPart:
    if sigma <= 0 or R <= 0:
        raise ValueError("sigma and R must be positive")
    spans = chunks(n_paths, PATH_CHUNK)
    parts = chunk_map(lambda sp: _coupled_chunk(ensA, ensB, grid, n_initials, seed, sigma, R, alpha, sp), spans)
    return _CoupledPart(
        np.concatenate([p.log_term for p in parts]),
        np.concatenate([p.gr for p in parts]),
        np.concatenate([p.moment for p in parts]),
    )


def _field_gap(f: Field, g: Field, q: float) -> float:
    return lq_norm(lambda X: np.linalg.norm(f.value(X) - g.value(X), axis=1), q, f.d)


def _grad_norm(f: Field, q: float) -> float:
    return lq_norm(lambda X: gradient_magnitude(f, X), q, f.d)


@dataclass
class Bracket:
    grad_group: float  # ||grad A_0||_q + (sum ||grad A_i||_2q^2)^(1/2) + sum ||grad A_i||_2q^2
    sigma2_group: float  # sigma^-2 sum ||A_i - Ahat_i||_2q^2
    sigma1_group: float  # sigma^-1 (||A_0 - Ahat_0||_q + (sum ||A_i - Ahat_i||_2q^2)^(1/2))

    @property
    def total(self) -> float:
        return self.grad_group + self.sigma2_group + self.sigma1_group


def rhs_bracket(ensA: FieldEnsemble, ensB: FieldEnsemble, sigma: float, q: float) -> Bracket:
    g0 = _grad_norm(ensA.drift, q)
    gsum = sum(_grad_norm(f, 2 * q) ** 2 for f in ensA.diffusions)
    dsum = sum(_field_gap(f, g, 2 * q) ** 2 for f, g in zip(ensA.diffusions, ensB.diffusions))
    d0 = _field_gap(ensA.drift, ensB.drift, q)
    return Bracket(g0 + math.sqrt(gsum) + gsum, dsum / sigma**2, (d0 + math.sqrt(dsum)) / sigma)


@dataclass
class StabilityReport:
    sigma: float
    R: float
    T: float
    q: float
    lhs: float
    lhs_se: float
    gr_mass: float
    bracket: Bracket
    lambda_pT: Optional[float]
    fitted_constant: float
    sup_moment: float
    sup_moment_se: float
    alpha: float


def log_distance_functional(
    ensA: FieldEnsemble,
    ensB: FieldEnsemble,
    grid: TimeGrid,
    sigma: float,
    R: float,
    n_paths: int,
    n_initials: int,
    seed: int = 0,
    q: float = 2.0,
    alpha: float = 2.0,
    with_lambda: bool = False,
    lambda_paths: int = 256,
    lambda_initials: int = 16,
) -> StabilityReport:
    """Monte Carlo estimate of the G_R-restricted log functional and its bracket.

    ``fitted_constant`` is lhs / (Lambda * bracket), with Lambda = 1 unless
    ``with_lambda`` asks for the duality estimate of Lambda_{p,T}.
    """
    if (ensA.d, ensA.m) != (ensB.d, ensB.m):
        raise ValueError("coupled ensembles must share (d, m)")
    if q <= 1:
        raise ValueError("q must exceed 1")
    st = coupled_statistics(ensA, ensB, grid, sigma, R, n_paths, n_initials, seed, alpha)
    lhs, lhs_se = mean_se(st.log_term)
    gr, _ = mean_se(st.gr)
    mom, mom_se = mean_se(st.moment)
    br = rhs_bracket(ensA, ensB, sigma, q)
    lam = None
    if with_lambda:
        p = q / (q - 1.0)
        lam = max(
            lp_norm_via_duality(e, grid, p, lambda_paths, lambda_initials, seed).lambda_pT for e in (ensA, ensB)
        )
    scale = (lam if lam is not None else 1.0) * br.total
    fitted = lhs / scale if scale > 0 else (0.0 if lhs == 0 else math.inf)
    return StabilityReport(sigma, R, grid.T, q, lhs, lhs_se, gr, br, lam, fitted, mom, mom_se, alpha)


@dataclass
class CauchyDiagnostic:
    n: int
    k: int
    sigma_nk: float
    I_nk: float
    I_se: float
    alpha: float
    sup_moment: float
    sup_moment_se: float
    gr_mass: float


def sigma_nk(ensN: FieldEnsemble, ensK: FieldEnsemble, q: float) -> float:
    s = sum(_field_gap(f, g, 2 * q) ** 2 for f, g in zip(ensN.diffusions, ensK.diffusions))
    return _field_gap(ensN.drift, ensK.drift, q) + math.sqrt(s)


def cauchy_diagnostic(
    base: FieldEnsemble,
    n: int,
    k: int,
    alpha: float,
    grid: TimeGrid,
    R: float,
    n_paths: int,
    n_initials: int,
    seed: int = 0,
    q: float = 2.0,
    order: int = 32,
    tabulate: Optional[bool] = None,
) -> CauchyDiagnostic:
    """Compare the flows of A^(1/n) and A^(1/k) on common noise."""
    if n == k:
        raise ValueError("n and k must differ")
    if min(n, k) < 2:
        raise ValueError("n and k must be at least 2")
    tab = base.d == 1 if tabulate is None else tabulate
    ensN = mollify_ensemble(base, MollifyConfig(1.0 / n, order), tabulate=tab)
    ensK = mollify_ensemble(base, MollifyConfig(1.0 / k, order), tabulate=tab)
    s = sigma_nk(ensN, ensK, q)
    if not s > 0:
        raise ValueError("sigma_nk vanished; the two mollifications coincide")
    st = coupled_statistics(ensN, ensK, grid, s, R, n_paths, n_initials, seed, alpha)
    I, I_se = mean_se(st.log_term)
    mom, mom_se = mean_se(st.moment)
    gr, _ = mean_se(st.gr)
    return CauchyDiagnostic(n, k, s, I, I_se, alpha, mom, mom_se, gr)
