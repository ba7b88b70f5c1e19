"""Integration against the standard Gaussian measure gamma_d.

Two families of rules live here.  Tensor Gauss-Hermite rules (probabilists'
weights, normalized to sum to one) are used wherever the integrand is a
polynomial or a smooth function of polynomial growth, e.g. inside the OU
semigroup.  Integrals that may diverge, such as the exponential moments in the
density bounds, go through :func:`log_exp_integral`, which first probes the
tail of the log-integrand along a fan of rays and then applies a truncated,
origin-graded composite Gauss-Legendre rule in log space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from . import rng

OVERFLOW = 1e300
LOG_OVERFLOW = float(np.log(OVERFLOW))
MC_DIM = 3  # tensor rules up to this dimension, Monte Carlo beyond


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,), positive, sum to 1

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def d(self) -> int:
        return self.nodes.shape[1]

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Weighted sum over the leading axis of ``values``."""
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=64)
def gauss_hermite_rule(d: int, order: int = 32) -> QuadratureRule:
    x, w = hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrid = np.meshgrid(*([w] * d), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    return QuadratureRule(nodes, weights / weights.sum())


@lru_cache(maxsize=16)
def monte_carlo_rule(d: int, samples: int = 2**16, seed: int = 0) -> QuadratureRule:
    nodes = rng.gaussian_points(seed, 0, samples, d, stream=rng.MONTE_CARLO)
    return QuadratureRule(nodes, np.full(samples, 1.0 / samples))


def gaussian_rule(d: int, order: int = 32, samples: int = 2**16, seed: int = 0) -> QuadratureRule:
    if d <= MC_DIM:
        return gauss_hermite_rule(d, order)
    return monte_carlo_rule(d, samples, seed)


# ---------------------------------------------------------------------------
# possibly divergent integrals


@dataclass(frozen=True)
class GaussIntegral:
    """``log`` of an integral against gamma_d with a convergence verdict.

    ``status`` is ``finite``, ``divergent`` (growing tail or value above the
    1e300 overflow proxy) or ``unresolved`` (tail still above the drop
    threshold at the probe radius).
    """

    log_value: float
    status: str
    radius: float

    @property
    def finite(self) -> bool:
        return self.status != "divergent"

    @property
    def value(self) -> float:
        if self.status == "divergent":
            return np.inf
        return float(np.exp(self.log_value))


def _directions(d: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = np.linspace(0.0, 2 * np.pi, 32, endpoint=False)
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    dirs = [v for v in itertools.product((-1.0, 0.0, 1.0), repeat=d) if any(v)]
    dirs = np.array(dirs)
    if d > MC_DIM:
        extra = rng.gaussian_points(0, 1, 64, d, stream=rng.MONTE_CARLO)
        dirs = np.vstack([dirs[: 4 * d], extra])
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


_PROBE_RADII = np.concatenate([np.geomspace(1e-3, 0.1, 20), np.linspace(0.1, 80.0, 800)[1:]])


def probe_tail(g: Callable[[np.ndarray], np.ndarray], d: int, drop: float = 40.0):
    """Scan the log-density g(ru) - r^2/2 + (d-1) log r along rays.

    Returns ``(status, radius)`` where ``radius`` bounds the region carrying
    all but roughly e^-drop of the mass.
    """
    dirs = _directions(d)
    r = _PROBE_RADII
    pts = (dirs[:, None, :] * r[None, :, None]).reshape(-1, d)
    with np.errstate(all="ignore"):
        gv = np.asarray(g(pts), dtype=float).reshape(len(dirs), len(r))
        h = gv - 0.5 * r**2 + (d - 1) * np.log(r)
    if np.any(np.isnan(h)) or np.any(h == np.inf):
        return "divergent", r[-1]
    if np.all(h == -np.inf):
        return "finite", 10.0
    peak = np.max(h)
    if peak > LOG_OVERFLOW:
        return "divergent", r[-1]
    tail = r >= 0.9 * r[-1]
    for row in h:
        last = row[tail]
        fin = last[np.isfinite(last)]
        if fin.size >= 2 and fin[-1] >= fin[0]:
            return "divergent", r[-1]
    below = h < peak - drop
    radius = 1.0
    for row in below:
        if not row[-1]:
            return "unresolved", r[-1]
        above = np.nonzero(~row)[0]
        if above.size:
            radius = max(radius, r[min(above[-1] + 1, len(r) - 1)])
    return "finite", float(radius)


@lru_cache(maxsize=32)
def _graded_axis(radius: float, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and Lebesgue weights on [-radius, radius].

    Panels are uniform away from zero and refine geometrically towards zero so
    that integrable point or hyperplane singularities at the origin are
    resolved.
    """
    n_uniform, grading, order = {1: (48, 80, 10), 2: (24, 24, 8)}.get(d, (12, 6, 5))
    width = radius / n_uniform
    edges = list(np.linspace(width, radius, n_uniform))
    edges = [width * 2.0**-k for k in range(grading, 0, -1)] + edges
    edges = np.array([0.0] + edges)
    gx, gw = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    pos = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
    wpos = (half[:, None] * gw[None, :]).ravel()
    nodes = np.concatenate([-pos[::-1], pos])
    weights = np.concatenate([wpos[::-1], wpos])
    return nodes, weights


def _tensor_log_grid(radius: float, d: int):
    x, w = _graded_axis(round(radius, 6), d)
    logw1 = np.log(w) - 0.5 * x**2 - 0.5 * np.log(2 * np.pi)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    nodes = np.stack([gg.ravel() for gg in grids], axis=1)
    lw = np.meshgrid(*([logw1] * d), indexing="ij")
    logw = np.sum(np.stack([gg.ravel() for gg in lw], axis=1), axis=1)
    return nodes, logw


def log_exp_integral(
    g: Callable[[np.ndarray], np.ndarray],
    d: int,
    *,
    drop: float = 40.0,
    samples: int = 2**16,
    seed: int = 0,
    chunk: int = 1 << 16,
) -> GaussIntegral:
    """log of the integral of exp(g) against gamma_d.

    The result is normalized by the quadrature mass of the constant 1, so
    ``g == 0`` yields exactly zero.
    """
    status, radius = probe_tail(g, d, drop)
    if status == "divergent":
        return GaussIntegral(np.inf, status, radius)
    if d <= MC_DIM:
        nodes, logw = _tensor_log_grid(radius, d)
    else:
        nodes = rng.gaussian_points(seed, 0, samples, d, stream=rng.MONTE_CARLO)
        logw = np.full(samples, -np.log(samples))
    parts, mass = [], []
    with np.errstate(all="ignore"):
        for start in range(0, len(nodes), chunk):
            sl = slice(start, start + chunk)
            gv = np.asarray(g(nodes[sl]), dtype=float)
            if np.any(np.isnan(gv)) or np.any(gv == np.inf):
                return GaussIntegral(np.inf, "divergent", radius)
            parts.append(logsumexp(gv + logw[sl]))
            mass.append(logsumexp(logw[sl]))
    log_value = float(logsumexp(parts) - logsumexp(mass))
    if log_value > LOG_OVERFLOW:
        return GaussIntegral(np.inf, "divergent", radius)
    return GaussIntegral(log_value, status, radius)


def lq_norm(f_abs: Callable[[np.ndarray], np.ndarray], q: float, d: int, **kw) -> float:
    """(integral |f|^q dgamma_d)^(1/q) for a nonnegative scalar function."""
    if q <= 0:
        raise ValueError("q must be positive")

    def g(X):
        with np.errstate(divide="ignore"):
            return q * np.log(np.abs(f_abs(X)))

    res = log_exp_integral(g, d, **kw)
    if res.status == "divergent":
        return np.inf
    return float(np.exp(res.log_value / q))
