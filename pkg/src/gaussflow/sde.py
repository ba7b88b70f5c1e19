"""Euler-Maruyama integration of dX = sum_j A_j(X) dw^j + A_0(X) dt.

Brownian increments come from the counter-based generator, keyed by
``(seed, path index)``, so every path can be regenerated in isolation.  The
batched integrator runs many initial points per path at once: points are laid
out path-major, ``group`` consecutive rows sharing one noise path.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .fields import Field, FieldEnsemble, as_points, density_terms, dual_drift

BLOWUP = 1e12


class BlowUpError(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"trajectory left the |x| <= 1e12 guard at step {step}{detail}")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k h on [0, T]; ``h`` may be pinned when shifting a grid."""

    T: float
    N: int
    h: float = dc_field(default=None)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("a time grid needs at least one step")
        if not self.T > 0:
            raise ValueError("horizon must be positive")
        if self.h is None:
            object.__setattr__(self, "h", self.T / self.N)

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.h
        t[-1] = self.T
        return t

    def index_of(self, t: float) -> int:
        k = int(round(t / self.h))
        if k < 0 or k > self.N or abs(k * self.h - t) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"time {t} is not on the grid (h = {self.h})")
        return k

    def sub(self, k0: int, K: int) -> "TimeGrid":
        """Grid of K steps starting at step k0, with the same step size."""
        if K < 1:
            raise ValueError("empty sub-grid")
        return TimeGrid(K * self.h, K, self.h)


@dataclass(frozen=True)
class BrownianPath:
    increments: np.ndarray  # (N, m)
    grid: TimeGrid
    seed: int = 0
    index: int = 0

    @property
    def m(self) -> int:
        return self.increments.shape[1]

    def w(self) -> np.ndarray:
        """Path values at the grid times, shape (N+1, m), w_0 = 0."""
        out = np.zeros((self.grid.N + 1, self.m))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out

    def shift(self, k0: int) -> "BrownianPath":
        """theta_{t_k0} w: increments after step k0."""
        if not 0 <= k0 < self.grid.N:
            raise ValueError("shift must leave at least one step")
        return BrownianPath(self.increments[k0:], self.grid.sub(k0, self.grid.N - k0), self.seed, self.index)

    def restrict(self, K: int) -> "BrownianPath":
        if not 1 <= K <= self.grid.N:
            raise ValueError("restriction length out of range")
        return BrownianPath(self.increments[:K], self.grid.sub(0, K), self.seed, self.index)

    def coarsen(self, factor: int) -> "BrownianPath":
        if self.grid.N % factor:
            raise ValueError("factor must divide the number of steps")
        inc = self.increments.reshape(self.grid.N // factor, factor, self.m).sum(axis=1)
        return BrownianPath(inc, TimeGrid(self.grid.T, self.grid.N // factor), self.seed, self.index)


@dataclass(frozen=True)
class DualPath:
    """Negated time reversal of a forward path over [0, t_K]."""

    forward: BrownianPath
    K: int

    @property
    def increments(self) -> np.ndarray:
        return -self.forward.increments[: self.K][::-1]

    def as_path(self) -> BrownianPath:
        return BrownianPath(self.increments, self.forward.grid.sub(0, self.K), self.forward.seed, self.forward.index)


def sample_brownian(grid: TimeGrid, m: int, seed: int, index: int) -> BrownianPath:
    z = rng.normals(seed, rng.INCREMENTS, index, grid.N * m).reshape(grid.N, m)
    return BrownianPath(np.sqrt(grid.h) * z, grid, seed, index)


def brownian_block(grid: TimeGrid, m: int, seed: int, indices: Sequence[int]) -> np.ndarray:
    """Increments of several paths, shape (N, P, m)."""
    out = np.empty((grid.N, len(indices), m))
    for p, idx in enumerate(indices):
        out[:, p, :] = sample_brownian(grid, m, seed, idx).increments
    return out


# ---------------------------------------------------------------------------
# core scheme


@dataclass
class RawRun:
    states: Optional[np.ndarray]  # (N+1, n, d) when recorded
    final: np.ndarray  # (n, d)
    ito: Optional[np.ndarray]  # (N+1, n) running sums when density is accumulated
    phi: Optional[np.ndarray]


def _guard(X: np.ndarray, step: int) -> None:
    sq = np.einsum("ni,ni->n", X, X)
    if not np.all(sq <= BLOWUP**2):
        bad = int(np.argmax(~(sq <= BLOWUP**2)))
        raise BlowUpError(step, f" (row {bad})")


def _noise(dW_k: np.ndarray, group: int) -> np.ndarray:
    return dW_k if group == 1 else np.repeat(dW_k, group, axis=0)


def euler(
    drift: Callable[[np.ndarray], np.ndarray],
    diffusions: Sequence[Field],
    X0: np.ndarray,
    dW: np.ndarray,
    h: float,
    *,
    group: int = 1,
    terms: Optional[Callable[[np.ndarray], tuple]] = None,
    record: bool = True,
) -> RawRun:
    """Explicit Euler-Maruyama with left-point density accumulation.

    ``dW`` has shape (N, P, m) and ``X0`` (P*group, d).  ``terms`` maps a batch
    of states to (delta(A_j) values (n, m), Phi values (n,)); when given the
    running sums sum_j delta(A_j) dw^j and Phi h are kept for every step.
    """
    N, P, m = dW.shape
    X = np.array(X0, dtype=float)
    n, d = X.shape
    if n != P * group:
        raise ValueError(f"{n} initial rows do not match {P} paths x {group} points")
    if m != len(diffusions):
        raise ValueError(f"path width {m} does not match {len(diffusions)} diffusion fields")
    states = np.empty((N + 1, n, d)) if record else None
    ito = phi = None
    if terms is not None:
        ito = np.zeros((N + 1, n))
        phi = np.zeros((N + 1, n))
    if record:
        states[0] = X
    for k in range(N):
        dw = _noise(dW[k], group)
        if terms is not None:
            deltas, ph = terms(X)
            ito[k + 1] = ito[k] + np.einsum("nj,nj->n", deltas, dw)
            phi[k + 1] = phi[k] + ph * h
        step = drift(X) * h
        for j, f in enumerate(diffusions):
            step = step + f.value(X) * dw[:, j : j + 1]
        X = X + step
        _guard(X, k + 1)
        if record:
            states[k + 1] = X
    return RawRun(states, X, ito, phi)


def density_callback(ens: FieldEnsemble):
    return lambda X: density_terms(ens, X)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N+1, d)
    x0: np.ndarray
    ito_sum: Optional[np.ndarray] = None  # (N+1,)
    phi_sum: Optional[np.ndarray] = None

    @property
    def has_density(self) -> bool:
        return self.ito_sum is not None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def table(self) -> np.ndarray:
        """Rows (t, x_1..x_d, ito_sum, phi_sum) for CSV export."""
        cols = [self.times[:, None], self.states]
        if self.has_density:
            cols += [self.ito_sum[:, None], self.phi_sum[:, None]]
        else:
            cols += [np.full((len(self.times), 2), np.nan)]
        return np.hstack(cols)


def _single(run: RawRun, grid: TimeGrid, x0: np.ndarray) -> Trajectory:
    ito = run.ito[:, 0] if run.ito is not None else None
    ph = run.phi[:, 0] if run.phi is not None else None
    return Trajectory(grid.times, run.states[:, 0, :], x0, ito, ph)


def _check_dims(ens: FieldEnsemble, path: BrownianPath):
    if ens.m != path.m:
        raise ValueError(f"ensemble has m = {ens.m}, path has width {path.m}")


def integrate_flow(ens: FieldEnsemble, x, path: BrownianPath, accumulate_density: bool = True) -> Trajectory:
    _check_dims(ens, path)
    X0, _ = as_points(x, ens.d)
    run = euler(
        ens.drift.value,
        ens.diffusions,
        X0,
        path.increments[:, None, :],
        path.grid.h,
        terms=density_callback(ens) if accumulate_density else None,
    )
    return _single(run, path.grid, X0[0].copy())


def integrate_coupled(ensA: FieldEnsemble, ensB: FieldEnsemble, x, path: BrownianPath, accumulate_density: bool = False):
    if (ensA.d, ensA.m) != (ensB.d, ensB.m):
        raise ValueError("coupled ensembles must share (d, m)")
    return (
        integrate_flow(ensA, x, path, accumulate_density),
        integrate_flow(ensB, x, path, accumulate_density),
    )


def _dual_drift_fn(ens: FieldEnsemble):
    return lambda X: -dual_drift(ens, X)


def integrate_dual(ens: FieldEnsemble, x, path: BrownianPath, t: float, accumulate_density: bool = False) -> Trajectory:
    """Y^t_s: Euler scheme for dY = sum A_j(Y) dw_hat^j - A_hat_0(Y) ds on [0, t]."""
    _check_dims(ens, path)
    K = path.grid.index_of(t)
    X0, _ = as_points(x, ens.d)
    if K == 0:
        return Trajectory(np.zeros(1), X0.copy(), X0[0].copy())
    dual = DualPath(path, K).as_path()
    run = euler(
        _dual_drift_fn(ens),
        ens.diffusions,
        X0,
        dual.increments[:, None, :],
        dual.grid.h,
        terms=density_callback(ens) if accumulate_density else None,
    )
    return _single(run, dual.grid, X0[0].copy())


def invert_batch(ens: FieldEnsemble, Y: np.ndarray, path: BrownianPath, K: int) -> np.ndarray:
    """Approximate X_{t_K}^{-1} at every row of Y for one fixed path."""
    if K == 0:
        return Y.copy()
    dual = DualPath(path, K).as_path()
    run = euler(_dual_drift_fn(ens), ens.diffusions, Y, dual.increments[:, None, :], dual.grid.h, group=len(Y), record=False)
    return run.final


def flow_composition_residual(ens: FieldEnsemble, x, path: BrownianPath, s: float, t: float) -> float:
    """|X_{s+t}(x) - X_t(theta_s w, X_s(x))| on grid times."""
    ks = path.grid.index_of(s)
    kt = path.grid.index_of(t)
    if ks + kt > path.grid.N:
        raise ValueError("s + t exceeds the horizon")
    x = np.asarray(x, dtype=float)
    if ks == 0 or kt == 0:
        return 0.0
    xs = integrate_flow(ens, x, path.restrict(ks), False).final
    direct = integrate_flow(ens, x, path.restrict(ks + kt), False).final
    composed = integrate_flow(ens, xs, path.shift(ks).restrict(kt), False).final
    return float(np.linalg.norm(direct - composed))


def coupled_sup(
    ensA: FieldEnsemble,
    ensB: FieldEnsemble,
    X0: np.ndarray,
    dW: np.ndarray,
    h: float,
    group: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Streaming sup_k |X_k - Xhat_k| and sup_k max(|X_k|, |Xhat_k|) per row."""
    if (ensA.d, ensA.m) != (ensB.d, ensB.m):
        raise ValueError("coupled ensembles must share (d, m)")
    X = np.array(X0, dtype=float)
    Y = X.copy()
    dist = np.zeros(len(X))
    size = np.linalg.norm(X, axis=1)
    for k in range(dW.shape[0]):
        dw = _noise(dW[k], group)
        sx = ensA.drift.value(X) * h
        sy = ensB.drift.value(Y) * h
        for j in range(ensA.m):
            sx = sx + ensA.diffusions[j].value(X) * dw[:, j : j + 1]
            sy = sy + ensB.diffusions[j].value(Y) * dw[:, j : j + 1]
        X = X + sx
        Y = Y + sy
        _guard(X, k + 1)
        _guard(Y, k + 1)
        np.maximum(dist, np.linalg.norm(X - Y, axis=1), out=dist)
        np.maximum(size, np.maximum(np.linalg.norm(X, axis=1), np.linalg.norm(Y, axis=1)), out=size)
    return dist, size


# ---------------------------------------------------------------------------
# strong-order study


@dataclass(frozen=True)
class StrongOrderReport:
    steps: np.ndarray
    errors: np.ndarray
    slope: float
    paths: int


def strong_order(
    ens: FieldEnsemble,
    x,
    T: float,
    levels: Sequence[int],
    *,
    reference: str | Callable[[np.ndarray, np.ndarray], np.ndarray] = "fine",
    ref_factor: int = 64,
    paths: int = 512,
    seed: int = 0,
    chunk: int = 64,
) -> StrongOrderReport:
    """Mean |X_T^h - X_T^ref| for h = T / 2^level, and its log-log slope.

    ``reference`` is ``"fine"`` (Euler on a grid ``ref_factor`` times finer
    than the finest level) or a callable ``(x0, fine increments (P, Nf, m))
    -> X_T`` giving an exact solution from the fine increments.
    """
    levels = sorted(levels)
    X0, _ = as_points(x, ens.d)
    finest = 2 ** levels[-1]
    Nf = finest * ref_factor
    fine_grid = TimeGrid(T, Nf)
    sums = np.zeros(len(levels))
    for start in range(0, paths, chunk):
        idx = list(range(start, min(start + chunk, paths)))
        dW = brownian_block(fine_grid, ens.m, seed, idx)  # (Nf, P, m)
        P = len(idx)
        Xs = np.repeat(X0, P, axis=0)
        if callable(reference):
            ref = reference(X0[0], np.transpose(dW, (1, 0, 2)))
        else:
            ref = euler(ens.drift.value, ens.diffusions, Xs, dW, fine_grid.h, record=False).final
        for i, lev in enumerate(levels):
            factor = Nf // 2**lev
            coarse = dW.reshape(2**lev, factor, P, ens.m).sum(axis=1)
            out = euler(ens.drift.value, ens.diffusions, Xs, coarse, T / 2**lev, record=False).final
            sums[i] += np.sum(np.linalg.norm(out - ref, axis=1))
    errors = sums / paths
    steps = T / 2.0 ** np.array(levels)
    slope = float(np.polyfit(np.log(steps), np.log(errors), 1)[0])
    return StrongOrderReport(steps, errors, slope, paths)
