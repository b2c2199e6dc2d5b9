"""Numerical substrate: time grids, Brownian ensembles, Euler simulation,
Girsanov densities and regression-based conditional expectations.

Array conventions used throughout the package:

* increments ``dW``: shape ``(M, N, d)`` (path, step, component)
* states ``X``: shape ``(M, N + 1, d)``
* per-cell scalars (Y, densities): shape ``(M, N + 1)``
* coefficient fields are vectorised over paths: ``field(t, x)`` with
  ``x`` of shape ``(M, d)`` returns ``(M,)``, ``(M, d)`` or ``(M, d, d)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    BoundViolationError,
    InvalidArgument,
    NumericBlowupError,
    SingularVolatilityError,
)

# Paths are generated in fixed-size blocks, each block owning its own Philox
# stream. Changing this value changes every ensemble.
BLOCK_SIZE = 1024
DEFAULT_COND_CAP = 1e8


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise InvalidArgument("time grid needs at least two points")
        if t[0] != 0.0:
            raise InvalidArgument("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgument("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        """Step sizes, shape ``(N,)``."""
        return np.diff(self.times)

    @property
    def uniform(self) -> bool:
        dt = self.dt
        return bool(np.allclose(dt, dt[0], rtol=1e-12, atol=0.0))

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        i = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[i], t, rtol=0.0, atol=1e-12 * max(1.0, self.T)):
            raise InvalidArgument(f"time {t!r} is not on the grid")
        return i


def make_time_grid(T: float, N: int) -> TimeGrid:
    """Uniform grid ``t_i = i T / N``."""
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise InvalidArgument(f"step count must be a positive integer, got {N!r}")
    if not (np.isfinite(T) and T > 0):
        raise InvalidArgument(f"horizon must be positive, got {T!r}")
    times = np.arange(N + 1, dtype=float) * (float(T) / N)
    times[-1] = float(T)
    return TimeGrid(times)


@dataclass(frozen=True)
class BrownianEnsemble:
    increments: np.ndarray  # (M, N, d)
    seed: int
    block_size: int = BLOCK_SIZE

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    @property
    def N(self) -> int:
        return self.increments.shape[1]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def paths(self) -> np.ndarray:
        """Brownian paths ``W`` with ``W_0 = 0``, shape ``(M, N + 1, d)``."""
        W = np.zeros((self.M, self.N + 1, self.d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W

    def stream_offset(self, m: int) -> tuple[int, int]:
        """(stream id, offset in normals) of path ``m`` within its stream."""
        return m // self.block_size, (m % self.block_size) * self.N * self.d


def _block_generator(seed: int, block: int) -> np.random.Generator:
    bitgen = np.random.Philox(key=seed, counter=[0, 0, 0, block])
    return np.random.Generator(bitgen)


def simulate_brownian(grid: TimeGrid, M: int, d: int, seed: int) -> BrownianEnsemble:
    """Seeded Brownian increments on ``grid`` for ``M`` paths in ``d`` dimensions.

    Every block of ``BLOCK_SIZE`` paths draws from its own counter-based
    stream, so blocks can be generated in any order (or in parallel) and the
    first ``M`` paths of a larger ensemble coincide with a smaller one.
    """
    if not (isinstance(M, (int, np.integer)) and M >= 1):
        raise InvalidArgument(f"path count must be a positive integer, got {M!r}")
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise InvalidArgument(f"dimension must be a positive integer, got {d!r}")
    if not (isinstance(seed, (int, np.integer)) and 0 <= seed < 2**64):
        raise InvalidArgument(f"seed must be an integer in [0, 2**64), got {seed!r}")
    N = grid.N
    sqdt = np.sqrt(grid.dt)[None, :, None]
    out = np.empty((M, N, d))
    for block, start in enumerate(range(0, M, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, M)
        rng = _block_generator(int(seed), block)
        out[start:stop] = rng.standard_normal((stop - start, N, d))
    out *= sqdt
    out.setflags(write=False)
    return BrownianEnsemble(out, int(seed))


@dataclass(frozen=True)
class CoefficientField:
    """Vectorised coefficient ``(t, x) -> value`` with an optional sup-norm bound.

    ``shape`` is the value shape per path: ``()`` scalar, ``(d,)`` vector,
    ``(d, d)`` matrix.
    """

    fn: Callable[[float, np.ndarray], np.ndarray]
    shape: tuple = ()
    bound: Optional[float] = None
    name: str = ""

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        M = x.shape[0]
        val = np.asarray(self.fn(t, x), dtype=float)
        val = np.broadcast_to(val, (M,) + tuple(self.shape))
        if self.bound is not None:
            worst = float(np.max(np.abs(val))) if val.size else 0.0
            if worst > self.bound * (1 + 1e-12):
                raise BoundViolationError(
                    f"{self.name or 'coefficient'} reached {worst:.6g} at t={t:.6g}, "
                    f"declared bound {self.bound:.6g}"
                )
        return val

    @classmethod
    def constant(cls, value, bound=None, name="") -> "CoefficientField":
        v = np.array(value, dtype=float)
        v.setflags(write=False)
        return cls(lambda t, x: v, v.shape, bound, name)

    @classmethod
    def affine(cls, intercept, slope, bound=None, name="") -> "CoefficientField":
        """Componentwise ``a + b * x`` (vector valued, one entry per state coordinate)."""
        a = np.array(intercept, dtype=float)
        b = np.array(slope, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise InvalidArgument("affine field needs matching 1-d intercept and slope")
        return cls(lambda t, x: a + b * x, a.shape, bound, name)


def as_field(value, shape=None, name="") -> CoefficientField:
    if isinstance(value, CoefficientField):
        return value
    if callable(value):
        if shape is None:
            raise InvalidArgument("shape required when wrapping a callable")
        return CoefficientField(value, tuple(shape), None, name)
    return CoefficientField.constant(value, name=name)


def check_invertible(sig: np.ndarray, step: int, cap: float = DEFAULT_COND_CAP) -> None:
    """Raise SingularVolatilityError if any ``sig[m]`` has condition number >= cap."""
    d = sig.shape[-1]
    if d == 1:
        bad = ~(np.abs(sig[:, 0, 0]) > 0) | ~np.isfinite(sig[:, 0, 0])
    else:
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(sig)
        bad = ~(cond < cap)
    if np.any(bad):
        m = int(np.flatnonzero(bad)[0])
        raise SingularVolatilityError(
            f"volatility matrix singular or ill-conditioned at path {m}, step {step}",
            path=m,
            step=step,
        )


@dataclass(frozen=True)
class ItoSpec:
    """``dX = mu(t, X) dt + sigma(t, X) dW`` started at ``x0``."""

    x0: np.ndarray
    mu: CoefficientField
    sigma: CoefficientField
    theta_bound: Optional[float] = None
    cond_cap: float = DEFAULT_COND_CAP

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        d = x0.size
        object.__setattr__(self, "mu", as_field(self.mu, (d,), "mu"))
        object.__setattr__(self, "sigma", as_field(self.sigma, (d, d), "sigma"))

    @property
    def d(self) -> int:
        return self.x0.size


@dataclass(frozen=True)
class PathEnsemble:
    states: np.ndarray  # (M, N + 1, d)
    spec: Optional[ItoSpec] = None
    bm: Optional[BrownianEnsemble] = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]


def simulate_ito(spec: ItoSpec, bm: BrownianEnsemble, grid: TimeGrid) -> PathEnsemble:
    """Euler-Maruyama: ``X_{i+1} = X_i + mu dt + sigma dW`` with fixed per-path order."""
    if spec.d != bm.d:
        raise InvalidArgument(f"spec dimension {spec.d} != Brownian dimension {bm.d}")
    if bm.N != grid.N:
        raise InvalidArgument("Brownian ensemble and grid disagree on step count")
    M, N, d = bm.M, bm.N, bm.d
    X = np.empty((M, N + 1, d))
    X[:, 0] = spec.x0
    dts = grid.dt
    for i in range(N):
        t = grid.times[i]
        x = X[:, i]
        mu = spec.mu(t, x)
        sig = spec.sigma(t, x)
        check_invertible(sig, i, spec.cond_cap)
        if spec.theta_bound is not None:
            theta = np.linalg.solve(sig, mu[..., None])[..., 0]
            if np.max(np.abs(theta)) > spec.theta_bound * (1 + 1e-12):
                raise BoundViolationError(f"market price of risk exceeds bound at step {i}")
        X[:, i + 1] = x + (mu * dts[i] + np.einsum("mjk,mk->mj", sig, bm.increments[:, i]))
        finite = np.isfinite(X[:, i + 1]).all(axis=1)
        if not finite.all():
            m = int(np.flatnonzero(~finite)[0])
            raise NumericBlowupError(f"non-finite state at path {m}, step {i + 1}", m, i + 1)
    return PathEnsemble(X, spec, bm)


@dataclass(frozen=True)
class DensityPaths:
    log_density: np.ndarray  # (M, N + 1)

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_density)

    def ratio(self, i: int) -> np.ndarray:
        """``Lambda_N / Lambda_i`` per path."""
        return np.exp(self.log_density[:, -1] - self.log_density[:, i])


def broadcast_theta(theta, bm: BrownianEnsemble) -> np.ndarray:
    """Expand a constant vector / scalar to the per-cell shape ``(M, N, d)``."""
    th = np.asarray(theta, dtype=float)
    if th.ndim <= 1:
        th = np.broadcast_to(th.reshape(-1)[None, None, :] if th.ndim else th, (bm.M, bm.N, bm.d))
    if th.shape != (bm.M, bm.N, bm.d):
        raise InvalidArgument(f"theta has shape {th.shape}, expected {(bm.M, bm.N, bm.d)}")
    return th


def girsanov_density(theta, bm: BrownianEnsemble, grid: TimeGrid, bound: Optional[float] = None) -> DensityPaths:
    """``Lambda_i = exp(sum_{j<i} theta_j . dW_j - |theta_j|^2 dt_j / 2)``, ``Lambda_0 = 1``."""
    th = broadcast_theta(theta, bm)
    if bound is not None:
        worst = float(np.max(np.linalg.norm(th, axis=-1)))
        if worst > bound * (1 + 1e-12):
            raise BoundViolationError(f"|theta| reached {worst:.6g}, declared bound {bound:.6g}")
    inc = np.einsum("mik,mik->mi", th, bm.increments) - 0.5 * np.einsum("mik,mik->mi", th, th) * grid.dt[None, :]
    logd = np.zeros((bm.M, bm.N + 1))
    np.cumsum(inc, axis=1, out=logd[:, 1:])
    return DensityPaths(logd)


# --- regression -----------------------------------------------------------


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomials of total degree <= ``degree`` in standardised features."""

    degree: int = 3

    def exponents(self, k: int) -> list[tuple[int, ...]]:
        out = []
        for deg in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(k), deg):
                out.append(tuple(combo))
        return out

    def size(self, k: int) -> int:
        return len(self.exponents(k))

    def design(self, features: np.ndarray) -> np.ndarray:
        F = np.asarray(features, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        mean = F.mean(axis=0)
        scale = F.std(axis=0)
        scale[scale == 0] = 1.0
        Fs = (F - mean) / scale
        cols = []
        for combo in self.exponents(F.shape[1]):
            col = np.ones(F.shape[0])
            for j in combo:
                col = col * Fs[:, j]
            cols.append(col)
        return np.column_stack(cols)


@dataclass(frozen=True)
class BinnedBasis:
    """Indicators of quantile cells (tensor product over coordinates).

    Projection onto this span is a cellwise average, which preserves order
    between targets; useful where polynomial misfit near payoff kinks
    would create spurious crossings.
    """

    bins: int = 32

    def size(self, k: int) -> int:
        return self.bins**k

    def design(self, features: np.ndarray) -> np.ndarray:
        F = np.asarray(features, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        M, k = F.shape
        cell = np.zeros(M, dtype=np.int64)
        qs = np.linspace(0.0, 1.0, self.bins + 1)[1:-1]
        for j in range(k):
            edges = np.quantile(F[:, j], qs)
            cell = cell * self.bins + np.searchsorted(edges, F[:, j], side="right")
        _, idx = np.unique(cell, return_inverse=True)
        A = np.zeros((M, int(idx.max()) + 1))
        A[np.arange(M), idx] = 1.0
        return A


@dataclass
class Regression:
    fitted: np.ndarray
    coefficients: Optional[np.ndarray]
    residual_rms: float | np.ndarray
    rank: int
    rank_deficient: bool


class Projector:
    """Least-squares projection onto the basis span at one time step.

    Built once per step and reused for every target (Y and Z targets share
    the design matrix).
    """

    def __init__(self, features: np.ndarray, basis: Optional[PolynomialBasis] = None):
        basis = basis or PolynomialBasis()
        self.A = basis.design(features)
        self._Q = self._orthonormalise(self.A)
        self.rank_deficient = self._Q is None
        if self.rank_deficient:
            self._pinv = np.linalg.pinv(self.A)
            self.rank = int(np.linalg.matrix_rank(self.A))
        else:
            self.rank = self.A.shape[1]

    @staticmethod
    def _orthonormalise(A: np.ndarray) -> Optional[np.ndarray]:
        """Two-pass Cholesky QR; ``None`` when the design is (numerically) rank deficient."""
        Q = A
        for _ in range(2):
            G = Q.T @ Q
            try:
                R = np.linalg.cholesky(G).T
            except np.linalg.LinAlgError:
                return None
            diag = np.abs(np.diag(R))
            if diag.min() <= 1e-7 * diag.max():
                return None
            Q = Q @ np.linalg.inv(R)
        return Q

    def leverage(self) -> np.ndarray:
        """Diagonal of the hat matrix, one entry per path."""
        if self.rank_deficient:
            return np.sum(self.A * self._pinv.T, axis=1)
        return np.sum(self._Q**2, axis=1)

    def coefficients(self, y: np.ndarray) -> np.ndarray:
        if self.rank_deficient:
            return self._pinv @ y
        return np.linalg.lstsq(self.A, self.fitted(y), rcond=None)[0]

    def fitted(self, y: np.ndarray) -> np.ndarray:
        if self.rank_deficient:
            return self.A @ (self._pinv @ y)
        return self._Q @ (self._Q.T @ y)

    def fit(self, y: np.ndarray, with_coefficients: bool = False) -> Regression:
        y = np.asarray(y, dtype=float)
        fitted = self.fitted(y)
        coef = self.coefficients(y) if with_coefficients else None
        resid = y - fitted
        rms = np.sqrt(np.mean(resid**2, axis=0))
        return Regression(fitted, coef, rms if rms.ndim else float(rms), self.rank, self.rank_deficient)


def conditional_expectation(features: np.ndarray, targets: np.ndarray, basis: Optional[PolynomialBasis] = None) -> Regression:
    """Regression estimate of ``E[target | features]`` evaluated on every path."""
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.shape[0] != targets.shape[0]:
        raise InvalidArgument("features and targets disagree on path count")
    return Projector(features, basis).fit(targets, with_coefficients=True)


def standard_error(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.std(v, ddof=1) / np.sqrt(v.shape[0])) if v.shape[0] > 1 else 0.0


def grid_times_to_indices(grid: TimeGrid, times: Sequence[float]) -> np.ndarray:
    return np.array([grid.index_of(t) for t in np.ravel(times)], dtype=int)
