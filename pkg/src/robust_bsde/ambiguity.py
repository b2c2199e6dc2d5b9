"""Box-shaped ambiguity sets for the market price of risk.

The family of drivers is every Ito process whose market price of risk
``theta = sigma^{-1} mu`` stays in the componentwise interval ``[h, g]``.
For such boxes the supremum of ``f - theta . z`` is attained at a vertex
chosen by the sign of each ``z_k``, which gives the transformed generator
and the worst-case selector in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import InvalidArgument, InvalidBoundsError
from .stochastic import CoefficientField, TimeGrid, as_field


@dataclass(frozen=True)
class IntervalBounds:
    h: CoefficientField
    g: CoefficientField
    bound: Optional[float] = None  # declared sup-norm bound for both fields

    @classmethod
    def constant(cls, h, g, bound=None) -> "IntervalBounds":
        h = np.atleast_1d(np.asarray(h, dtype=float))
        g = np.atleast_1d(np.asarray(g, dtype=float))
        if h.shape != g.shape:
            raise InvalidArgument("h and g must have the same shape")
        return cls(CoefficientField.constant(h, name="h"), CoefficientField.constant(g, name="g"), bound)

    @property
    def d(self) -> int:
        return self.h.shape[0]

    def evaluate(self, t: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(h, g)`` at ``(t, x)``, each of shape ``(M, d)``; raises on ``h > g``."""
        h = self.h(t, x)
        g = self.g(t, x)
        bad = h > g
        if np.any(bad):
            m, k = np.argwhere(bad)[0]
            raise InvalidBoundsError(
                f"h > g at t={t:.6g}, path {m}, component {k}: {h[m, k]:.6g} > {g[m, k]:.6g}"
            )
        return h, g


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver ``f(t, x, y, z)`` vectorised over paths.

    ``x`` is the state ``(M, d)``, ``y`` is ``(M,)`` and ``z`` is ``(M, d)``.
    ``K`` is the declared Lipschitz constant in ``(y, z)``.
    """

    f: Callable
    K: float = 0.0
    zero_norm: Optional[float] = None
    name: str = ""
    depends_on_z: bool = True

    def __call__(self, t, x, y, z) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.asarray(self.f(t, x, y, z), dtype=float), y.shape)

    @classmethod
    def zero(cls) -> "GeneratorSpec":
        return cls(lambda t, x, y, z: np.zeros(np.shape(y)), 0.0, 0.0, "zero", False)


def check_lipschitz(spec: GeneratorSpec, d: int, rng: np.random.Generator, n: int = 1000,
                    t: float = 0.0, scale: float = 10.0) -> float:
    """Spot-check the declared Lipschitz constant on random point pairs.

    Returns the largest observed ratio ``|df| / (|dy| + |dz|)``; callers
    compare it with ``spec.K``.
    """
    x = rng.normal(size=(n, d))
    y1, y2 = rng.uniform(-scale, scale, size=(2, n))
    z1, z2 = rng.uniform(-scale, scale, size=(2, n, d))
    df = np.abs(spec(t, x, y1, z1) - spec(t, x, y2, z2))
    dist = np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=1)
    return float(np.max(df / dist))


def _batch(x, y, z, d):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    M = z.shape[0]
    x = np.zeros((M, d)) if x is None else np.atleast_2d(np.asarray(x, dtype=float))
    y = np.broadcast_to(np.asarray(0.0 if y is None else y, dtype=float), (M,))
    return x, y, z, single


def box_min_dot(h: np.ndarray, g: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``min_{theta in [h, g]} theta . z = h . z^+ - g . z^-`` per row."""
    return np.sum(h * np.maximum(z, 0.0) - g * np.maximum(-z, 0.0), axis=-1)


def robust_generator(spec: GeneratorSpec, bounds: IntervalBounds, t, x, y, z, sigma=None):
    """``sup_{theta in [h, g]} f(t, y, z sigma^{-1}) - theta . z``.

    Closed form ``f + sum_k (-h_k z_k^+ + g_k z_k^-)``. With ``sigma=None``
    the driver sees ``z`` itself (identity volatility).
    """
    x, y, z, single = _batch(x, y, z, bounds.d)
    h, g = bounds.evaluate(t, x)
    zf = z if sigma is None else zhat_from_z(z, np.broadcast_to(sigma, z.shape + (z.shape[1],)))
    out = spec(t, x, y, zf) - box_min_dot(h, g, z)
    return float(out[0]) if single else out


def worst_case_theta(bounds: IntervalBounds, t, x, z) -> np.ndarray:
    """Bang-bang selector: ``h_k`` where ``z_k > 0``, ``g_k`` where ``z_k <= 0``."""
    x, _, z, single = _batch(x, None, z, bounds.d)
    h, g = bounds.evaluate(t, x)
    theta = np.where(z > 0, h, g)
    return theta[0] if single else theta


def zhat_from_z(z: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Solve ``zhat sigma = z`` (row-vector convention) cellwise."""
    d = z.shape[-1]
    if d == 1:
        return z / sigma[..., 0]
    if d == 2:
        # Cramer's rule; batched LAPACK calls dominate the sweep otherwise
        a, b = sigma[..., 0, 0], sigma[..., 0, 1]
        c, e = sigma[..., 1, 0], sigma[..., 1, 1]
        det = a * e - b * c
        return np.stack([(z[..., 0] * e - z[..., 1] * c) / det, (z[..., 1] * a - z[..., 0] * b) / det], axis=-1)
    return np.linalg.solve(np.swapaxes(sigma, -1, -2), z[..., None])[..., 0]


def transformed_generator(spec: GeneratorSpec, bounds: IntervalBounds,
                          sigma: Optional[CoefficientField] = None,
                          sigma_inv_bound: float = 1.0) -> GeneratorSpec:
    """Classical driver ``f_hat`` whose BSDE reduces the robust equation.

    The Lipschitz constant is the generator's (scaled by the inverse
    volatility bound when ``sigma`` is given) plus the theta bound.
    """
    C = bounds.bound if bounds.bound is not None else 0.0
    if not spec.depends_on_z:
        sigma = None

    def f_hat(t, x, y, z):
        h, g = bounds.evaluate(t, x)
        zf = z if sigma is None else zhat_from_z(z, sigma(t, x))
        return spec(t, x, y, zf) - box_min_dot(h, g, z)

    K = spec.K * (sigma_inv_bound if sigma is not None else 1.0) + C
    return GeneratorSpec(f_hat, K, spec.zero_norm, f"robust({spec.name})")


def selector_field(bounds: IntervalBounds) -> Callable:
    """Vectorised ``(t, x, z) -> theta_hat`` used by the solvers."""

    def select(t, x, z):
        h, g = bounds.evaluate(t, x)
        return np.where(z > 0, h, g)

    return select


def paste_thetas(theta1: np.ndarray, theta2: np.ndarray, tau, grid: TimeGrid) -> np.ndarray:
    """Use ``theta1`` on ``t < tau`` and ``theta2`` on ``t >= tau``, per path.

    ``tau`` holds one grid time per path (or a scalar); ``theta*`` have shape
    ``(M, N, d)``.
    """
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    if theta1.shape != theta2.shape or theta1.ndim != 3:
        raise InvalidArgument("theta processes must share shape (M, N, d)")
    M, N, _ = theta1.shape
    if N != grid.N:
        raise InvalidArgument("theta processes and grid disagree on step count")
    tau_idx = stopping_indices(tau, grid, M)
    before = np.arange(N)[None, :] < tau_idx[:, None]
    return np.where(before[..., None], theta1, theta2)


def stopping_indices(tau, grid: TimeGrid, M: int) -> np.ndarray:
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (M,))
    idx = np.searchsorted(grid.times, tau)
    idx = np.clip(idx, 0, grid.N)
    lo = np.clip(idx - 1, 0, grid.N)
    tol = 1e-12 * max(1.0, grid.T)
    near_hi = np.abs(grid.times[idx] - tau) <= tol
    near_lo = np.abs(grid.times[lo] - tau) <= tol
    if not np.all(near_hi | near_lo):
        m = int(np.flatnonzero(~(near_hi | near_lo))[0])
        raise InvalidArgument(f"stopping time {tau[m]!r} on path {m} is off the grid")
    return np.where(near_hi, idx, lo)


@dataclass
class BoundsReport:
    checked: int = 0
    violations: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"checked": self.checked, "clean": self.clean, "violations": self.violations[:50]}


def validate_bounds(bounds: IntervalBounds, points: Iterable[tuple[float, np.ndarray]]) -> BoundsReport:
    """Check ``h <= g`` and the declared bound at each ``(t, x)`` batch.

    ``points`` yields ``(t, x)`` with ``x`` of shape ``(M, d)``. Never raises
    for violations; they are listed with their location.
    """
    report = BoundsReport()
    for t, x in points:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = np.broadcast_to(np.asarray(bounds.h.fn(t, x), dtype=float), (x.shape[0], bounds.d))
        g = np.broadcast_to(np.asarray(bounds.g.fn(t, x), dtype=float), (x.shape[0], bounds.d))
        report.checked += x.shape[0]
        for m, k in np.argwhere(h > g)[:50]:
            report.violations.append({"kind": "h>g", "t": float(t), "path": int(m), "component": int(k),
                                      "h": float(h[m, k]), "g": float(g[m, k])})
        if bounds.bound is not None:
            over = (np.abs(h) > bounds.bound) | (np.abs(g) > bounds.bound)
            for m, k in np.argwhere(over)[:50]:
                report.violations.append({"kind": "bound", "t": float(t), "path": int(m), "component": int(k)})
    return report


def as_bounds(h, g, bound=None) -> IntervalBounds:
    if isinstance(h, CoefficientField) or isinstance(g, CoefficientField):
        d = (h.shape if isinstance(h, CoefficientField) else g.shape)
        return IntervalBounds(as_field(h, d, "h"), as_field(g, d, "g"), bound)
    return IntervalBounds.constant(h, g, bound)
