"""Classical BSDE solvers on a simulated ensemble.

``solve_bsde_lsmc`` runs one explicit backward regression sweep,
``solve_bsde_picard`` iterates sweeps with the driver frozen at the
previous iterate, and ``solve_linear_closed_form`` evaluates the adjoint
representation of a linear BSDE as an independent oracle.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .ambiguity import GeneratorSpec
from .errors import InvalidArgument, NumericBlowupError
from .stochastic import (
    BrownianEnsemble,
    CoefficientField,
    PolynomialBasis,
    Projector,
    TimeGrid,
    as_field,
    check_invertible,
    standard_error,
)

log = logging.getLogger(__name__)

DEFAULT_Y_CAP = 1e8


@dataclass
class BsdeProblem:
    """Driver, terminal value and the simulated states the driver depends on.

    ``terminal`` is either the per-path array ``xi`` or a callable mapping
    the full state history ``(M, N + 1, d)`` to it. ``features`` are the
    regression features (default: the states themselves).
    """

    generator: GeneratorSpec
    terminal: Union[np.ndarray, Callable]
    grid: TimeGrid
    states: np.ndarray
    features: Optional[np.ndarray] = None
    y_cap: float = DEFAULT_Y_CAP

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 2:
            self.states = self.states[..., None]
        if self.states.shape[1] != self.grid.N + 1:
            raise InvalidArgument("states and grid disagree on step count")
        if self.features is None:
            self.features = self.states
        elif np.ndim(self.features) == 2:
            self.features = np.asarray(self.features, dtype=float)[..., None]

    def xi(self) -> np.ndarray:
        xi = self.terminal(self.states) if callable(self.terminal) else self.terminal
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.states.shape[0],):
            raise InvalidArgument(f"terminal value has shape {xi.shape}, expected ({self.states.shape[0]},)")
        if not np.isfinite(np.mean(xi**2)):
            raise InvalidArgument("terminal value is not square integrable on the ensemble")
        return xi


@dataclass
class BsdeSolution:
    Y: np.ndarray  # (M, N + 1)
    Z: np.ndarray  # (M, N, d)
    grid: TimeGrid
    pathwise: np.ndarray  # xi + sum of driver increments, mean equals Y_0
    diagnostics: dict = field(default_factory=dict)

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def std_error(self) -> float:
        return standard_error(self.pathwise)

    def diagnostics_json(self) -> dict:
        d = dict(self.diagnostics)
        d.update(y0=self.y0, std_error=self.std_error)
        return d


def _check_dims(problem: BsdeProblem, bm: BrownianEnsemble):
    if bm.N != problem.grid.N:
        raise InvalidArgument("Brownian ensemble and grid disagree on step count")
    if bm.M != problem.states.shape[0]:
        raise InvalidArgument("Brownian ensemble and states disagree on path count")


def _projectors(problem, basis):
    return [Projector(problem.features[:, i], basis) for i in range(problem.grid.N)]


# Picard caches one projector per step when this many bytes suffice.
PROJECTOR_CACHE_BYTES = 512 * 2**20


def _sweep(problem, bm, basis, xi, driver_inputs=None, projectors=None):
    """One explicit backward sweep.

    With ``driver_inputs=None`` the driver is evaluated at the sweep's own
    ``(Y_{i+1}, Z_i)``; otherwise at the frozen ``(Y, Z)`` pair given.
    """
    grid = problem.grid
    M, N, d = bm.M, bm.N, bm.d
    dts = grid.dt
    Y = np.empty((M, N + 1))
    Z = np.empty((M, N, d))
    Y[:, N] = xi
    pathwise = xi.copy()
    residuals = np.empty(N)
    rank_flags = []
    for i in range(N - 1, -1, -1):
        t = grid.times[i]
        proj = projectors[i] if projectors is not None else Projector(problem.features[:, i], basis)
        if proj.rank_deficient:
            rank_flags.append(i)
        y_next = Y[:, i + 1]
        # centring by E_i[Y_{i+1}] leaves the conditional expectation unchanged
        centred = y_next - proj.fit(y_next).fitted
        Z[:, i] = proj.fit(centred[:, None] * bm.increments[:, i] / dts[i]).fitted
        if driver_inputs is None:
            drv = problem.generator(t, problem.states[:, i], y_next, Z[:, i])
        else:
            Yf, Zf = driver_inputs
            drv = problem.generator(t, problem.states[:, i], Yf[:, i + 1], Zf[:, i])
        reg = proj.fit(y_next + drv * dts[i])
        Y[:, i] = reg.fitted
        residuals[i] = reg.residual_rms
        pathwise += drv * dts[i]
        worst = np.max(np.abs(Y[:, i]))
        if not np.isfinite(worst) or worst > problem.y_cap:
            m = int(np.argmax(~np.isfinite(Y[:, i]) | (np.abs(Y[:, i]) > problem.y_cap)))
            raise NumericBlowupError(f"|Y| exceeded cap {problem.y_cap:g} at path {m}, step {i}", m, i)
    return Y, Z, pathwise, {"residual_rms": residuals.tolist(), "rank_deficient_steps": sorted(rank_flags)}


def solve_bsde_lsmc(problem: BsdeProblem, bm: BrownianEnsemble, basis: Optional[PolynomialBasis] = None) -> BsdeSolution:
    """Explicit least-squares Monte Carlo backward induction.

    ``Z_i = E_i[Y_{i+1} dW_i] / dt`` and
    ``Y_i = E_i[Y_{i+1} + f(t_i, Y_{i+1}, Z_i) dt]``, both by regression on
    the features at ``t_i``.
    """
    _check_dims(problem, bm)
    xi = problem.xi()
    Y, Z, pathwise, diag = _sweep(problem, bm, basis, xi)
    diag["scheme"] = "lsmc"
    return BsdeSolution(Y, Z, problem.grid, pathwise, diag)


def picard_beta(K: float, C: float, T: float, c: float = 1.0) -> float:
    """Weight ``16 (K + C)^2 (c^2 + 2)(T + 1)`` making the Picard map a 1/2-contraction."""
    return 16.0 * (K + C) ** 2 * (c**2 + 2.0) * (T + 1.0)


def picard_gamma_norm(solA: BsdeSolution, solB: BsdeSolution, beta: float) -> float:
    """Discrete weighted distance between two solutions on a shared grid.

    ``sqrt(mean_m max_i e^{beta t_i} dY^2 + mean_m sum_i e^{beta t_i} |dZ|^2 dt_i)``
    """
    if solA.Y.shape != solB.Y.shape or solA.Z.shape != solB.Z.shape:
        raise InvalidArgument("solutions have mismatched shapes")
    times = solA.grid.times
    w = np.exp(beta * times)
    dY = solA.Y - solB.Y
    dZ = solA.Z - solB.Z
    y_part = np.mean(np.max(w[None, :] * dY**2, axis=1))
    z_part = np.mean(np.sum(w[None, :-1] * np.sum(dZ**2, axis=2) * solA.grid.dt[None, :], axis=1))
    return float(np.sqrt(y_part + z_part))


def solve_bsde_picard(problem: BsdeProblem, bm: BrownianEnsemble, basis: Optional[PolynomialBasis] = None,
                      max_iter: int = 50, tol: float = 1e-6, beta: Optional[float] = None,
                      theta_bound: float = 0.0, c: float = 1.0) -> BsdeSolution:
    """Picard iteration starting from ``(Y, Z) = (0, 0)``.

    Each iterate solves the BSDE whose driver is frozen at the previous
    iterate. Stops once the weighted distance between successive iterates
    drops below ``tol``; otherwise returns the last iterate with
    ``diagnostics["converged"] = False``.
    """
    _check_dims(problem, bm)
    xi = problem.xi()
    grid = problem.grid
    if beta is None:
        beta = picard_beta(problem.generator.K, theta_bound, grid.T, c)
    M, N, d = bm.M, bm.N, bm.d
    prev = BsdeSolution(np.zeros((M, N + 1)), np.zeros((M, N, d)), grid, np.zeros(M))
    history = []
    converged = False
    p = (basis or PolynomialBasis()).size(problem.features.shape[2])
    projectors = _projectors(problem, basis) if M * p * N * 8 <= PROJECTOR_CACHE_BYTES else None
    for n in range(1, max_iter + 1):
        Y, Z, pathwise, diag = _sweep(problem, bm, basis, xi, driver_inputs=(prev.Y, prev.Z), projectors=projectors)
        cur = BsdeSolution(Y, Z, grid, pathwise, diag)
        history.append(picard_gamma_norm(cur, prev, beta))
        prev = cur
        if n > 1 and history[-1] < tol:
            converged = True
            break
    if not converged:
        log.warning("Picard iteration did not reach tol=%g after %d iterations", tol, max_iter)
    ratios = [history[k] / history[k - 1] if history[k - 1] > 0 else 0.0 for k in range(1, len(history))]
    prev.diagnostics.update(scheme="picard", beta=beta, gamma_history=history, gamma_ratios=ratios,
                            iterations=len(history), converged=converged, warning=not converged)
    return prev


# --- linear BSDE oracle ----------------------------------------------------


@dataclass(frozen=True)
class LinearSpec:
    """Driver ``phi + alpha y + zhat . gamma`` with terminal value ``terminal``."""

    alpha: CoefficientField
    gamma: CoefficientField
    phi: CoefficientField
    terminal: Union[np.ndarray, Callable]

    @classmethod
    def build(cls, alpha, gamma, phi, terminal, d: int = 1) -> "LinearSpec":
        return cls(as_field(alpha, (), "alpha"), as_field(gamma, (d,), "gamma"), as_field(phi, (), "phi"), terminal)

    def generator(self) -> GeneratorSpec:
        alpha, gamma, phi = self.alpha, self.gamma, self.phi

        def f(t, x, y, z):
            return phi(t, x) + alpha(t, x) * y + np.sum(z * gamma(t, x), axis=-1)

        K = max(alpha.bound or 0.0, 0.0) + max(gamma.bound or 0.0, 0.0)
        return GeneratorSpec(f, K, None, "linear")


@dataclass(frozen=True)
class AdjointPaths:
    log_values: np.ndarray  # (M, N + 1)

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)


def cell_values(source, states: np.ndarray, grid: TimeGrid, shape: tuple) -> np.ndarray:
    """Evaluate a field on every cell ``i < N`` or accept a precomputed array."""
    M, N = states.shape[0], grid.N
    if isinstance(source, CoefficientField) or callable(source):
        fld = as_field(source, shape)
        return np.stack([fld(grid.times[i], states[:, i]) for i in range(N)], axis=1)
    arr = np.asarray(source, dtype=float)
    return np.broadcast_to(arr, (M, N) + tuple(shape)) if arr.ndim <= len(shape) else arr


def adjoint_process(lin: LinearSpec, mu_hat, sigma_hat, states: np.ndarray, bm: BrownianEnsemble,
                    grid: TimeGrid) -> AdjointPaths:
    """Log-Euler solution of ``dG = G (alpha dt + sigma^{-1}(gamma - mu_hat) . dW)``, ``G_0 = 1``.

    ``mu_hat`` / ``sigma_hat`` may be fields of ``(t, x)`` or per-cell arrays.
    """
    d = bm.d
    M, N = bm.M, bm.N
    states = np.asarray(states, dtype=float).reshape(M, N + 1, -1)
    mu = cell_values(mu_hat, states, grid, (d,))
    sig = cell_values(sigma_hat, states, grid, (d, d))
    for i in range(N):
        check_invertible(np.ascontiguousarray(sig[:, i]), i)
    alpha = cell_values(lin.alpha, states, grid, ())
    gamma = cell_values(lin.gamma, states, grid, (d,))
    v = np.linalg.solve(sig, (gamma - mu)[..., None])[..., 0]
    inc = (alpha - 0.5 * np.sum(v**2, axis=-1)) * grid.dt[None, :] + np.sum(v * bm.increments, axis=-1)
    logG = np.zeros((M, N + 1))
    np.cumsum(inc, axis=1, out=logG[:, 1:])
    return AdjointPaths(logG)


@dataclass
class LinearClosedForm:
    Y: np.ndarray
    adjoint: AdjointPaths
    pathwise: np.ndarray  # xi G_N + sum phi G dt, mean equals Y_0

    @property
    def y0(self) -> float:
        return float(self.Y[0, 0])

    @property
    def std_error(self) -> float:
        return standard_error(self.pathwise)


def solve_linear_closed_form(lin: LinearSpec, mu_hat, sigma_hat, states: np.ndarray, bm: BrownianEnsemble,
                             grid: TimeGrid, basis: Optional[PolynomialBasis] = None,
                             features: Optional[np.ndarray] = None) -> LinearClosedForm:
    """``Y_i = G_i^{-1} E_i[xi G_N + sum_{j >= i} phi_j G_j dt_j]`` with the adjoint ``G``."""
    M, N = bm.M, bm.N
    states = np.asarray(states, dtype=float).reshape(M, N + 1, -1)
    feats = states if features is None else np.asarray(features, dtype=float).reshape(M, N + 1, -1)
    adj = adjoint_process(lin, mu_hat, sigma_hat, states, bm, grid)
    G = adj.values
    xi = lin.terminal(states) if callable(lin.terminal) else np.broadcast_to(np.asarray(lin.terminal, float), (M,))
    phi = cell_values(lin.phi, states, grid, ())
    running = phi * G[:, :-1] * grid.dt[None, :]
    # tail[:, i] = sum_{j >= i} running[:, j]
    tail = np.zeros((M, N + 1))
    tail[:, :N] = np.cumsum(running[:, ::-1], axis=1)[:, ::-1]
    target_T = xi * G[:, -1]
    Y = np.empty((M, N + 1))
    Y[:, N] = xi
    for i in range(N):
        reg = Projector(feats[:, i], basis).fit(target_T + tail[:, i])
        Y[:, i] = reg.fitted / G[:, i]
    return LinearClosedForm(Y, adj, target_T + tail[:, 0])
