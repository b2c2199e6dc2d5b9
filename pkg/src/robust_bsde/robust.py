"""BSDEs driven by a family of Ito processes.

The robust equation ``Y_t = xi + int f ds - int Zhat . dShat`` is solved
by reduction: solve the classical BSDE with the transformed generator
``f_hat = sup_theta (f - theta . z)``, pick the worst-case ``theta_hat``
cell by cell, and rebuild ``(Yhat, Zhat, Shat)`` on the same Brownian paths.

Measures.  For a driver with market price of risk ``theta`` the
martingale measure has density ``exp(-int theta dW - 1/2 int |theta|^2 dt)``,
i.e. :func:`girsanov_density` evaluated at ``-theta``.
:func:`sublinear_expectation` takes density kernels directly, while
:func:`verify_e_martingale` takes drivers and negates them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .ambiguity import (
    GeneratorSpec,
    IntervalBounds,
    check_lipschitz,
    transformed_generator,
    validate_bounds,
    zhat_from_z,
)
from .errors import InvalidArgument
from .solver import (
    BsdeProblem,
    BsdeSolution,
    cell_values,
    solve_bsde_lsmc,
    solve_bsde_picard,
)
from .stochastic import (
    BrownianEnsemble,
    CoefficientField,
    PolynomialBasis,
    Projector,
    TimeGrid,
    as_field,
    broadcast_theta,
    check_invertible,
    girsanov_density,
    standard_error,
)

REDUCTION_TOL = 1e-12


@dataclass
class RobustProblem:
    """``eq(f, xi, D)`` for the box family ``theta in [h, g]``.

    ``sigma`` is the common volatility of the drivers, evaluated along the
    simulated ``states``; the generator sees ``Zhat = Z sigma^{-1}``.
    """

    generator: GeneratorSpec
    terminal: Union[np.ndarray, Callable]
    bounds: IntervalBounds
    sigma: CoefficientField
    grid: TimeGrid
    states: np.ndarray
    features: Optional[np.ndarray] = None
    sigma_inv_bound: float = 1.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 2:
            self.states = self.states[..., None]
        d = self.states.shape[2]
        self.sigma = as_field(self.sigma, (d, d), "sigma")

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def classical(self) -> BsdeProblem:
        f_hat = transformed_generator(self.generator, self.bounds, self.sigma, self.sigma_inv_bound)
        return BsdeProblem(f_hat, self.terminal, self.grid, self.states, self.features)


def check_hypotheses(problem: RobustProblem, seed: int = 0) -> dict:
    """Validate the standing assumptions on the ensemble; raises on failure."""
    N = problem.grid.N
    bounds_report = validate_bounds(problem.bounds, ((problem.grid.times[i], problem.states[:, i]) for i in range(N)))
    if not bounds_report.clean:
        v = bounds_report.violations[0]
        raise InvalidArgument(f"ambiguity bounds invalid: {v}")
    rng = np.random.default_rng(seed)
    lip = check_lipschitz(problem.generator, problem.d, rng)
    if lip > problem.generator.K * (1 + 1e-9) + 1e-12:
        raise InvalidArgument(f"generator Lipschitz ratio {lip:.6g} exceeds declared K={problem.generator.K:.6g}")
    return {"bounds": bounds_report.to_dict(), "lipschitz_observed": lip, "lipschitz_declared": problem.generator.K}


@dataclass
class RobustSolution:
    classical: BsdeSolution
    theta_hat: np.ndarray  # (M, N, d)
    Zhat: np.ndarray  # (M, N, d)
    S_hat: np.ndarray  # (M, N + 1, d)
    sigma_cells: np.ndarray  # (M, N, d, d)
    h_cells: np.ndarray
    g_cells: np.ndarray
    bm: BrownianEnsemble = field(repr=False)
    features: np.ndarray = field(repr=False)
    hypotheses: dict = field(default_factory=dict)
    e_report: Optional["EMartingaleReport"] = None

    @property
    def grid(self) -> TimeGrid:
        return self.classical.grid

    @property
    def Y(self) -> np.ndarray:
        return self.classical.Y

    @property
    def Z(self) -> np.ndarray:
        return self.classical.Z

    @property
    def y0(self) -> float:
        return self.classical.y0

    @property
    def std_error(self) -> float:
        return self.classical.std_error

    def gains(self) -> np.ndarray:
        """Per-cell integrand increments ``Zhat_i . (Shat_{i+1} - Shat_i)``, shape ``(M, N)``."""
        return np.sum(self.Zhat * np.diff(self.S_hat, axis=1), axis=-1)

    def with_selector(self, theta: np.ndarray) -> "RobustSolution":
        """Same ``(Y, Z)`` with a different driver; used for negative controls."""
        theta = np.asarray(theta, dtype=float)
        Zhat, S_hat = reconstruct_triplet(self.Z, theta, self.sigma_cells, self.S_hat[:, 0], self.bm, self.grid)
        return RobustSolution(self.classical, theta, Zhat, S_hat, self.sigma_cells, self.h_cells, self.g_cells,
                              self.bm, self.features, self.hypotheses)


def reconstruct_triplet(Z: np.ndarray, theta_hat: np.ndarray, sigma_cells: np.ndarray, s0: np.ndarray,
                        bm: BrownianEnsemble, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """``Zhat = Z sigma^{-1}`` and ``dShat = sigma (theta_hat dt + dW)`` on the given paths."""
    Zhat = zhat_from_z(Z, sigma_cells)
    dS = np.einsum("mijk,mik->mij", sigma_cells, theta_hat * grid.dt[None, :, None] + bm.increments)
    S_hat = np.empty((bm.M, bm.N + 1, bm.d))
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), (bm.M, bm.d))
    S_hat[:, 0] = s0
    S_hat[:, 1:] = s0[:, None, :] + np.cumsum(dS, axis=1)
    return Zhat, S_hat


def solve_robust(problem: RobustProblem, bm: BrownianEnsemble, basis: Optional[PolynomialBasis] = None,
                 method: str = "lsmc", verify: bool = True, family_seed: int = 0,
                 checkpoints: Optional[Sequence[int]] = None, **picard_kwargs) -> RobustSolution:
    """Solve the robust equation through its classical reduction."""
    hyp = check_hypotheses(problem, family_seed)
    classical_problem = problem.classical()
    if method == "lsmc":
        sol = solve_bsde_lsmc(classical_problem, bm, basis)
    elif method == "picard":
        C = problem.bounds.bound or 0.0
        sol = solve_bsde_picard(classical_problem, bm, basis, theta_bound=C, **picard_kwargs)
    else:
        raise InvalidArgument(f"unknown method {method!r}")

    grid, states = problem.grid, problem.states
    N = grid.N
    sigma_cells = cell_values(problem.sigma, states, grid, (problem.d, problem.d))
    for i in range(N):
        check_invertible(np.ascontiguousarray(sigma_cells[:, i]), i)
    hg = [problem.bounds.evaluate(grid.times[i], states[:, i]) for i in range(N)]
    h_cells = np.stack([p[0] for p in hg], axis=1)
    g_cells = np.stack([p[1] for p in hg], axis=1)
    theta_hat = np.where(sol.Z > 0, h_cells, g_cells)
    Zhat, S_hat = reconstruct_triplet(sol.Z, theta_hat, sigma_cells, states[:, 0], bm, grid)

    back = np.einsum("mik,mikj->mij", Zhat, sigma_cells)
    err = np.max(np.abs(back - sol.Z) / np.maximum(1.0, np.abs(sol.Z))) if sol.Z.size else 0.0
    if err > REDUCTION_TOL:
        raise ArithmeticError(f"Zhat sigma != Z (max relative error {err:.3g})")
    hyp["reduction_max_error"] = float(err)

    features = classical_problem.features
    out = RobustSolution(sol, theta_hat, Zhat, S_hat, sigma_cells, h_cells, g_cells, bm, features, hyp)
    if verify:
        family = default_family(out, family_seed)
        out.e_report = verify_e_martingale(out, family, checkpoints, basis)
    return out


# --- sublinear expectation -----------------------------------------------


@dataclass
class SublinearEstimate:
    values: np.ndarray  # cellwise max over members, (M,)
    argmax: np.ndarray  # index of the maximising member, (M,)
    member_values: np.ndarray  # (K, M)
    member_means: np.ndarray  # (K,)
    member_std_errors: np.ndarray  # (K,)
    family: list


def sublinear_expectation(X: np.ndarray, t_index: int, family: Sequence, bm: BrownianEnsemble, grid: TimeGrid,
                          basis: Optional[PolynomialBasis] = None,
                          features: Optional[np.ndarray] = None) -> SublinearEstimate:
    """``max_k E^{Q^k}(X | F_t)`` over a finite family of density kernels.

    Member ``k`` has density ``Lambda^k`` from :func:`girsanov_density`
    with kernel ``family[k]`` (constant vector or per-cell array); the
    conditional expectation regresses ``(Lambda^k_T / Lambda^k_t) X`` on
    ``features`` (the state at ``t``; constant at ``t = 0``).
    """
    if len(family) == 0:
        raise InvalidArgument("family must not be empty")
    X = np.asarray(X, dtype=float)
    if features is None:
        features = bm.paths[:, t_index]
    proj = Projector(features, basis)
    vals, means, ses = [], [], []
    for theta in family:
        dens = girsanov_density(theta, bm, grid)
        weighted = dens.ratio(t_index) * X
        vals.append(proj.fitted(weighted))
        means.append(float(np.mean(weighted)))
        ses.append(standard_error(weighted))
    vals = np.array(vals)
    return SublinearEstimate(vals.max(axis=0), vals.argmax(axis=0), vals, np.array(means), np.array(ses), list(family))


def martingale_kernel(theta):
    """Density kernel of the martingale measure of a driver with market price of risk ``theta``."""
    return -np.asarray(theta, dtype=float)


def default_family(sol: RobustSolution, seed: int = 0, n_random: int = 4) -> list:
    """``[theta_hat, h, g, midpoint, random box points...]`` as per-cell driver arrays."""
    h, g = sol.h_cells, sol.g_cells
    if np.array_equal(h, g):
        return [sol.theta_hat]
    rng = np.random.default_rng(seed)
    members = [sol.theta_hat, h, g, 0.5 * (h + g)]
    for _ in range(n_random):
        u = rng.uniform(size=h.shape[-1])
        members.append(h + u * (g - h))
    return members


@dataclass
class EMartingaleReport:
    checkpoints: list
    members: int
    rows: list  # one dict per (checkpoint, member)
    equality_ok: bool
    supermartingale_ok: bool
    flagged_positive: bool

    @property
    def passed(self) -> bool:
        return self.equality_ok and self.supermartingale_ok

    def to_dict(self) -> dict:
        return {
            "checkpoints": self.checkpoints,
            "members": self.members,
            "equality_ok": self.equality_ok,
            "supermartingale_ok": self.supermartingale_ok,
            "flagged_positive": self.flagged_positive,
            "passed": self.passed,
            "rows": self.rows,
        }


def verify_e_martingale(sol: RobustSolution, family: Sequence, checkpoints: Optional[Sequence[int]] = None,
                        basis: Optional[PolynomialBasis] = None, n_se: float = 3.0) -> EMartingaleReport:
    """Check that ``int Zhat dShat`` is a martingale under the selected
    driver's measure and a supermartingale under every other member.

    ``family[0]`` must be the selected driver. For each checkpoint ``t_i``
    and member ``k`` the conditional expectation of ``int_{t_i}^T Zhat dShat``
    under ``Q^k`` is regressed on the features at ``t_i``. Reported per row:
    cross-sectional RMS of the fitted values with its noise scale, and the
    mean with its standard error. The noise scale is the RMS that pure noise
    with the observed residuals would leave after projection,
    ``sqrt(mean(leverage * residual^2))``; the weighted targets are far from
    homoscedastic, so ``sqrt(p / M) * std`` would understate it.
    """
    grid = sol.grid
    N, M = grid.N, sol.bm.M
    if checkpoints is None:
        # grid points nearest to a quarter, half and three quarters of the horizon
        checkpoints = sorted({int(np.floor(f * N + 0.5)) for f in (0.25, 0.5, 0.75)})
    gains = sol.gains()
    tails = np.zeros((M, N + 1))
    tails[:, :N] = np.cumsum(gains[:, ::-1], axis=1)[:, ::-1]
    densities = [girsanov_density(martingale_kernel(broadcast_theta(th, sol.bm)), sol.bm, grid) for th in family]
    rows = []
    equality_ok = supermart_ok = True
    flagged = False
    for i in checkpoints:
        proj = Projector(sol.features[:, i], basis)
        lev = proj.leverage()
        for k, dens in enumerate(densities):
            w = dens.ratio(i) * tails[:, i]
            fitted = proj.fitted(w)
            std = float(np.std(w))
            rms = float(np.sqrt(np.mean(fitted**2)))
            rms_scale = float(np.sqrt(np.mean(lev * (w - fitted) ** 2)))
            mean = float(np.mean(w))
            se = standard_error(w)
            row = {"checkpoint": int(i), "t": float(grid.times[i]), "member": k, "rms": rms,
                   "rms_noise": rms_scale, "mean": mean, "std_error": se,
                   "max_fitted": float(np.max(fitted)) if fitted.size else 0.0}
            if k == 0:
                row["equality"] = bool(rms <= n_se * rms_scale + 1e-300 or std == 0.0) and abs(mean) <= n_se * se + 1e-14
                equality_ok &= row["equality"]
            row["supermartingale"] = bool(mean <= n_se * se + 1e-14)
            supermart_ok &= row["supermartingale"]
            flagged |= not row["supermartingale"]
            rows.append(row)
    return EMartingaleReport([int(c) for c in checkpoints], len(family), rows, bool(equality_ok),
                             bool(supermart_ok), bool(flagged))


def anti_bang_bang(sol: RobustSolution) -> np.ndarray:
    """The opposite vertex of the selector; a deliberately wrong driver."""
    return np.where(sol.Z > 0, sol.g_cells, sol.h_cells)


# --- consequences -------------------------------------------------------------


@dataclass
class MartingaleRepresentation:
    x0: float
    spread: float
    Zhat: np.ndarray
    S_hat: np.ndarray
    residual: np.ndarray
    solution: RobustSolution

    @property
    def residual_rms(self) -> float:
        return float(np.sqrt(np.mean(self.residual**2)))


def martingale_representation(xi, bounds: IntervalBounds, sigma, states: np.ndarray, bm: BrownianEnsemble,
                              grid: TimeGrid, basis: Optional[PolynomialBasis] = None,
                              features: Optional[np.ndarray] = None) -> MartingaleRepresentation:
    """``xi = x0 + int Zhat . dShat`` with the robust solution for ``f = 0``."""
    problem = RobustProblem(GeneratorSpec.zero(), xi, bounds, sigma, grid, states, features)
    sol = solve_robust(problem, bm, basis, verify=False)
    y0 = sol.Y[:, 0]
    x0 = float(np.mean(y0))
    xi_vals = problem.classical().xi()
    residual = xi_vals - x0 - sol.gains().sum(axis=1)
    return MartingaleRepresentation(x0, float(np.std(y0)), sol.Zhat, sol.S_hat, residual, sol)


@dataclass
class ComparisonReport:
    y0_a: float
    y0_b: float
    tolerance: float
    t0_ok: bool
    violation_fraction: float
    terminal_violations: int
    generator_violations: int
    details: dict = field(default_factory=dict)

    @property
    def preconditions_ok(self) -> bool:
        return self.terminal_violations == 0 and self.generator_violations == 0

    def to_dict(self) -> dict:
        return {"y0_a": self.y0_a, "y0_b": self.y0_b, "tolerance": self.tolerance, "t0_ok": self.t0_ok,
                "violation_fraction": self.violation_fraction, "terminal_violations": self.terminal_violations,
                "generator_violations": self.generator_violations, **self.details}


def compare_solutions(pA: RobustProblem, pB: RobustProblem, bm: BrownianEnsemble,
                      basis: Optional[PolynomialBasis] = None, n_se: float = 3.0) -> ComparisonReport:
    """Comparison harness: ``xi_A >= xi_B`` and ``f_A >= f_B`` should give ``Y_A >= Y_B``.

    Preconditions are checked and reported, never raised. ``f_A - f_B`` is
    evaluated along solution B, as comparison requires.
    """
    if pA.grid.N != pB.grid.N or pA.states.shape != pB.states.shape:
        raise InvalidArgument("problems must share grid and ensemble")
    solA = solve_robust(pA, bm, basis, verify=False)
    solB = solve_robust(pB, bm, basis, verify=False)
    xiA = pA.classical().xi()
    xiB = pB.classical().xi()
    term_viol = int(np.sum(xiA < xiB))
    gen_viol = 0
    grid = pB.grid
    for i in range(grid.N):
        x = pB.states[:, i]
        zhat = solB.Zhat[:, i]
        y = solB.Y[:, i]
        diff = pA.generator(grid.times[i], x, y, zhat) - pB.generator(grid.times[i], x, y, zhat)
        gen_viol += int(np.sum(diff < -1e-12))
    se = standard_error(solA.classical.pathwise - solB.classical.pathwise)
    tol = n_se * se + 1e-10
    violation = solA.Y < solB.Y - tol
    return ComparisonReport(solA.y0, solB.y0, tol, bool(solA.y0 >= solB.y0 - tol), float(np.mean(violation)),
                            term_viol, gen_viol, {"std_error_diff": se})
