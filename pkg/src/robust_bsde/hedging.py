"""Superhedging a European claim when the market price of risk is only
known to lie in a box.

The asset follows ``dS = S (mu dt + sigma . dW)`` componentwise and the
numeraire is 1. Prices are the robust solution with ``f = 0`` and
``xi = H(S_T)``; the hedge is ``Zhat``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ambiguity import GeneratorSpec, IntervalBounds, box_min_dot
from .errors import InvalidArgument, InvalidBoundsError
from .robust import RobustProblem, RobustSolution, martingale_kernel, solve_robust
from .stochastic import (
    BrownianEnsemble,
    CoefficientField,
    ItoSpec,
    PolynomialBasis,
    TimeGrid,
    girsanov_density,
    make_time_grid,
    simulate_brownian,
    simulate_ito,
    standard_error,
)

PAYOFF_KINDS = ("call", "put", "digital", "forward")


@dataclass(frozen=True)
class Payoff:
    """European payoff on one asset: call, put, digital (``1{S > K}``) or forward (``S - K``)."""

    kind: str
    strike: float = 0.0
    asset: int = 0
    notional: float = 1.0

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise InvalidArgument(f"unknown payoff kind {self.kind!r}; expected one of {PAYOFF_KINDS}")

    def __call__(self, s_T: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s_T, dtype=float))[:, self.asset]
        K = self.strike
        if self.kind == "call":
            v = np.maximum(s - K, 0.0)
        elif self.kind == "put":
            v = np.maximum(K - s, 0.0)
        elif self.kind == "digital":
            v = (s > K).astype(float)
        else:
            v = s - K
        return self.notional * v


@dataclass(frozen=True)
class MarketSpec:
    """Multi-asset geometric Brownian market with constant ``mu`` and ``sigma``.

    ``sigma`` is ``(d, d)``; asset ``j`` has volatility row ``sigma[j]``.
    """

    s0: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    payoff: Payoff

    def __post_init__(self):
        s0 = np.atleast_1d(np.asarray(self.s0, dtype=float))
        d = s0.size
        mu = np.broadcast_to(np.atleast_1d(np.asarray(self.mu, dtype=float)), (d,)).copy()
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim < 2:
            sigma = np.diag(np.broadcast_to(np.atleast_1d(sigma), (d,)))
        if sigma.shape != (d, d):
            raise InvalidArgument(f"sigma must be ({d}, {d}), got {sigma.shape}")
        if np.any(s0 <= 0):
            raise InvalidArgument("initial prices must be positive")
        if abs(np.linalg.det(sigma)) < 1e-14:
            raise InvalidArgument("sigma must be invertible")
        if not 0 <= self.payoff.asset < d:
            raise InvalidArgument(f"payoff asset index {self.payoff.asset} out of range for d={d}")
        for name, v in (("s0", s0), ("mu", mu), ("sigma", sigma)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def d(self) -> int:
        return self.s0.size

    @property
    def theta(self) -> np.ndarray:
        """Market price of risk ``sigma^{-1} mu``."""
        return np.linalg.solve(self.sigma, self.mu)

    def volatility_field(self) -> CoefficientField:
        sig = self.sigma
        return CoefficientField(lambda t, x: x[:, :, None] * sig[None], (self.d, self.d), name="sigma")

    def ito_spec(self) -> ItoSpec:
        mu = self.mu
        drift = CoefficientField(lambda t, x: x * mu[None], (self.d,), name="mu")
        return ItoSpec(self.s0, drift, self.volatility_field())


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def black_scholes_call(s0: float, strike: float, sigma: float, T: float) -> float:
    """Zero-rate Black-Scholes call price."""
    if T <= 0 or sigma <= 0:
        return max(s0 - strike, 0.0)
    sd = sigma * math.sqrt(T)
    d1 = (math.log(s0 / strike) + 0.5 * sd * sd) / sd
    return s0 * _norm_cdf(d1) - strike * _norm_cdf(d1 - sd)


def black_scholes_digital(s0: float, strike: float, sigma: float, T: float) -> float:
    """Zero-rate price of ``1{S_T > K}``."""
    sd = sigma * math.sqrt(T)
    return _norm_cdf((math.log(s0 / strike) - 0.5 * sd * sd) / sd)


# --- generator forms ------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorForms:
    sup_form: float
    displayed_form: float

    @property
    def discrepancy(self) -> float:
        return self.sup_form - self.displayed_form


def robust_generator_hedging(z, h, g) -> GeneratorForms:
    """``sup_{theta in [h, g]} (-theta . z) = -h . z^+ + g . z^-`` next to the
    alternative form ``-(h . z^- + g . z^+)``.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    h = np.broadcast_to(np.atleast_1d(np.asarray(h, dtype=float)), z.shape)
    g = np.broadcast_to(np.atleast_1d(np.asarray(g, dtype=float)), z.shape)
    if np.any(h > g):
        raise InvalidBoundsError(f"h > g: h={h.tolist()}, g={g.tolist()}")
    zp, zm = np.maximum(z, 0.0), np.maximum(-z, 0.0)
    sup_form = -float(box_min_dot(h, g, z))
    displayed = -float(np.sum(h * zm + g * zp))
    return GeneratorForms(sup_form, displayed)


def discrepancy_report(Z: np.ndarray, h_cells: np.ndarray, g_cells: np.ndarray) -> dict:
    """Both generator forms over the solved ``Z`` cells; the solver uses the sup form."""
    zp, zm = np.maximum(Z, 0.0), np.maximum(-Z, 0.0)
    sup_form = np.sum(-h_cells * zp + g_cells * zm, axis=-1)
    displayed = -np.sum(h_cells * zm + g_cells * zp, axis=-1)
    diff = sup_form - displayed
    return {
        "used": "sup_form",
        "sup_form_mean": float(np.mean(sup_form)),
        "displayed_form_mean": float(np.mean(displayed)),
        "max_abs_difference": float(np.max(np.abs(diff))) if diff.size else 0.0,
        "fraction_cells_differing": float(np.mean(np.abs(diff) > 1e-12)) if diff.size else 0.0,
    }


# --- pricing ----------------------------------------------------------------------


@dataclass
class HedgeResult:
    price: float
    std_error: float
    strategy: np.ndarray  # phi = Zhat, (M, N, d)
    theta0: np.ndarray  # selected driver, (M, N, d)
    occupancy_h: float
    occupancy_g: float
    residual: np.ndarray  # (M,)
    payoff: np.ndarray  # (M,)
    discrepancy: dict
    solution: RobustSolution = field(repr=False)
    selector: Optional[dict] = None

    @property
    def residual_rms(self) -> float:
        return float(np.sqrt(np.mean(self.residual**2)))

    def summary(self) -> dict:
        out = {
            "price": self.price,
            "std_error": self.std_error,
            "occupancy_h": self.occupancy_h,
            "occupancy_g": self.occupancy_g,
            "residual_rms": self.residual_rms,
            "residual_max": float(np.max(np.abs(self.residual))),
            "payoff_std": float(np.std(self.payoff)),
            "discrepancy": self.discrepancy,
        }
        if self.solution.e_report is not None:
            out["e_martingale"] = self.solution.e_report.to_dict()
        if self.selector is not None:
            out["selector"] = {k: v for k, v in self.selector.items() if not isinstance(v, np.ndarray)}
        return out


def _check_finite_claim(H: np.ndarray, h_cells, g_cells, bm, grid):
    if not np.all(np.isfinite(H)):
        raise InvalidArgument("payoff is not finite on every path")
    for th in (h_cells, g_cells):
        dens = girsanov_density(martingale_kernel(th), bm, grid)
        if not np.isfinite(np.mean(dens.ratio(0) * H)):
            raise InvalidArgument("payoff expectation is not finite under a vertex measure")


def superhedge_price(market: MarketSpec, bounds: IntervalBounds, bm: BrownianEnsemble, grid: TimeGrid,
                     basis: Optional[PolynomialBasis] = None, verify: bool = True,
                     states: Optional[np.ndarray] = None, family_seed: int = 0) -> HedgeResult:
    """Robust superhedging price of ``market.payoff`` and its hedge.

    The asset is simulated under ``market.mu``; the hedge integrates against
    the worst-case driver ``dShat = diag(S) sigma (theta0 dt + dW)``.
    """
    if bounds.d != market.d:
        raise InvalidArgument(f"bounds dimension {bounds.d} != market dimension {market.d}")
    if states is None:
        states = simulate_ito(market.ito_spec(), bm, grid).states
    H = market.payoff(states[:, -1])
    problem = RobustProblem(GeneratorSpec.zero(), H, bounds, market.volatility_field(), grid, states)
    sol = solve_robust(problem, bm, basis, verify=verify, family_seed=family_seed)
    _check_finite_claim(H, sol.h_cells, sol.g_cells, bm, grid)
    price = sol.y0
    residual = H - price - sol.gains().sum(axis=1)
    occ_h = float(np.mean(sol.Z > 0))
    return HedgeResult(price, sol.std_error, sol.Zhat, sol.theta_hat, occ_h, 1.0 - occ_h, residual, H,
                       discrepancy_report(sol.Z, sol.h_cells, sol.g_cells), sol)


def single_measure_price(payoff_values: np.ndarray, theta, bm: BrownianEnsemble, grid: TimeGrid) -> tuple[float, float]:
    """``E^Q(H)`` for the martingale measure of a single driver ``theta``: mean and standard error."""
    dens = girsanov_density(martingale_kernel(theta), bm, grid)
    w = dens.ratio(0) * np.asarray(payoff_values, dtype=float)
    return float(np.mean(w)), standard_error(w)


@dataclass(frozen=True)
class ResidualStats:
    rms: float
    max_abs: float
    mean: float

    def to_dict(self) -> dict:
        return {"rms": self.rms, "max_abs": self.max_abs, "mean": self.mean}


def replication_error(result: HedgeResult, S_hat: Optional[np.ndarray] = None) -> ResidualStats:
    """Residual ``H - price - sum phi . dShat`` per path, summarised.

    ``S_hat`` defaults to the worst-case driver paths of the solution.
    """
    S = result.solution.S_hat if S_hat is None else np.asarray(S_hat, dtype=float)
    if S.shape[:2] != (result.strategy.shape[0], result.strategy.shape[1] + 1):
        raise InvalidArgument("driver paths and strategy do not share the ensemble")
    res = result.payoff - result.price - np.sum(result.strategy * np.diff(S, axis=1), axis=(1, 2))
    return ResidualStats(float(np.sqrt(np.mean(res**2))), float(np.max(np.abs(res))), float(np.mean(res)))


@dataclass(frozen=True)
class RefinementStudy:
    steps: list
    rms: list
    prices: list
    slack: float

    @property
    def decreasing(self) -> bool:
        """Each refinement keeps the RMS below ``(1 + slack)`` times the previous one."""
        return all(b <= (1.0 + self.slack) * a for a, b in zip(self.rms, self.rms[1:]))

    @property
    def strictly_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.rms, self.rms[1:]))

    def to_dict(self) -> dict:
        return {"steps": self.steps, "rms": self.rms, "prices": self.prices, "slack": self.slack,
                "decreasing": self.decreasing, "strictly_decreasing": self.strictly_decreasing}


def refinement_study(market: MarketSpec, bounds: IntervalBounds, T: float, M: int, seed: int,
                     steps: Sequence[int] = (25, 50, 100), basis: Optional[PolynomialBasis] = None,
                     slack: float = 0.2) -> RefinementStudy:
    """Replication residual RMS of the superhedge as the grid is refined."""
    rms, prices = [], []
    for N in steps:
        grid = make_time_grid(T, N)
        bm = simulate_brownian(grid, M, market.d, seed)
        res = superhedge_price(market, bounds, bm, grid, basis, verify=False)
        rms.append(replication_error(res).rms)
        prices.append(res.price)
    return RefinementStudy(list(steps), rms, prices, slack)


# --- volatility uncertainty ----------------------------------------------------------


def vol_theta_interval(mu: float, sigma1: float, sigma2: float) -> tuple[float, float]:
    """Interval of ``mu / sigma`` for ``sigma`` between the two volatilities."""
    if not (sigma1 > 0 and sigma2 > 0):
        raise InvalidArgument(f"volatilities must be positive, got {sigma1}, {sigma2}")
    a, b = mu / max(sigma1, sigma2), mu / min(sigma1, sigma2)
    return (a, b) if a <= b else (b, a)


def gbm_vol_uncertainty(mu: float, sigma1: float, sigma2: float, payoff: Payoff, s0: float,
                        bm: BrownianEnsemble, grid: TimeGrid, basis: Optional[PolynomialBasis] = None,
                        sigma_ref: Optional[float] = None, verify: bool = True) -> HedgeResult:
    """Single-asset GBM whose volatility is only known to lie between ``sigma1`` and ``sigma2``.

    The volatility interval is mapped to the interval of ``mu / sigma``.
    Paths are simulated with ``sigma_ref`` (default: the midpoint). The
    selector report picks, at every cell, the volatility in
    ``{sigma1, sigma2}`` minimising ``(mu / sigma) Z`` by direct comparison
    and checks it against the solved driver.
    """
    lo, hi = vol_theta_interval(mu, sigma1, sigma2)
    if bm.d != 1:
        raise InvalidArgument("volatility example is one-dimensional")
    ref = 0.5 * (sigma1 + sigma2) if sigma_ref is None else float(sigma_ref)
    if ref <= 0:
        raise InvalidArgument("reference volatility must be positive")
    market = MarketSpec([s0], [mu], [[ref]], payoff)
    bounds = IntervalBounds.constant([lo], [hi], bound=max(abs(lo), abs(hi)))
    states = simulate_ito(market.ito_spec(), bm, grid).states
    result = superhedge_price(market, bounds, bm, grid, basis, verify=verify, states=states)
    result.selector = vol_selector_report(mu, sigma1, sigma2, result, states[:, :-1, 0])
    result.selector["sigma_reference"] = ref
    return result


def vol_selector_report(mu: float, sigma1: float, sigma2: float, result: HedgeResult,
                        prices: np.ndarray) -> dict:
    """Per-cell volatility choice by two-point comparison of ``(mu / sigma) Z``.

    Ties (``Z = 0`` or ``mu = 0``) go to the volatility giving the upper
    end of the ``theta`` interval, matching the driver tie-break.
    ``prices`` are the asset values at the cell starts, ``(M, N)``.
    """
    Z = result.solution.Z[..., 0]
    sig = np.array([sigma1, sigma2], dtype=float)
    th = mu / sig
    vals = th[None, None, :] * Z[..., None]
    pick = np.argmin(vals, axis=-1)
    tie = vals[..., 0] == vals[..., 1]
    upper = int(np.argmax(th))
    pick = np.where(tie, upper, pick)
    sigma_sel = sig[pick]
    theta_sel = th[pick]
    agree = np.isclose(theta_sel, result.theta0[..., 0], rtol=0.0, atol=1e-12)
    strategy_vol = Z / (sigma_sel * prices)
    return {
        "sigma_selected": sigma_sel,
        "strategy_vol": strategy_vol,
        "fraction_sigma1": float(np.mean(pick == 0)),
        "fraction_sigma2": float(np.mean(pick == 1)),
        "agreement": float(np.mean(agree)),
        "theta_interval": list(vol_theta_interval(mu, sigma1, sigma2)),
    }
