import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_bsde.ambiguity import IntervalBounds
from robust_bsde.errors import InvalidArgument, InvalidBoundsError
from robust_bsde.hedging import (
    MarketSpec,
    Payoff,
    black_scholes_call,
    black_scholes_digital,
    gbm_vol_uncertainty,
    refinement_study,
    replication_error,
    robust_generator_hedging,
    single_measure_price,
    superhedge_price,
    vol_theta_interval,
)
from robust_bsde.stochastic import make_time_grid, simulate_brownian, simulate_ito


MU, VOL = 0.04, 0.2
THETA = MU / VOL


@pytest.fixture(scope="module")
def grid():
    return make_time_grid(1.0, 25)


@pytest.fixture(scope="module")
def bm(grid):
    return simulate_brownian(grid, 20_000, 1, 51)


def market(kind="call", strike=100.0):
    return MarketSpec([100.0], [MU], [[VOL]], Payoff(kind, strike))


@pytest.fixture(scope="module")
def robust_call(bm, grid):
    return superhedge_price(market(), IntervalBounds.constant([0.1], [0.3], bound=0.3), bm, grid)


# --- generator forms -------------------------------------------------------------


def grid_sup(z, h, g, n=1001):
    theta = np.linspace(h, g, n)
    return float(np.max(-theta * z))


def test_forms_vanish_at_zero():
    f = robust_generator_hedging(0.0, 0.1, 0.5)
    assert f.sup_form == 0.0 and f.displayed_form == 0.0


def test_forms_positive_z():
    f = robust_generator_hedging(1.0, 0.1, 0.5)
    assert f.sup_form == pytest.approx(-0.1, abs=1e-15)
    assert f.displayed_form == pytest.approx(-0.5, abs=1e-15)
    assert abs(f.sup_form - grid_sup(1.0, 0.1, 0.5)) <= 1e-12


def test_forms_negative_z():
    f = robust_generator_hedging(-1.0, 0.1, 0.5)
    assert f.sup_form == pytest.approx(0.5, abs=1e-15)
    assert abs(f.sup_form - grid_sup(-1.0, 0.1, 0.5)) <= 1e-12


@given(st.floats(-5, 5), st.floats(-1, 1), st.floats(0, 1))
def test_sup_form_matches_grid(z, h, width):
    assert abs(robust_generator_hedging(z, h, h + width).sup_form - grid_sup(z, h, h + width)) <= 1e-12


def test_forms_reject_reversed_bounds():
    with pytest.raises(InvalidBoundsError):
        robust_generator_hedging(1.0, 0.5, 0.1)


# --- closed forms ----------------------------------------------------------------


def test_black_scholes_reference_value():
    assert black_scholes_call(100, 100, 0.2, 1.0) == pytest.approx(7.9656, abs=5e-5)


def test_black_scholes_parity_with_digital():
    # d/dK of the call is minus the digital
    eps = 1e-4
    slope = (black_scholes_call(100, 100 + eps, 0.2, 1) - black_scholes_call(100, 100 - eps, 0.2, 1)) / (2 * eps)
    assert slope == pytest.approx(-black_scholes_digital(100, 100, 0.2, 1), abs=1e-7)


# --- pricing ---------------------------------------------------------------------


def test_market_validation():
    with pytest.raises(InvalidArgument):
        MarketSpec([-1.0], [0.0], [[0.2]], Payoff("call", 1.0))
    with pytest.raises(InvalidArgument):
        MarketSpec([1.0], [0.0], [[0.0]], Payoff("call", 1.0))
    with pytest.raises(InvalidArgument):
        Payoff("barrier", 1.0)


def test_black_scholes_collapse(bm, grid):
    res = superhedge_price(market(), IntervalBounds.constant([THETA], [THETA]), bm, grid)
    ref = black_scholes_call(100, 100, VOL, 1.0)
    assert abs(res.price - ref) <= max(0.01 * ref, 3 * res.std_error)
    assert res.solution.e_report.passed


def test_constant_claim_needs_no_hedge(bm, grid):
    res = superhedge_price(market("forward", 0.0), IntervalBounds.constant([0.1], [0.3]), bm, grid,
                           states=np.full((bm.M, grid.N + 1, 1), 100.0))
    assert res.price == pytest.approx(100.0, abs=1e-9)
    assert np.max(np.abs(res.strategy)) <= 1e-8
    stats = replication_error(res)
    assert stats.rms <= 1e-8 and stats.max_abs <= 1e-8


def test_robust_price_dominates_members(robust_call, bm, grid):
    for theta in (0.1, 0.15, 0.2, 0.3):
        price, se = single_measure_price(robust_call.payoff, theta, bm, grid)
        assert price <= robust_call.price + 3 * robust_call.std_error


def test_wider_box_costs_more(bm, grid):
    prices = []
    for h, g in ((0.2, 0.2), (0.1, 0.3), (0.0, 0.4)):
        prices.append(superhedge_price(market(), IntervalBounds.constant([h], [g]), bm, grid, verify=False))
    for a, b in zip(prices, prices[1:]):
        assert b.price >= a.price - 3 * a.std_error


def test_call_occupancy_on_lower_bound(robust_call):
    assert robust_call.occupancy_h > 0.9
    assert robust_call.occupancy_h + robust_call.occupancy_g == pytest.approx(1.0)


def test_selector_is_indicator_rule(robust_call):
    sol = robust_call.solution
    assert np.array_equal(robust_call.theta0, np.where(sol.Z > 0, 0.1, 0.3))


def test_discrepancy_report_emitted(robust_call):
    rep = robust_call.summary()["discrepancy"]
    assert rep["used"] == "sup_form"
    assert rep["fraction_cells_differing"] > 0.5


def test_summary_is_json_ready(robust_call):
    json.dumps(robust_call.summary())


def test_forward_hedge_is_one_share(bm, grid):
    res = superhedge_price(market("forward", 90.0), IntervalBounds.constant([THETA], [THETA]), bm, grid)
    assert abs(res.price - 10.0) <= 3 * res.std_error + 1e-9
    # cubic regression noise in the hedge ratio, not a systematic bias
    dev = res.strategy - 1.0
    assert abs(dev.mean()) <= 0.01 and np.sqrt(np.mean(dev**2)) <= 0.05
    assert res.residual_rms <= 0.03 * np.std(res.payoff)
    # holding exactly one share replicates up to the price error
    ones = dataclasses.replace(res, strategy=np.ones_like(res.strategy))
    assert replication_error(ones).rms == pytest.approx(abs(res.price - 10.0), abs=1e-9)


def test_replication_residual_shrinks_with_steps():
    study = refinement_study(market(), IntervalBounds.constant([0.1], [0.3]), 1.0, 20_000, 52)
    assert study.decreasing
    assert study.rms[-1] < study.rms[0]


def test_replication_error_checks_shapes(robust_call):
    with pytest.raises(InvalidArgument):
        replication_error(robust_call, np.zeros((3, 4, 1)))


# --- volatility uncertainty ----------------------------------------------------------


def test_theta_interval_orders_endpoints():
    assert vol_theta_interval(0.05, 0.25, 0.15) == pytest.approx((0.2, 1 / 3))
    assert vol_theta_interval(-0.05, 0.15, 0.25) == pytest.approx((-1 / 3, -0.2))
    with pytest.raises(InvalidArgument):
        vol_theta_interval(0.05, 0.0, 0.2)


def test_driftless_volatility_case(bm, grid):
    res = gbm_vol_uncertainty(0.0, 0.15, 0.25, Payoff("call", 100.0), 100.0, bm, grid)
    assert np.all(res.theta0 == 0.0)
    assert abs(res.price - res.payoff.mean()) <= 3 * res.std_error
    assert res.selector["agreement"] == 1.0


def test_selector_two_point_oracle(bm, grid):
    res = gbm_vol_uncertainty(0.05, 0.15, 0.25, Payoff("call", 100.0), 100.0, bm, grid, verify=False)
    Z = res.solution.Z[..., 0]
    want = np.where(0.05 / 0.15 * Z < 0.05 / 0.25 * Z, 0.15, 0.25)
    want = np.where(Z == 0, 0.15, want)
    assert np.array_equal(res.selector["sigma_selected"], want)
    assert res.selector["agreement"] == 1.0
    # positive drift with a long call: the larger volatility dominates
    assert res.selector["fraction_sigma2"] > 0.9


def test_equal_volatilities_collapse(bm, grid):
    res = gbm_vol_uncertainty(MU, VOL, VOL, Payoff("call", 100.0), 100.0, bm, grid)
    ref = black_scholes_call(100, 100, VOL, 1.0)
    assert abs(res.price - ref) <= max(0.01 * ref, 3 * res.std_error)


def test_nonpositive_volatility_rejected(bm, grid):
    with pytest.raises(InvalidArgument):
        gbm_vol_uncertainty(0.05, -0.1, 0.2, Payoff("call", 100.0), 100.0, bm, grid)


def test_physical_paths_drift_upward(bm, grid):
    S = simulate_ito(market().ito_spec(), bm, grid).states[:, -1, 0]
    assert abs(S.mean() - 100 * math.exp(MU)) <= 3 * S.std() / math.sqrt(S.size)
