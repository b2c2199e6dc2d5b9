import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_bsde.ambiguity import GeneratorSpec
from robust_bsde.errors import InvalidArgument, NumericBlowupError, SingularVolatilityError
from robust_bsde.solver import (
    BsdeProblem,
    BsdeSolution,
    LinearSpec,
    adjoint_process,
    picard_beta,
    picard_gamma_norm,
    solve_bsde_lsmc,
    solve_bsde_picard,
    solve_linear_closed_form,
)
from robust_bsde.stochastic import CoefficientField, make_time_grid, simulate_brownian, standard_error


@pytest.fixture(scope="module")
def grid20():
    return make_time_grid(1.0, 20)


@pytest.fixture(scope="module")
def bm20(grid20):
    return simulate_brownian(grid20, 20_000, 1, 31)


def problem(gen, xi, grid, bm, **kw):
    return BsdeProblem(gen, xi, grid, bm.paths, **kw)


# --- explicit scheme -------------------------------------------------------------


def test_brownian_terminal_value(grid20, bm20):
    WT = bm20.paths[:, -1, 0]
    sol = solve_bsde_lsmc(problem(GeneratorSpec.zero(), WT, grid20, bm20), bm20)
    assert abs(sol.y0) <= 3 * sol.std_error
    # Z_0 is the sample mean of the centred product at the first step
    prod = (WT - WT.mean()) * bm20.increments[:, 0, 0] / grid20.dt[0]
    assert abs(sol.Z[:, 0, 0].mean() - 1.0) <= 3 * standard_error(prod)
    assert abs(sol.Z[..., 0].mean() - 1.0) <= 0.02


def test_constant_terminal_value(grid20, bm20):
    sol = solve_bsde_lsmc(problem(GeneratorSpec.zero(), np.full(bm20.M, 2.5), grid20, bm20), bm20)
    assert np.max(np.abs(sol.Y - 2.5)) <= 1e-8
    assert np.max(np.abs(sol.Z)) <= 1e-8


def test_discounting_driver(grid20, bm20):
    gen = GeneratorSpec(lambda t, x, y, z: -0.1 * y, K=0.1)
    sol = solve_bsde_lsmc(problem(gen, np.ones(bm20.M), grid20, bm20), bm20)
    assert sol.y0 == pytest.approx(math.exp(-0.1), rel=0.01)


def test_terminal_column_is_exact(grid20, bm20):
    xi = np.sin(bm20.paths[:, -1, 0]) ** 3
    sol = solve_bsde_lsmc(problem(GeneratorSpec.zero(), xi, grid20, bm20), bm20)
    assert np.array_equal(sol.Y[:, -1], xi)


def test_callable_terminal(grid20, bm20):
    sol = solve_bsde_lsmc(problem(GeneratorSpec.zero(), lambda s: s[:, -1, 0] ** 2, grid20, bm20), bm20)
    assert abs(sol.y0 - 1.0) <= 3 * sol.std_error


def test_blowup_reports_location(grid20, bm20):
    gen = GeneratorSpec(lambda t, x, y, z: np.full(np.shape(y), 1e9), K=0.0)
    with pytest.raises(NumericBlowupError) as info:
        solve_bsde_lsmc(problem(gen, np.zeros(bm20.M), grid20, bm20, y_cap=1e7), bm20)
    assert info.value.step == 19


def test_mismatched_ensemble_rejected(grid20, bm20):
    other = simulate_brownian(make_time_grid(1.0, 10), 100, 1, 0)
    with pytest.raises(InvalidArgument):
        solve_bsde_lsmc(problem(GeneratorSpec.zero(), np.zeros(bm20.M), grid20, bm20), other)


def test_terminal_shape_checked(grid20, bm20):
    with pytest.raises(InvalidArgument):
        solve_bsde_lsmc(problem(GeneratorSpec.zero(), np.zeros(5), grid20, bm20), bm20)


def test_comparison_on_coupled_ensembles(grid20, bm20):
    WT = bm20.paths[:, -1, 0]
    lo = GeneratorSpec(lambda t, x, y, z: 0.1 * np.sin(y), K=0.1)
    hi = GeneratorSpec(lambda t, x, y, z: 0.1 * np.sin(y) + 0.05, K=0.1)
    a = solve_bsde_lsmc(problem(hi, np.maximum(WT, 0) + 0.1, grid20, bm20), bm20)
    b = solve_bsde_lsmc(problem(lo, np.maximum(WT, 0), grid20, bm20), bm20)
    assert a.y0 >= b.y0 - 3 * b.std_error


# --- Picard ----------------------------------------------------------------------


def test_picard_driver_free_of_solution(grid20, bm20):
    WT = bm20.paths[:, -1, 0]
    gen = GeneratorSpec(lambda t, x, y, z: np.cos(x[:, 0]), K=0.0, depends_on_z=False)
    sol = solve_bsde_picard(problem(gen, WT, grid20, bm20), bm20)
    hist = sol.diagnostics["gamma_history"]
    assert sol.diagnostics["converged"]
    assert len(hist) == 2 and hist[1] <= 1e-10


@pytest.fixture(scope="module")
def picard_case(grid20, bm20):
    WT = bm20.paths[:, -1, 0]
    gen = GeneratorSpec(lambda t, x, y, z: 0.5 * np.sin(y) + 0.2 * z[:, 0], K=0.7)
    prob = problem(gen, np.maximum(WT, 0) + np.sin(WT), grid20, bm20)
    return prob, solve_bsde_picard(prob, bm20)


def test_picard_contracts(picard_case):
    _, sol = picard_case
    ratios = sol.diagnostics["gamma_ratios"]
    assert sol.diagnostics["converged"]
    assert all(r <= 0.9 for r in ratios[2:])


def test_picard_matches_explicit_scheme(picard_case, bm20):
    prob, sol = picard_case
    ref = solve_bsde_lsmc(prob, bm20)
    assert abs(sol.y0 - ref.y0) <= 3 * math.hypot(sol.std_error, ref.std_error)


def test_picard_reports_non_convergence(picard_case, bm20):
    prob, _ = picard_case
    sol = solve_bsde_picard(prob, bm20, max_iter=2, tol=1e-300)
    assert not sol.diagnostics["converged"] and sol.diagnostics["warning"]
    assert sol.diagnostics["iterations"] == 2


def test_picard_beta_formula():
    assert picard_beta(0.5, 0.3, 1.0) == pytest.approx(16 * 0.64 * 3 * 2)


# --- weighted norm ---------------------------------------------------------------


def _sol(Y, Z, grid):
    return BsdeSolution(np.asarray(Y, float), np.asarray(Z, float), grid, np.zeros(len(Y)))


def test_gamma_norm_identical_is_zero():
    grid = make_time_grid(1.0, 4)
    rng = np.random.default_rng(0)
    s = _sol(rng.normal(size=(10, 5)), rng.normal(size=(10, 4, 2)), grid)
    assert picard_gamma_norm(s, s, 3.0) == 0.0


def test_gamma_norm_constant_offset():
    grid = make_time_grid(1.0, 4)
    a = _sol(np.full((10, 5), 1.7), np.zeros((10, 4, 1)), grid)
    b = _sol(np.full((10, 5), 1.2), np.zeros((10, 4, 1)), grid)
    assert picard_gamma_norm(a, b, 0.0) == pytest.approx(0.5, abs=1e-15)


# squares of |lambda| below ~1e-150 underflow, so stay in the representable range
scales = st.one_of(st.just(0.0), st.floats(1e-6, 5), st.floats(-5, -1e-6))


@given(scales, st.integers(0, 1000), st.floats(0, 4))
def test_gamma_norm_homogeneous(lam, seed, beta):
    grid = make_time_grid(1.0, 6)
    rng = np.random.default_rng(seed)
    dY, dZ = rng.normal(size=(8, 7)), rng.normal(size=(8, 6, 2))
    zero = _sol(np.zeros((8, 7)), np.zeros((8, 6, 2)), grid)
    base = picard_gamma_norm(_sol(dY, dZ, grid), zero, beta)
    scaled = picard_gamma_norm(_sol(lam * dY, lam * dZ, grid), zero, beta)
    assert scaled == pytest.approx(abs(lam) * base, rel=1e-12)


def test_gamma_norm_shape_mismatch():
    grid = make_time_grid(1.0, 4)
    a = _sol(np.zeros((10, 5)), np.zeros((10, 4, 1)), grid)
    b = _sol(np.zeros((9, 5)), np.zeros((9, 4, 1)), grid)
    with pytest.raises(InvalidArgument):
        picard_gamma_norm(a, b, 0.0)


# --- linear oracle ---------------------------------------------------------------


def test_adjoint_without_coefficients_is_one(grid20, bm20):
    lin = LinearSpec.build(0.0, [0.3], 0.0, 1.0)
    adj = adjoint_process(lin, [0.3], [[1.0]], bm20.paths, bm20, grid20)
    assert np.array_equal(adj.values, np.ones((bm20.M, 21)))


def test_adjoint_deterministic_growth(grid20, bm20):
    lin = LinearSpec.build(0.05, [0.3], 0.0, 1.0)
    adj = adjoint_process(lin, [0.3], [[0.5]], bm20.paths, bm20, grid20)
    want = np.exp(0.05 * grid20.times)
    assert np.max(np.abs(adj.values - want[None, :])) <= 1e-13


def test_adjoint_martingale_mean(grid20):
    bm = simulate_brownian(grid20, 100_000, 1, 32)
    lin = LinearSpec.build(0.0, [0.3], 0.0, 1.0)
    GT = adjoint_process(lin, [0.0], [[1.0]], bm.paths, bm, grid20).values[:, -1]
    assert abs(GT.mean() - 1.0) <= 3 * standard_error(GT)


def test_adjoint_rejects_singular_volatility(grid20, bm20):
    lin = LinearSpec.build(0.0, [0.0], 0.0, 1.0)
    with pytest.raises(SingularVolatilityError):
        adjoint_process(lin, [0.0], [[0.0]], bm20.paths, bm20, grid20)


def test_closed_form_discount_factor(grid20, bm20):
    lin = LinearSpec.build(0.05, [0.2], 0.0, 1.0)
    cf = solve_linear_closed_form(lin, [0.2], [[1.0]], bm20.paths, bm20, grid20)
    want = np.exp(0.05 * (1.0 - grid20.times))
    assert np.max(np.abs(cf.Y - want[None, :])) <= 1e-8


def test_closed_form_running_cost(grid20, bm20):
    lin = LinearSpec.build(0.0, [0.0], 1.0, 0.0)
    cf = solve_linear_closed_form(lin, [0.0], [[1.0]], bm20.paths, bm20, grid20)
    assert np.max(np.abs(cf.Y - (1.0 - grid20.times)[None, :])) <= 1e-10


def test_closed_form_matches_scheme(grid20):
    bm = simulate_brownian(grid20, 50_000, 1, 33)
    W = bm.paths[..., 0]
    lin = LinearSpec.build(
        CoefficientField(lambda t, x: 0.1 * np.cos(x[:, 0]), (), bound=0.1),
        [0.25],
        CoefficientField(lambda t, x: 0.2 * x[:, 0], ()),
        lambda s: np.maximum(s[:, -1, 0], 0.0) + 1.0,
    )
    cf = solve_linear_closed_form(lin, [0.0], [[1.0]], bm.paths, bm, grid20)
    sol = solve_bsde_lsmc(BsdeProblem(lin.generator(), lin.terminal, grid20, W), bm)
    assert sol.y0 == pytest.approx(cf.y0, rel=0.015)
