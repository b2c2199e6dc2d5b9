import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_bsde.errors import (
    BoundViolationError,
    InvalidArgument,
    NumericBlowupError,
    SingularVolatilityError,
)
from robust_bsde.stochastic import (
    BinnedBasis,
    CoefficientField,
    ItoSpec,
    PolynomialBasis,
    Projector,
    TimeGrid,
    conditional_expectation,
    girsanov_density,
    make_time_grid,
    simulate_brownian,
    simulate_ito,
    standard_error,
)


# --- grids ---------------------------------------------------------------------


def test_grid_quarters():
    assert make_time_grid(1.0, 4).times.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_grid_single_step():
    g = make_time_grid(2.0, 1)
    assert g.times.tolist() == [0.0, 2.0]
    assert g.N == 1 and g.T == 2.0


@pytest.mark.parametrize("T,N", [(1.0, 0), (0.0, 4), (-1.0, 4), (1.0, -3), (float("nan"), 2), (1.0, 2.5)])
def test_grid_rejects_bad_arguments(T, N):
    with pytest.raises(InvalidArgument):
        make_time_grid(T, N)


def test_grid_rejects_unordered_times():
    with pytest.raises(InvalidArgument):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))


def test_index_of_rejects_off_grid_time():
    g = make_time_grid(1.0, 4)
    assert g.index_of(0.75) == 3
    with pytest.raises(InvalidArgument):
        g.index_of(0.3)


# --- Brownian ensembles --------------------------------------------------------


def test_same_seed_bit_identical(grid50):
    a = simulate_brownian(grid50, 3000, 2, 5)
    b = simulate_brownian(grid50, 3000, 2, 5)
    assert a.increments.tobytes() == b.increments.tobytes()
    c = simulate_brownian(grid50, 3000, 2, 6)
    assert not np.array_equal(a.increments, c.increments)


@given(st.integers(1, 5000), st.integers(0, 2**32))
def test_ensemble_prefix_consistency(M, seed):
    grid = make_time_grid(1.0, 3)
    big = simulate_brownian(grid, 5000, 1, seed)
    small = simulate_brownian(grid, M, 1, seed)
    assert np.array_equal(big.increments[:M], small.increments)


def test_increment_variance_matches_step(grid50):
    bm = simulate_brownian(grid50, 100_000, 1, 1)
    dW = bm.increments.ravel()
    n = dW.size
    var = float(np.mean(dW**2))
    # sample variance of n normals has standard error dt * sqrt(2 / n)
    assert abs(var - 0.02) <= 3 * 0.02 * math.sqrt(2.0 / n)


def test_components_uncorrelated(grid50):
    bm = simulate_brownian(grid50, 100_000, 2, 2)
    a = bm.increments[..., 0].ravel()
    b = bm.increments[..., 1].ravel()
    r = np.corrcoef(a, b)[0, 1]
    # Fisher z of a null correlation has standard error 1 / sqrt(n - 3)
    assert abs(np.arctanh(r)) <= 3 / math.sqrt(a.size - 3)


def test_increments_read_only(grid50):
    bm = simulate_brownian(grid50, 10, 1, 0)
    with pytest.raises(ValueError):
        bm.increments[0, 0, 0] = 1.0


@pytest.mark.parametrize("kw", [{"M": 0}, {"d": 0}, {"seed": -1}, {"M": 2.5}])
def test_simulate_brownian_validates(grid50, kw):
    args = {"M": 10, "d": 1, "seed": 0, **kw}
    with pytest.raises(InvalidArgument):
        simulate_brownian(grid50, **args)


# --- Euler simulation ----------------------------------------------------------


def test_identity_coefficients_reproduce_brownian_sums(grid50):
    bm = simulate_brownian(grid50, 2000, 2, 3)
    spec = ItoSpec(np.zeros(2), np.zeros(2), np.eye(2))
    X = simulate_ito(spec, bm, grid50).states
    assert np.array_equal(X, bm.paths)


def test_gbm_mean(grid50):
    bm = simulate_brownian(grid50, 100_000, 1, 4)
    spec = ItoSpec([100.0], CoefficientField(lambda t, x: 0.05 * x, (1,)),
                   CoefficientField(lambda t, x: 0.2 * x[:, :, None], (1, 1)))
    XT = simulate_ito(spec, bm, grid50).states[:, -1, 0]
    assert abs(XT.mean() - 100 * math.exp(0.05)) <= 3 * standard_error(XT)


def test_zero_volatility_is_singular(grid50):
    bm = simulate_brownian(grid50, 10, 1, 0)
    spec = ItoSpec([1.0], [0.0], [[0.0]])
    with pytest.raises(SingularVolatilityError) as info:
        simulate_ito(spec, bm, grid50)
    assert info.value.step == 0 and info.value.path == 0


def test_singular_location_reported(grid50):
    bm = simulate_brownian(grid50, 50, 2, 0)
    # singular only on path 7 once t >= 0.5
    def sigma(t, x):
        s = np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)).copy()
        if t >= 0.5:
            s[7, 1, 1] = 0.0
        return s
    spec = ItoSpec(np.zeros(2), np.zeros(2), CoefficientField(sigma, (2, 2)))
    with pytest.raises(SingularVolatilityError) as info:
        simulate_ito(spec, bm, grid50)
    assert (info.value.path, info.value.step) == (7, 25)


def test_blowup_detected(grid50):
    bm = simulate_brownian(grid50, 10, 1, 0)
    spec = ItoSpec([1.0], CoefficientField(lambda t, x: 1e300 * x**2, (1,)), [[1.0]])
    with pytest.raises(NumericBlowupError):
        simulate_ito(spec, bm, grid50)


def test_coefficient_bound_enforced(grid50):
    bm = simulate_brownian(grid50, 10, 1, 0)
    spec = ItoSpec([1.0], CoefficientField.constant([2.0], bound=1.0), [[1.0]])
    with pytest.raises(BoundViolationError):
        simulate_ito(spec, bm, grid50)


# --- densities -----------------------------------------------------------------


def test_zero_kernel_density_is_one(grid50):
    bm = simulate_brownian(grid50, 100, 2, 0)
    assert np.array_equal(girsanov_density(0.0, bm, grid50).values, np.ones((100, 51)))


def test_exponential_martingale_mean(grid50):
    bm = simulate_brownian(grid50, 100_000, 1, 8)
    L = girsanov_density(0.3, bm, grid50).values[:, -1]
    assert abs(L.mean() - 1.0) <= 3 * standard_error(L)


def test_density_replay_by_direct_summation(grid50):
    bm = simulate_brownian(grid50, 500, 2, 9)
    theta = np.random.default_rng(0).uniform(-1, 1, (500, 50, 2))
    dens = girsanov_density(theta, bm, grid50)
    direct = np.zeros(500)
    for i in range(50):
        direct += np.sum(theta[:, i] * bm.increments[:, i], axis=1)
        direct -= 0.5 * np.sum(theta[:, i] ** 2, axis=1) * 0.02
    assert np.max(np.abs(dens.log_density[:, -1] - direct)) <= 1e-12


def test_density_positive_and_normalised(grid50):
    bm = simulate_brownian(grid50, 200, 1, 0)
    v = girsanov_density(-2.0, bm, grid50).values
    assert np.all(v > 0) and np.all(v[:, 0] == 1.0)


def test_density_bound(grid50):
    bm = simulate_brownian(grid50, 10, 1, 0)
    with pytest.raises(BoundViolationError):
        girsanov_density(0.5, bm, grid50, bound=0.4)


def test_shifted_measure_moves_terminal_mean(grid50):
    bm = simulate_brownian(grid50, 100_000, 1, 12)
    WT = bm.paths[:, -1, 0]
    L = girsanov_density(0.3, bm, grid50).values[:, -1]
    w = L * WT
    assert abs(w.mean() - 0.3) <= 3 * standard_error(w)


# --- regression ------------------------------------------------------------------


def test_projection_of_span_member_is_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5000, 2))
    y = 1.5 - 2 * x[:, 0] + 0.5 * x[:, 0] * x[:, 1] + x[:, 1] ** 3
    reg = conditional_expectation(x, y)
    assert reg.residual_rms <= 1e-10
    assert np.max(np.abs(reg.fitted - y)) <= 1e-9


def test_constant_targets_fitted_exactly():
    x = np.random.default_rng(1).normal(size=(1000, 1))
    reg = conditional_expectation(x, np.full(1000, 3.25))
    assert np.max(np.abs(reg.fitted - 3.25)) <= 1e-12


@given(st.integers(0, 10_000))
def test_projection_idempotent(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(400, 1))
    y = np.sin(3 * x[:, 0]) + rng.normal(size=400)
    once = conditional_expectation(x, y).fitted
    twice = conditional_expectation(x, once).fitted
    assert np.max(np.abs(once - twice)) <= 1e-10


def test_conditional_second_moment_of_brownian(grid50):
    bm = simulate_brownian(grid50, 100_000, 1, 13)
    W = bm.paths[..., 0]
    i = 25
    reg = conditional_expectation(W[:, i], W[:, -1] ** 2, PolynomialBasis(2))
    # E[W_T^2 | W_t = w] = w^2 + (T - t); compare raw-scale coefficients
    A = np.column_stack([np.ones(bm.M), W[:, i], W[:, i] ** 2])
    coef, *_ = np.linalg.lstsq(A, reg.fitted, rcond=None)
    resid = W[:, -1] ** 2 - A @ coef
    # residual variance grows with w, so use the sandwich covariance
    bread = np.linalg.inv(A.T @ A)
    cov = bread @ (A.T * resid**2) @ A @ bread
    se = np.sqrt(np.diag(cov))
    assert np.all(np.abs(coef - np.array([0.5, 0.0, 1.0])) <= 3 * se)


def test_constant_features_flag_rank_deficiency():
    reg = conditional_expectation(np.zeros((300, 1)), np.arange(300.0))
    assert reg.rank_deficient and reg.rank == 1
    assert np.allclose(reg.fitted, np.mean(np.arange(300.0)))


def test_leverage_sums_to_rank():
    x = np.random.default_rng(2).normal(size=(2000, 2))
    proj = Projector(x)
    assert math.isclose(proj.leverage().sum(), proj.rank, rel_tol=1e-10)


def test_polynomial_basis_size():
    assert PolynomialBasis(3).size(1) == 4
    assert PolynomialBasis(3).size(2) == 10


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_binned_projection_preserves_order(seed, bins):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(500, 1))
    a = rng.normal(size=500)
    b = a + rng.exponential(size=500)
    proj = Projector(x, BinnedBasis(bins))
    assert np.all(proj.fitted(b) >= proj.fitted(a) - 1e-12)


def test_standard_error_single_value():
    assert standard_error(np.array([4.0])) == 0.0
