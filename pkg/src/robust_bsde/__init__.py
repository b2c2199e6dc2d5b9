"""Monte Carlo solvers for BSDEs driven by a family of Ito processes."""

__version__ = "0.1.0"

from .ambiguity import (
    GeneratorSpec,
    IntervalBounds,
    robust_generator,
    transformed_generator,
    worst_case_theta,
)
from .errors import (
    BoundViolationError,
    InvalidArgument,
    InvalidBoundsError,
    NumericBlowupError,
    RobustBsdeError,
    SingularVolatilityError,
)
from .hedging import MarketSpec, Payoff, gbm_vol_uncertainty, superhedge_price
from .robust import RobustProblem, RobustSolution, solve_robust
from .solver import BsdeProblem, BsdeSolution, solve_bsde_lsmc, solve_bsde_picard
from .stochastic import (
    BrownianEnsemble,
    CoefficientField,
    ItoSpec,
    PolynomialBasis,
    TimeGrid,
    make_time_grid,
    simulate_brownian,
    simulate_ito,
)
