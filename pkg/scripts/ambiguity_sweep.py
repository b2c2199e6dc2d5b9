"""Robust call price as the interval for the market price of risk widens.

The interval is centred on the physical value mu / sigma = 0.2; every width
reuses the same Brownian ensemble so the prices are coupled.
"""
import argparse

from robust_bsde.ambiguity import IntervalBounds
from robust_bsde.hedging import MarketSpec, Payoff, black_scholes_call, superhedge_price
from robust_bsde.stochastic import make_time_grid, simulate_brownian, simulate_ito


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--widths", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2, 0.3, 0.4])
    args = p.parse_args()

    market = MarketSpec([100.0], [0.04], [[0.2]], Payoff("call", 100.0))
    centre = float(market.theta[0])
    grid = make_time_grid(1.0, args.steps)
    bm = simulate_brownian(grid, args.paths, 1, args.seed)
    states = simulate_ito(market.ito_spec(), bm, grid).states
    print(f"Black-Scholes reference: {black_scholes_call(100.0, 100.0, 0.2, 1.0):.4f}")
    print(f"{'h':>6} {'g':>6} {'price':>10} {'se':>8} {'occ_h':>7}")
    for w in args.widths:
        h, g = centre - w / 2, centre + w / 2
        res = superhedge_price(market, IntervalBounds.constant([h], [g]), bm, grid, verify=False, states=states)
        print(f"{h:6.3f} {g:6.3f} {res.price:10.4f} {res.std_error:8.4f} {res.occupancy_h:7.3f}")


if __name__ == "__main__":
    main()
