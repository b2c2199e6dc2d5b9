"""Command line entry point.

    robust-bsde run --config <path> [--seed <int>] [--out <dir>]
    robust-bsde validate [--seed <int>] [--out <dir>]

Exit codes: 0 success, 1 config or input validation error, 2 numeric
failure (including failed validation checks). ``ROBUST_BSDE_THREADS``
caps the BLAS thread pool; nothing else is read from the environment.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .ambiguity import GeneratorSpec, IntervalBounds
from .config import BoundsConfig, ExperimentConfig, GeneratorConfig, PayoffConfig, load_config
from .errors import (
    BoundViolationError,
    InvalidArgument,
    InvalidBoundsError,
    NumericBlowupError,
    RobustBsdeError,
    SingularVolatilityError,
)
from .hedging import (
    MarketSpec,
    Payoff,
    gbm_vol_uncertainty,
    replication_error,
    superhedge_price,
)
from .robust import RobustProblem, compare_solutions, solve_robust
from .solver import LinearSpec
from .stochastic import (
    BinnedBasis,
    CoefficientField,
    PolynomialBasis,
    make_time_grid,
    simulate_brownian,
    simulate_ito,
)
from .validation import canonical_json, jsonable, validate_suite

log = logging.getLogger("robust_bsde")

THREADS_ENV = "ROBUST_BSDE_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
RUN_FILES = ("results.csv", "diagnostics.json", "config.json")
INPUT_ERRORS = (InvalidArgument, InvalidBoundsError, BoundViolationError)


class PipelineError(RuntimeError):
    """A module failure with the stage it happened in."""

    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        self.cause = exc
        where = []
        for attr in ("path", "step"):
            if getattr(exc, attr, None) is not None:
                where.append(f"{attr}={getattr(exc, attr)}")
        loc = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}{loc}")


# --- building blocks from a config ---------------------------------------------------


def make_basis(cfg: ExperimentConfig):
    return BinnedBasis(cfg.bins) if cfg.basis == "binned" else PolynomialBasis(cfg.degree)


def make_market(cfg: ExperimentConfig, payoff: Optional[PayoffConfig] = None) -> MarketSpec:
    m = cfg.market
    p = payoff or cfg.payoff
    return MarketSpec(m.s0, m.mu, m.sigma, Payoff(p.kind, float(p.strike), p.asset))


def make_bounds(b: BoundsConfig) -> IntervalBounds:
    if b.h_slope is None and b.g_slope is None:
        return IntervalBounds.constant(b.h, b.g, b.bound)
    zeros = [0.0] * len(b.h)
    h = CoefficientField.affine(b.h, b.h_slope or zeros, name="h")
    g = CoefficientField.affine(b.g, b.g_slope or zeros, name="g")
    return IntervalBounds(h, g, b.bound)


def make_generator(gcfg: GeneratorConfig, d: int) -> GeneratorSpec:
    p = dict(gcfg.params)
    offset = float(p.pop("offset", 0.0))
    if gcfg.name == "zero":
        base = GeneratorSpec.zero()
    elif gcfg.name == "linear":
        alpha = float(p.get("alpha", 0.0))
        gamma = np.broadcast_to(np.asarray(p.get("gamma", [0.0] * d), dtype=float), (d,))
        lin = LinearSpec.build(CoefficientField.constant(alpha, bound=abs(alpha)),
                               CoefficientField.constant(gamma, bound=float(np.linalg.norm(gamma))),
                               float(p.get("phi", 0.0)), np.zeros(1), d)
        base = lin.generator()
    else:
        a, b = float(p.get("a", 0.0)), float(p.get("b", 0.0))
        base = GeneratorSpec(lambda t, x, y, z: a * np.sin(y) + b * np.sum(z, axis=-1),
                             abs(a) + abs(b) * np.sqrt(d), 0.0, "sine")
    if offset == 0.0:
        return base
    return GeneratorSpec(lambda t, x, y, z: base(t, x, y, z) + offset, base.K, abs(offset), f"{base.name}+c",
                         base.depends_on_z)


def _setup(cfg: ExperimentConfig, N: Optional[int] = None):
    grid = make_time_grid(float(cfg.T), int(N or cfg.N))
    bm = simulate_brownian(grid, cfg.M, cfg.d, cfg.seed)
    return grid, bm


# --- pipelines ------------------------------------------------------------------------------


def _price(cfg: ExperimentConfig, N: Optional[int] = None):
    grid, bm = _setup(cfg, N)
    basis = make_basis(cfg)
    m = cfg.market
    if m.sigma_interval is not None:
        p = cfg.payoff
        s1, s2 = m.sigma_interval
        return gbm_vol_uncertainty(float(m.mu[0]), float(s1), float(s2), Payoff(p.kind, float(p.strike), p.asset),
                                   float(m.s0[0]), bm, grid, basis, m.sigma_reference, verify=cfg.verify)
    return superhedge_price(make_market(cfg), make_bounds(cfg.bounds), bm, grid, basis, verify=cfg.verify,
                            family_seed=cfg.seed)


def run_price(cfg: ExperimentConfig):
    res = _price(cfg)
    row = {"run_id": cfg.run_id(), "price": res.price, "std_error": res.std_error,
           "occupancy_h": res.occupancy_h, "occupancy_g": res.occupancy_g, "residual_rms": res.residual_rms}
    diag = res.summary()
    diag["solver"] = res.solution.classical.diagnostics_json()
    diag["replication"] = replication_error(res).to_dict()
    return [row], diag


def _robust_problem(cfg: ExperimentConfig, states, grid, payoff=None, bounds=None, gen=None, shift=0.0):
    market = make_market(cfg, payoff)
    xi = market.payoff(states[:, -1]) + shift
    gcfg = gen or cfg.generator
    return RobustProblem(make_generator(gcfg, cfg.d), xi, make_bounds(bounds or cfg.bounds),
                         market.volatility_field(), grid, states, sigma_inv_bound=float(gcfg.sigma_inv_bound))


def _check_market_mode(cfg: ExperimentConfig):
    if cfg.market.sigma_interval is not None:
        raise InvalidArgument(f"kind {cfg.kind!r} needs 'market.sigma' (volatility intervals are priced by kind 'price')")


def run_robust_solve(cfg: ExperimentConfig):
    _check_market_mode(cfg)
    grid, bm = _setup(cfg)
    states = simulate_ito(make_market(cfg).ito_spec(), bm, grid).states
    problem = _robust_problem(cfg, states, grid)
    kwargs = {"max_iter": cfg.max_iter, "tol": cfg.tol} if cfg.method == "picard" else {}
    sol = solve_robust(problem, bm, make_basis(cfg), method=cfg.method, verify=cfg.verify,
                       family_seed=cfg.seed, **kwargs)
    diag = sol.classical.diagnostics
    occ_h = float(np.mean(sol.Z > 0))
    row = {"run_id": cfg.run_id(), "y0": sol.y0, "std_error": sol.std_error, "occupancy_h": occ_h,
           "occupancy_g": 1.0 - occ_h, "iterations": diag.get("iterations", 1),
           "e_martingale_passed": sol.e_report.passed if sol.e_report is not None else ""}
    out = {"solver": sol.classical.diagnostics_json(), "hypotheses": sol.hypotheses}
    if sol.e_report is not None:
        out["e_martingale"] = sol.e_report.to_dict()
    return [row], out


def run_converge(cfg: ExperimentConfig):
    rows, runs = [], []
    for N in cfg.steps:
        res = _price(cfg, N)
        rows.append({"run_id": cfg.run_id(), "N": N, "price": res.price, "std_error": res.std_error,
                     "residual_rms": res.residual_rms})
        runs.append({"N": N, "solver": res.solution.classical.diagnostics_json()})
    rms = [r["residual_rms"] for r in rows]
    trend = {"residual_rms": rms, "decreasing_within_20pct": all(b <= 1.2 * a for a, b in zip(rms, rms[1:]))}
    return rows, {"runs": runs, "trend": trend}


def run_compare(cfg: ExperimentConfig):
    _check_market_mode(cfg)
    grid, bm = _setup(cfg)
    states = simulate_ito(make_market(cfg).ito_spec(), bm, grid).states
    c = cfg.compare
    pB = _robust_problem(cfg, states, grid,
                         PayoffConfig(**c["payoff"]) if "payoff" in c else None,
                         BoundsConfig(**c["bounds"]) if "bounds" in c else None,
                         GeneratorConfig(**c["generator"]) if "generator" in c else None,
                         float(c.get("terminal_shift", 0.0)))
    pA = _robust_problem(cfg, states, grid)
    rep = compare_solutions(pA, pB, bm, make_basis(cfg))
    row = {"run_id": cfg.run_id(), "y0_a": rep.y0_a, "y0_b": rep.y0_b, "tolerance": rep.tolerance,
           "t0_ok": rep.t0_ok, "violation_fraction": rep.violation_fraction,
           "preconditions_ok": rep.preconditions_ok}
    return [row], rep.to_dict()


def run_validate_kind(cfg: ExperimentConfig):
    report = validate_suite(cfg.seed, cfg.M, cfg.N)
    rows = [{"run_id": cfg.run_id(), "criterion": c.criterion, "name": c.name, "passed": c.passed}
            for c in report.checks]
    return rows, report.to_dict()


PIPELINES = {
    "price": ("hedging.superhedge_price", run_price),
    "robust-solve": ("robust.solve_robust", run_robust_solve),
    "converge": ("hedging.refinement", run_converge),
    "compare": ("robust.compare_solutions", run_compare),
    "validate": ("validation.validate_suite", run_validate_kind),
}


# --- artifacts ------------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def results_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(rows[0]))
    for r in rows:
        writer.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def _is_previous_run(path: Path) -> bool:
    names = {p.name for p in path.iterdir()}
    return names <= set(RUN_FILES) | {"report.json"}


def write_atomic(out: Path, files: dict[str, str]) -> Path:
    """Write ``files`` into ``out`` via a sibling temp directory and a rename.

    An existing ``out`` is replaced only if it is empty or holds nothing
    but a previous run's artifacts.
    """
    out = Path(out)
    if out.exists():
        if not out.is_dir() or not _is_previous_run(out):
            raise InvalidArgument(f"output {str(out)!r} exists and is not a previous run directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        for name, text in files.items():
            with open(tmp / name, "w", newline="") as fh:
                fh.write(text)
        if out.exists():
            shutil.rmtree(out)
        os.rename(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def execute(cfg: ExperimentConfig, out: Optional[Path] = None) -> Path:
    """Run the pipeline for ``cfg`` and write its artifacts; returns the output directory."""
    stage, fn = PIPELINES[cfg.kind]
    try:
        rows, diagnostics = fn(cfg)
    except (RobustBsdeError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise PipelineError(stage, exc) from exc
    out = Path(out or cfg.output or Path("runs") / cfg.run_id())
    diag = {"version": __version__, "seed": cfg.seed, "run_id": cfg.run_id(), "kind": cfg.kind,
            "diagnostics": jsonable(diagnostics)}
    return write_atomic(out, {"results.csv": results_csv(rows), "diagnostics.json": canonical_json(diag),
                              "config.json": cfg.to_json()})


# --- argument handling ------------------------------------------------------------------------


@contextlib.contextmanager
def thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise InvalidArgument(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-bsde", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("--config", required=True, help="path to a JSON experiment config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", help="output directory (default: config 'output' or runs/<run_id>)")
    val = sub.add_parser("validate", help="run the invariant and oracle suite")
    val.add_argument("--seed", type=int, default=0)
    val.add_argument("--out", help="write report.json into this directory")
    val.add_argument("--paths", type=int, default=100_000, help="paths per check (default 100000)")
    val.add_argument("--only", type=int, nargs="+", metavar="N", help="run only these criterion numbers")
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = execute(cfg, Path(args.out) if args.out else None)
    print(f"run {cfg.run_id()} ({cfg.kind}) -> {out}")
    print((out / "results.csv").read_text(), end="")
    return EXIT_OK


def _cmd_validate(args) -> int:
    if args.seed < 0:
        raise InvalidArgument("--seed must be non-negative")
    if args.paths < 2:
        raise InvalidArgument("--paths must be at least 2")
    report = validate_suite(args.seed, args.paths, only=args.only,
                            progress=lambda c: print(f"[{'PASS' if c.passed else 'FAIL'}] {c.criterion:2d} {c.name}",
                                                     flush=True))
    if args.out:
        write_atomic(Path(args.out), {"report.json": report.to_json()})
    n_pass = sum(c.passed for c in report.checks)
    print(f"{n_pass}/{len(report.checks)} checks passed (seed {args.seed})")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return _cmd_run(args) if args.command == "run" else _cmd_validate(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        if isinstance(exc.cause, INPUT_ERRORS):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"numeric failure in {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericBlowupError, SingularVolatilityError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
