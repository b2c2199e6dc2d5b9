"""Experiment configuration: a single JSON document, validated all at once."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import InvalidArgument
from .hedging import PAYOFF_KINDS

KINDS = ("price", "robust-solve", "validate", "converge", "compare")
GENERATORS = ("zero", "linear", "sine")
BASES = ("polynomial", "binned")
METHODS = ("lsmc", "picard")


class ConfigError(InvalidArgument):
    """Every problem found in a config, reported together."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  - " + "\n  - ".join(self.errors))


@dataclass
class MarketConfig:
    s0: list = field(default_factory=lambda: [100.0])
    mu: list = field(default_factory=lambda: [0.0])
    sigma: Optional[list] = None  # d x d matrix
    sigma_interval: Optional[list] = None  # [sigma1, sigma2], one asset only
    sigma_reference: Optional[float] = None


@dataclass
class PayoffConfig:
    kind: str = "call"
    strike: float = 100.0
    asset: int = 0


@dataclass
class BoundsConfig:
    h: list = field(default_factory=lambda: [0.0])
    g: list = field(default_factory=lambda: [0.0])
    h_slope: Optional[list] = None  # affine bounds h + h_slope * x
    g_slope: Optional[list] = None
    bound: Optional[float] = None


@dataclass
class GeneratorConfig:
    name: str = "zero"
    params: dict = field(default_factory=dict)
    sigma_inv_bound: float = 1.0


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    T: float = 1.0
    N: int = 50
    M: int = 100_000
    basis: str = "polynomial"
    degree: int = 3
    bins: int = 32
    market: Optional[MarketConfig] = None
    payoff: Optional[PayoffConfig] = None
    bounds: Optional[BoundsConfig] = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    method: str = "lsmc"
    max_iter: int = 50
    tol: float = 1e-6
    verify: bool = True
    steps: list = field(default_factory=lambda: [25, 50, 100])
    compare: Optional[dict] = None  # overrides for the second problem
    output: Optional[str] = None

    def to_dict(self) -> dict:
        """The authored JSON layout; ``parse_config(cfg.to_dict()) == cfg``."""
        out = {
            "kind": self.kind, "seed": self.seed,
            "grid": {"T": self.T, "N": self.N}, "ensemble": {"M": self.M},
            "basis": {"kind": self.basis, "degree": self.degree, "bins": self.bins},
            "generator": asdict(self.generator),
            "solver": {"method": self.method, "max_iter": self.max_iter, "tol": self.tol},
            "verify": self.verify, "steps": list(self.steps), "output": self.output,
        }
        for key in ("market", "payoff", "bounds"):
            val = getattr(self, key)
            if val is not None:
                out[key] = asdict(val)
        if self.compare is not None:
            out["compare"] = self.compare
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def run_id(self) -> str:
        d = self.to_dict()
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def d(self) -> int:
        return len(self.market.s0) if self.market is not None else 1


_TOP = {"kind", "seed", "grid", "ensemble", "basis", "market", "payoff", "bounds", "generator",
        "solver", "verify", "steps", "compare", "output"}


def _sub(errors, name, raw, cls, allowed):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        errors.append(f"'{name}' must be an object")
        return None
    extra = sorted(set(raw) - allowed)
    if extra:
        errors.append(f"'{name}' has unknown fields {extra}")
    return cls(**{k: v for k, v in raw.items() if k in allowed})


def _num(errors, name, v, lo=None, hi=None, integer=False, strict_lo=False):
    ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok_type:
        errors.append(f"'{name}' must be {'an integer' if integer else 'a number'}, got {v!r}")
        return False
    if not integer and not math.isfinite(v):
        errors.append(f"'{name}' must be finite")
        return False
    if lo is not None and (v <= lo if strict_lo else v < lo):
        errors.append(f"'{name}' must be {'>' if strict_lo else '>='} {lo}, got {v!r}")
        return False
    if hi is not None and v > hi:
        errors.append(f"'{name}' must be <= {hi}, got {v!r}")
        return False
    return True


def _vec(errors, name, v, d):
    if not isinstance(v, list) or len(v) != d or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v):
        errors.append(f"'{name}' must be a list of {d} finite numbers, got {v!r}")
        return False
    return True


def parse_config(raw: Any, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Build and validate a config from a decoded JSON object."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    extra = sorted(set(raw) - _TOP)
    if extra:
        errors.append(f"unknown top-level fields {extra}")
    for req in ("kind", "seed"):
        if req not in raw and not (req == "seed" and seed_override is not None):
            errors.append(f"missing required field '{req}'")
    grid = raw.get("grid", {}) or {}
    ens = raw.get("ensemble", {}) or {}
    basis = raw.get("basis", {}) or {}
    solver = raw.get("solver", {}) or {}
    for name, sub, allowed in (("grid", grid, {"T", "N"}), ("ensemble", ens, {"M"}),
                               ("basis", basis, {"kind", "degree", "bins"}),
                               ("solver", solver, {"method", "max_iter", "tol"})):
        if not isinstance(sub, dict):
            errors.append(f"'{name}' must be an object")
        elif set(sub) - allowed:
            errors.append(f"'{name}' has unknown fields {sorted(set(sub) - allowed)}")
    grid = grid if isinstance(grid, dict) else {}
    ens = ens if isinstance(ens, dict) else {}
    basis = basis if isinstance(basis, dict) else {}
    solver = solver if isinstance(solver, dict) else {}

    cfg = ExperimentConfig(
        kind=raw.get("kind"),
        seed=seed_override if seed_override is not None else raw.get("seed", 0),
        T=grid.get("T", 1.0), N=grid.get("N", 50), M=ens.get("M", 100_000),
        basis=basis.get("kind", "polynomial"), degree=basis.get("degree", 3), bins=basis.get("bins", 32),
        market=_sub(errors, "market", raw.get("market"), MarketConfig,
                    {"s0", "mu", "sigma", "sigma_interval", "sigma_reference"}),
        payoff=_sub(errors, "payoff", raw.get("payoff"), PayoffConfig, {"kind", "strike", "asset"}),
        bounds=_sub(errors, "bounds", raw.get("bounds"), BoundsConfig, {"h", "g", "h_slope", "g_slope", "bound"}),
        generator=_sub(errors, "generator", raw.get("generator", {}), GeneratorConfig,
                       {"name", "params", "sigma_inv_bound"}) or GeneratorConfig(),
        method=solver.get("method", "lsmc"), max_iter=solver.get("max_iter", 50), tol=solver.get("tol", 1e-6),
        verify=raw.get("verify", True), steps=raw.get("steps", [25, 50, 100]),
        compare=raw.get("compare"), output=raw.get("output"),
    )
    errors.extend(validate_config(cfg, missing_ok="kind" not in raw))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(cfg: ExperimentConfig, missing_ok: bool = False) -> list[str]:
    """All problems with a config as a list of messages (empty when valid)."""
    errors: list[str] = []
    if cfg.kind not in KINDS:
        if not missing_ok:
            errors.append(f"'kind' must be one of {list(KINDS)}, got {cfg.kind!r}")
        return errors
    _num(errors, "seed", cfg.seed, lo=0, hi=2**63 - 1, integer=True)
    _num(errors, "grid.T", cfg.T, lo=0, strict_lo=True)
    _num(errors, "grid.N", cfg.N, lo=1, hi=10_000, integer=True)
    _num(errors, "ensemble.M", cfg.M, lo=2, hi=10_000_000, integer=True)
    if cfg.basis not in BASES:
        errors.append(f"'basis.kind' must be one of {list(BASES)}, got {cfg.basis!r}")
    _num(errors, "basis.degree", cfg.degree, lo=0, hi=8, integer=True)
    _num(errors, "basis.bins", cfg.bins, lo=1, hi=4096, integer=True)
    if not isinstance(cfg.verify, bool):
        errors.append("'verify' must be true or false")
    if cfg.kind == "validate":
        return errors

    if cfg.market is None:
        errors.append(f"missing required field 'market' for kind {cfg.kind!r}")
        d = 1
    else:
        errors.extend(_validate_market(cfg.market))
        d = len(cfg.market.s0) if isinstance(cfg.market.s0, list) else 1
    if cfg.payoff is None:
        errors.append(f"missing required field 'payoff' for kind {cfg.kind!r}")
    else:
        errors.extend(_validate_payoff(cfg.payoff, d))
    vol_mode = cfg.market is not None and cfg.market.sigma_interval is not None
    if cfg.bounds is None and not vol_mode:
        errors.append(f"missing required field 'bounds' for kind {cfg.kind!r}")
    elif cfg.bounds is not None:
        if vol_mode:
            errors.append("'bounds' must be omitted with 'market.sigma_interval' (derived from the interval)")
        errors.extend(_validate_bounds(cfg.bounds, d))
    errors.extend(_validate_generator(cfg.generator, cfg.kind))
    if cfg.method not in METHODS:
        errors.append(f"'solver.method' must be one of {list(METHODS)}, got {cfg.method!r}")
    _num(errors, "solver.max_iter", cfg.max_iter, lo=1, hi=1000, integer=True)
    _num(errors, "solver.tol", cfg.tol, lo=0, strict_lo=True)
    if cfg.kind == "converge":
        if not isinstance(cfg.steps, list) or not cfg.steps or not all(
                isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in cfg.steps):
            errors.append(f"'steps' must be a non-empty list of positive integers, got {cfg.steps!r}")
    if cfg.kind == "compare":
        errors.extend(_validate_compare(cfg.compare, d))
    elif cfg.compare is not None:
        errors.append("'compare' is only valid for kind 'compare'")
    return errors


def _validate_market(m: MarketConfig) -> list[str]:
    errors: list[str] = []
    if not isinstance(m.s0, list) or not m.s0:
        errors.append("'market.s0' must be a non-empty list")
        return errors
    d = len(m.s0)
    if _vec(errors, "market.s0", m.s0, d) and min(m.s0) <= 0:
        errors.append("'market.s0' entries must be positive")
    _vec(errors, "market.mu", m.mu, d)
    if (m.sigma is None) == (m.sigma_interval is None):
        errors.append("'market' needs exactly one of 'sigma' or 'sigma_interval'")
    if m.sigma is not None:
        if not isinstance(m.sigma, list) or len(m.sigma) != d or not all(
                isinstance(r, list) and len(r) == d for r in m.sigma):
            errors.append(f"'market.sigma' must be a {d}x{d} matrix")
        else:
            try:
                arr = np.array(m.sigma, dtype=float)
                if not np.all(np.isfinite(arr)) or abs(np.linalg.det(arr)) < 1e-14:
                    errors.append("'market.sigma' must be finite and invertible")
            except (TypeError, ValueError):
                errors.append("'market.sigma' must contain numbers")
    if m.sigma_interval is not None:
        if d != 1:
            errors.append("'market.sigma_interval' requires a single asset")
        if _vec(errors, "market.sigma_interval", m.sigma_interval, 2) and min(m.sigma_interval) <= 0:
            errors.append("'market.sigma_interval' entries must be positive")
        if m.sigma_reference is not None:
            _num(errors, "market.sigma_reference", m.sigma_reference, lo=0, strict_lo=True)
    elif m.sigma_reference is not None:
        errors.append("'market.sigma_reference' is only used with 'sigma_interval'")
    return errors


def _validate_payoff(p: PayoffConfig, d: int) -> list[str]:
    errors: list[str] = []
    if p.kind not in PAYOFF_KINDS:
        errors.append(f"'payoff.kind' must be one of {list(PAYOFF_KINDS)}, got {p.kind!r}")
    _num(errors, "payoff.strike", p.strike)
    _num(errors, "payoff.asset", p.asset, lo=0, hi=d - 1, integer=True)
    return errors


def _validate_bounds(b: BoundsConfig, d: int) -> list[str]:
    errors: list[str] = []
    ok = _vec(errors, "bounds.h", b.h, d) & _vec(errors, "bounds.g", b.g, d)
    for name, v in (("bounds.h_slope", b.h_slope), ("bounds.g_slope", b.g_slope)):
        if v is not None:
            _vec(errors, name, v, d)
    affine = b.h_slope is not None or b.g_slope is not None
    if ok and not affine and any(x > y for x, y in zip(b.h, b.g)):
        errors.append(f"'bounds.h' must not exceed 'bounds.g' componentwise (h={b.h}, g={b.g})")
    if b.bound is not None and _num(errors, "bounds.bound", b.bound, lo=0) and ok and not affine:
        if max(abs(x) for x in b.h + b.g) > b.bound:
            errors.append(f"'bounds.bound' {b.bound} is below max |h|, |g|")
    return errors


def _validate_generator(gcfg: GeneratorConfig, kind: str) -> list[str]:
    errors: list[str] = []
    if gcfg.name not in GENERATORS:
        errors.append(f"'generator.name' must be one of {list(GENERATORS)}, got {gcfg.name!r}")
        return errors
    if not isinstance(gcfg.params, dict):
        errors.append("'generator.params' must be an object")
        return errors
    allowed = {"zero": {"offset"}, "linear": {"alpha", "gamma", "phi", "offset"},
               "sine": {"a", "b", "offset"}}[gcfg.name]
    extra = sorted(set(gcfg.params) - allowed)
    if extra:
        errors.append(f"'generator.params' has unknown fields {extra} for {gcfg.name!r}")
    for k, v in gcfg.params.items():
        if k == "gamma":
            if not isinstance(v, list):
                errors.append("'generator.params.gamma' must be a list")
        elif k in allowed:
            _num(errors, f"generator.params.{k}", v)
    _num(errors, "generator.sigma_inv_bound", gcfg.sigma_inv_bound, lo=0, strict_lo=True)
    if kind == "price" and (gcfg.name != "zero" or gcfg.params):
        errors.append("kind 'price' uses the zero generator; use 'robust-solve' for other drivers")
    return errors


def _validate_compare(c, d: int) -> list[str]:
    if not isinstance(c, dict):
        return ["kind 'compare' needs a 'compare' object with overrides for the second problem"]
    errors: list[str] = []
    extra = sorted(set(c) - {"payoff", "bounds", "generator", "terminal_shift"})
    if extra:
        errors.append(f"'compare' has unknown fields {extra}")
    if "payoff" in c:
        p = _sub(errors, "compare.payoff", c["payoff"], PayoffConfig, {"kind", "strike", "asset"})
        if p is not None:
            errors.extend(_validate_payoff(p, d))
    if "bounds" in c:
        b = _sub(errors, "compare.bounds", c["bounds"], BoundsConfig, {"h", "g", "h_slope", "g_slope", "bound"})
        if b is not None:
            errors.extend(_validate_bounds(b, d))
    if "generator" in c:
        g = _sub(errors, "compare.generator", c["generator"], GeneratorConfig, {"name", "params", "sigma_inv_bound"})
        if g is not None:
            errors.extend(_validate_generator(g, "compare"))
    if "terminal_shift" in c:
        _num(errors, "compare.terminal_shift", c["terminal_shift"])
    return errors


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Read and validate a config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {str(path)!r}: {exc.strerror}"]) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config {str(path)!r} is not valid JSON: {exc}"]) from None
    return parse_config(raw, seed_override)
