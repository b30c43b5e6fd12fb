"""Test problems: two quadratics with analytic truth, an (s, S) inventory system, a two-asset CEQ portfolio."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .msm import DiagonalBivariateGaussian, Emission, Exponential, GaussianKnownVar


class Unavailable(RuntimeError):
    """No analytic truth (or no labels) to evaluate against."""


class InvalidPolicy(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


Sampler = Callable[[int, np.random.Generator], np.ndarray]


@dataclass
class Problem:
    """Base problem: ``y(x, xi)`` simulated under inputs drawn from an emission family.

    Subclasses implement ``_simulate(x, draw, m, rng)``, where ``draw(size, rng)``
    returns input samples; this lets the same simulator run on parametric
    inputs and on KDE-resampled inputs.
    """

    name: str = ""
    bounds: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    family: Emission = field(default_factory=Exponential)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)

    @property
    def d_x(self) -> int:
        return self.bounds.shape[0]

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float).reshape(-1), self.bounds[:, 0], self.bounds[:, 1])

    def param_sampler(self, params) -> Sampler:
        row = np.asarray(params, dtype=float).reshape(-1)
        return lambda size, rng: self.family.sample(row, size, rng)

    def simulate(self, x, params, m: int, seed=None) -> np.ndarray:
        """``m`` i.i.d. outputs at decision ``x`` with inputs from ``family(params)``."""
        return self.simulate_inputs(x, self.param_sampler(params), m, seed)

    def simulate_inputs(self, x, draw: Sampler, m: int, seed=None) -> np.ndarray:
        if m < 1:
            raise ValueError("m must be >= 1")
        out = self._simulate(np.asarray(x, dtype=float).reshape(-1), draw, m, np.random.default_rng(seed))
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{self.name}: non-finite simulation output")
        return out

    def _simulate(self, x, draw: Sampler, m: int, rng) -> np.ndarray:
        raise NotImplementedError

    def true_z(self, x, params) -> float:
        raise Unavailable(f"{self.name} has no analytic objective")

    def true_optimum(self, params) -> tuple[np.ndarray, float]:
        raise Unavailable(f"{self.name} has no analytic optimum")


@dataclass
class QuadExp(Problem):
    """``y(x, xi) = (x - xi)^2 + 10 xi`` with exponential input of a given rate."""

    name: str = "quad_exp"
    bounds: np.ndarray = field(default_factory=lambda: np.array([[0.0, 50.0]]))
    family: Emission = field(default_factory=Exponential)

    def _simulate(self, x, draw, m, rng):
        xi = draw(m, rng)
        return (x[0] - xi) ** 2 + 10.0 * xi

    def true_z(self, x, params) -> float:
        mu = 1.0 / float(np.ravel(params)[0])
        x = float(np.ravel(x)[0])
        return (x - mu) ** 2 + mu * mu + 10.0 * mu

    def true_optimum(self, params):
        mu = 1.0 / float(np.ravel(params)[0])
        return np.array([mu]), 10.0 * mu + mu * mu


@dataclass
class QuadGauss(Problem):
    """``y(x, xi) = (x1 - 10)^2 + (x2 - 20)^2 + xi (4 x1 + 8 x2)`` with normal input of sd 3."""

    name: str = "quad_gauss"
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-20.0, 20.0], [-40.0, 40.0]]))
    family: Emission = field(default_factory=lambda: GaussianKnownVar(3.0))

    def _simulate(self, x, draw, m, rng):
        xi = draw(m, rng)
        return (x[0] - 10.0) ** 2 + (x[1] - 20.0) ** 2 + xi * (4.0 * x[0] + 8.0 * x[1])

    def true_z(self, x, params) -> float:
        mu = float(np.ravel(params)[0])
        x = np.ravel(x)
        return float((x[0] - 10.0) ** 2 + (x[1] - 20.0) ** 2 + mu * (4.0 * x[0] + 8.0 * x[1]))

    def true_optimum(self, params):
        mu = float(np.ravel(params)[0])
        return np.array([10.0 - 2.0 * mu, 20.0 - 4.0 * mu]), 200.0 * mu - 20.0 * mu * mu


# ---------------------------------------------------------------------------
# Inventory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InventoryParams:
    fixed_cost: float = 100.0
    unit_cost: float = 1.0
    holding_cost: float = 1.0
    backorder_cost: float = 100.0
    horizon: int = 500
    warmup: int = 50

    def __post_init__(self):
        costs = (self.fixed_cost, self.unit_cost, self.holding_cost, self.backorder_cost)
        if min(costs) < 0 or self.horizon < 1 or self.warmup < 0:
            raise ValueError("costs must be >= 0, horizon >= 1, warmup >= 0")


def inventory_cost_paths(s, S, demand: np.ndarray, p: InventoryParams) -> np.ndarray:
    """Average cost per period for policies ``(s, S)`` against demand paths.

    ``s`` and ``S`` broadcast against ``demand[..., 0]``; ``demand`` has periods
    on its last axis, the first ``p.warmup`` of which are run but not costed.
    Each period: review; if inventory < s order up to S (arrives at once); demand
    is subtracted; holding on positive and backorder on negative end stock.
    """
    s = np.asarray(s, dtype=float)
    S = np.asarray(S, dtype=float)
    if np.any(s >= S):
        raise InvalidPolicy("need s < S")
    shape = np.broadcast_shapes(s.shape, S.shape, demand.shape[:-1])
    inv = np.broadcast_to(S, shape).astype(float).copy()
    total = np.zeros(shape)
    n_per = demand.shape[-1]
    for k in range(n_per):
        order = inv < s
        q = np.where(order, S - inv, 0.0)
        inv = inv + q
        inv = inv - demand[..., k]
        cost = order * (p.fixed_cost + p.unit_cost * q)
        cost = cost + p.holding_cost * np.maximum(inv, 0.0) + p.backorder_cost * np.maximum(-inv, 0.0)
        if k >= p.warmup:
            total += cost
    return total / (n_per - p.warmup)


def inventory_long_run_cost(s, S, rate, p: InventoryParams = InventoryParams()) -> np.ndarray:
    """Exact stationary cost per period for exponential demand (renewal-reward).

    Between orders the stock starts at S and the number of periods until it
    drops below s is 1 + Poisson(rate (S - s)), so the expected cycle length is
    ``1 + rate (S - s)``; the undershoot below s is again exponential.
    """
    s, S, lam = np.asarray(s, float), np.asarray(S, float), np.asarray(rate, float)
    h, b = p.holding_cost, p.backorder_cost
    cycle = 1.0 + lam * (S - s)
    per_cycle = p.fixed_cost + h * (s - 1.0 / lam + 0.5 * lam * (S * S - s * s)) + (h + b) / lam * np.exp(-lam * s)
    return p.unit_cost / lam + per_cycle / cycle


@dataclass
class Inventory(Problem):
    """(s, S) periodic-review inventory with exponential per-period demand of a given rate."""

    name: str = "inventory"
    bounds: np.ndarray = field(default_factory=lambda: np.array([[1.0, 69.0], [70.0, 250.0]]))
    family: Emission = field(default_factory=Exponential)
    params: InventoryParams = field(default_factory=InventoryParams)

    def _simulate(self, x, draw, m, rng):
        n = self.params.warmup + self.params.horizon
        demand = np.maximum(draw(m * n, rng), 0.0).reshape(m, n)
        return inventory_cost_paths(x[0], x[1], demand, self.params)

    def true_z(self, x, params) -> float:
        x = np.ravel(x)
        return float(inventory_long_run_cost(x[0], x[1], float(np.ravel(params)[0]), self.params))

    def true_optimum(self, params):
        rate = float(np.ravel(params)[0])
        b = self.bounds
        s_grid = np.linspace(b[0, 0], b[0, 1], 69)
        S_grid = np.linspace(b[1, 0], b[1, 1], 181)
        Z = inventory_long_run_cost(s_grid[:, None], S_grid[None, :], rate, self.params)
        i, j = np.unravel_index(np.argmin(Z), Z.shape)
        res = minimize(lambda v: self.true_z(v, [rate]), [s_grid[i], S_grid[j]], method="L-BFGS-B",
                       bounds=list(map(tuple, b)))
        if res.fun <= Z[i, j]:
            return res.x, float(res.fun)
        return np.array([s_grid[i], S_grid[j]]), float(Z[i, j])


def inventory_grid_search(rate: float, s_values, S_values, reps: int, seed=None,
                          params: InventoryParams = InventoryParams()) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force simulated cost on an (s, S) grid with common random numbers.

    Returns the mean cost matrix ``(len(s), len(S))`` and its standard errors.
    """
    rng = np.random.default_rng(seed)
    s_values, S_values = np.asarray(s_values, float), np.asarray(S_values, float)
    n = params.warmup + params.horizon
    demand = rng.exponential(1.0 / rate, size=(reps, n))
    out = np.empty((len(s_values), len(S_values), reps))
    for i, s in enumerate(s_values):
        out[i] = inventory_cost_paths(s, S_values[:, None], demand[None, :, :], params)
    return out.mean(axis=2), out.std(axis=2, ddof=1) / np.sqrt(reps)


# ---------------------------------------------------------------------------
# Portfolio
# ---------------------------------------------------------------------------


def ceq(x1: float, returns: np.ndarray) -> float:
    """Certainty equivalent ``mean(r*) - var(r*)/2`` of ``r* = x1 r1 + (1 - x1) r2`` (unbiased variance)."""
    r = np.asarray(returns, dtype=float).reshape(-1, 2)
    if r.shape[0] < 2:
        raise InsufficientSamples("CEQ needs at least 2 return samples")
    rp = x1 * r[:, 0] + (1.0 - x1) * r[:, 1]
    return float(rp.mean() - 0.5 * rp.var(ddof=1))


def portfolio_ceq(x, returns) -> float:
    """Negated CEQ for the allocation ``(x1, 1 - x1)``; the framework minimizes."""
    x1 = float(np.ravel(x)[0])
    if not 0.0 <= x1 <= 1.0:
        raise ValueError("x1 must lie in [0, 1]")
    return -ceq(x1, returns)


@dataclass
class Portfolio(Problem):
    """Two-asset allocation ``(x1, 1 - x1)``; one replication is the negated CEQ of a return batch."""

    name: str = "portfolio"
    bounds: np.ndarray = field(default_factory=lambda: np.array([[0.0, 1.0]]))
    family: Emission = field(default_factory=DiagonalBivariateGaussian)
    samples_per_rep: int = 20

    def _simulate(self, x, draw, m, rng):
        k = self.samples_per_rep
        r = np.asarray(draw(m * k, rng), dtype=float).reshape(m, k, 2)
        rp = x[0] * r[:, :, 0] + (1.0 - x[0]) * r[:, :, 1]
        return -(rp.mean(axis=1) - 0.5 * rp.var(axis=1, ddof=1))

    def true_z(self, x, params) -> float:
        mu1, mu2, sd1, sd2 = np.ravel(params)
        x1 = float(np.ravel(x)[0])
        mean = x1 * mu1 + (1 - x1) * mu2
        var = x1 * x1 * sd1 * sd1 + (1 - x1) ** 2 * sd2 * sd2
        return float(-(mean - 0.5 * var))

    def true_optimum(self, params):
        mu1, mu2, sd1, sd2 = np.ravel(params)
        # stationary point of the concave CEQ, clipped to the simplex
        denom = sd1 * sd1 + sd2 * sd2
        x1 = float(np.clip((mu1 - mu2 + sd2 * sd2) / denom, 0.0, 1.0))
        return np.array([x1]), self.true_z([x1], params)

    def realized(self, x, r) -> float:
        """Realized portfolio return for one period (used on real data)."""
        x1 = float(np.ravel(x)[0])
        r = np.ravel(r)
        return float(x1 * r[0] + (1 - x1) * r[1])


@dataclass(frozen=True)
class ReturnTable:
    """Monthly two-asset returns (decimal) with their dates."""

    dates: tuple
    returns: np.ndarray

    @classmethod
    def from_csv(cls, path, start: str | None = None, end: str | None = None) -> "ReturnTable":
        """Read ``date, ret1, ret2`` with returns in percent; keep ``start <= date <= end``."""
        dates, rows = [], []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                d = rec["date"].strip()
                if (start and d < start) or (end and d > end):
                    continue
                if rec["ret1"].strip() == "" or rec["ret2"].strip() == "":
                    raise ValueError(f"{path}: missing return on {d}")
                dates.append(d)
                rows.append([float(rec["ret1"]) / 100.0, float(rec["ret2"]) / 100.0])
        if not rows:
            raise ValueError(f"{path}: no rows in the requested span")
        r = np.array(rows)
        r.setflags(write=False)
        return cls(tuple(dates), r)

    def __len__(self) -> int:
        return len(self.dates)


# ---------------------------------------------------------------------------
# Registry and regret
# ---------------------------------------------------------------------------


PROBLEMS = {"quad_exp": QuadExp, "quad_gauss": QuadGauss, "inventory": Inventory, "portfolio": Portfolio}


def make_problem(name: str, **kwargs) -> Problem:
    try:
        cls = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    if cls is Inventory and "params" in kwargs and isinstance(kwargs["params"], dict):
        kwargs["params"] = InventoryParams(**kwargs["params"])
    return cls(**kwargs)


def gap(problem: Problem, x_hat, params, x_star=None, m_gap: int = 10_000, seed=0) -> float:
    """Regret ``z(x_hat, lam) - z(x*, lam)`` under the realized regime's parameters.

    Uses the analytic objective when the problem has one. Otherwise both terms
    are estimated from ``m_gap`` replications sharing one seed (common random
    numbers), which needs ``x_star``.
    """
    if params is None:
        raise Unavailable("no realized regime parameters")
    try:
        _, z_star = problem.true_optimum(params)
        return problem.true_z(x_hat, params) - z_star
    except Unavailable:
        if x_star is None:
            raise
    z_hat = problem.simulate(x_hat, params, m_gap, seed).mean()
    return float(z_hat - problem.simulate(x_star, params, m_gap, seed).mean())
