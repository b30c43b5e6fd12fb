"""Online optimization loop and its benchmark variants.

All methods share one stage loop and differ only in the stage objective, i.e.
in which (lambda atom, weight) mixture the GP is integrated against:

=============  ==============================================================
RSOBSO         posterior draws of every regime, weighted by predicted regime
RSOPSO         posterior-mean parameters of every regime, posterior-mean weights
NOBSO          posterior draws of a single-regime model, equal weights
NOPSO          posterior-mean parameter of a single-regime model
NOKSO          decision-only GP, inputs resampled from a KDE of the data
HDPHMM_RSOBSO  RSOBSO with the regime count re-estimated every stage
=============  ==============================================================
"""

from __future__ import annotations

import logging
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .acquisition import EiContext, optimize_ei
from .msm import ObservationStream, ThetaVector
from .posterior import (
    GibbsSampler,
    PosteriorDraws,
    PriorSpec,
    collect_draws,
    kde_fit,
    kde_sample,
    plug_in_estimate,
    weak_limit_hdp_sample,
)
from .problems import Problem
from .sampling import derive_seed, lhs
from .surrogate import (
    AggregateModel,
    DesignPoint,
    DesignSet,
    HyperBounds,
    KernelHyperparams,
    SurrogateModel,
    fit_hyperparams,
)

log = logging.getLogger(__name__)

METHODS = ("RSOBSO", "RSOPSO", "NOBSO", "NOPSO", "NOKSO", "HDPHMM_RSOBSO")


@dataclass(frozen=True)
class RunConfig:
    """Budget and algorithm settings for one online run.

    ``n0`` LHS decisions per regime form the initial design (``n0 * R`` points
    for every method, so budgets match). ``burn_in`` applies at the first
    stage; later stages warm-start the chain and use ``burn_in_warm``.
    """

    h: int = 100
    t_max: int = 25
    u: int = 30
    m: int = 100
    n_mc: int = 100
    n0: int = 10
    n_regimes: int = 2
    method: str = "RSOBSO"
    seed: int = 0
    burn_in: int = 200
    burn_in_warm: int = 200
    thin: int = 1
    batch: int = 1
    restarts: int = 16
    lam_pad: float = 0.2
    noise_mode: str = "heteroscedastic"
    window: int | None = None
    fit_points: int = 200
    fit_starts: int = 3
    hdp_truncation: int = 10
    hdp_steps: int = 100
    hdp_burn_in: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        counts = (self.h, self.t_max, self.m, self.n_mc, self.n0, self.n_regimes, self.thin, self.batch, self.restarts)
        if min(counts) < 1 or self.u < 0 or self.burn_in < 0 or self.burn_in_warm < 0:
            raise ValueError("all counts must be >= 1 (u, burn-in >= 0)")
        if self.hdp_truncation < 2:
            raise ValueError("hdp_truncation must be >= 2")

    def observations_needed(self) -> int:
        return self.h + self.t_max * self.batch


class StageFailure(RuntimeError):
    """A stage raised; ``results`` holds the stages completed before it."""

    def __init__(self, t: int, results: list, cause: BaseException):
        super().__init__(f"stage {t} failed: {cause!r}")
        self.t = t
        self.results = results
        self.cause = cause


@dataclass
class StageResult:
    """Outcome of one stage; ``t`` is 1-based."""

    t: int
    x_hat: np.ndarray
    mu_hat: float
    n_points: int
    wall_time: float
    n_regimes: int
    weights: np.ndarray | None = None
    theta_hat: ThetaVector | None = None
    n_max: int | None = None
    s_max: int | None = None
    design: DesignSet | None = field(default=None, repr=False)


@dataclass
class _Objective:
    """Stage mixture: lambda atoms (kernel coordinates) and their weights."""

    atoms: np.ndarray
    omega: np.ndarray
    grid: np.ndarray  # (N, R, dl) atoms arranged by draw and regime, for the initial design
    weights: np.ndarray | None = None
    theta_hat: ThetaVector | None = None
    kde: object = None


# ---------------------------------------------------------------------------
# Regime-count inference
# ---------------------------------------------------------------------------


def infer_regime_count(stream, n_max: int, m_steps: int, tau: float, prior: PriorSpec, seed=None,
                       burn_in: int = 100) -> tuple[int, int]:
    """Threshold the HDP-HMM global weights to count active regimes.

    Each retained step counts the components with ``beta_j >= tau``. Returns the
    maximum and the mode (ties to the smaller count) of those counts, with the
    mode clamped to at least 1 and the maximum to at least the mode.
    """
    if n_max < 2 or m_steps < 1:
        raise ValueError("need n_max >= 2 and m_steps >= 1")
    steps = weak_limit_hdp_sample(stream, n_max, prior, m_steps, seed, burn_in=burn_in)
    counts = [int(np.sum(st.beta >= tau)) for st in steps]
    freq = Counter(counts)
    top = max(freq.values())
    r_hat = min(c for c, f in freq.items() if f == top)
    if r_hat < 1:
        warnings.warn("no component passes the threshold; regime count clamped to 1", RuntimeWarning)
        r_hat = 1
    s_max = max(max(counts), r_hat)
    return s_max, r_hat


# ---------------------------------------------------------------------------
# Stage loop
# ---------------------------------------------------------------------------


class _Runner:
    def __init__(self, problem: Problem, stream, cfg: RunConfig, prior: PriorSpec):
        self.problem = problem
        self.values = stream.values if isinstance(stream, ObservationStream) else np.asarray(stream, dtype=float)
        if len(self.values) < cfg.h + (cfg.t_max - 1) * cfg.batch:
            raise ValueError(f"stream has {len(self.values)} observations; need {cfg.observations_needed()}")
        self.cfg = cfg
        self.prior = replace(prior, family=problem.family) if prior.family != problem.family else prior
        self.family = problem.family
        self.rng_post = np.random.default_rng(derive_seed(cfg.seed, "posterior"))
        self.rng_sim = np.random.default_rng(derive_seed(cfg.seed, "simulate"))
        self.rng_ei = np.random.default_rng(derive_seed(cfg.seed, "acquire"))
        self.rng_design = np.random.default_rng(derive_seed(cfg.seed, "design"))
        self.rng_fit = np.random.default_rng(derive_seed(cfg.seed, "fit"))
        self.sampler: GibbsSampler | None = None
        self.hyper: KernelHyperparams | None = None
        self.decision_only = cfg.method == "NOKSO"

    # -- posterior / stage objective -------------------------------------

    def _draws(self, data: np.ndarray, R: int) -> PosteriorDraws:
        cfg = self.cfg
        if self.sampler is None or self.sampler.R != R:
            self.sampler = GibbsSampler(data, R, self.prior, self.rng_post)
            burn = cfg.burn_in
        else:
            self.sampler.extend(data[len(self.sampler.values):])
            burn = cfg.burn_in_warm
        return collect_draws(self.sampler, cfg.n_mc, burn, cfg.thin)

    def objective(self, data: np.ndarray, R: int) -> _Objective:
        method, fam = self.cfg.method, self.family
        if method == "NOKSO":
            kde = kde_fit(data)
            return _Objective(np.zeros((1, 0)), np.ones(1), np.zeros((1, 1, 0)), kde=kde)
        single = method in ("NOBSO", "NOPSO")
        draws = self._draws(data, 1 if single else R)
        theta_hat, w_hat = plug_in_estimate(draws)
        if method in ("RSOPSO", "NOPSO"):
            atoms = fam.to_kernel(theta_hat.params)
            return _Objective(atoms, w_hat, atoms[None, :, :], w_hat, theta_hat)
        grid = np.stack([fam.to_kernel(d.params) for d in draws.draws])
        omega = (draws.weights / draws.n_mc).reshape(-1)
        return _Objective(grid.reshape(-1, grid.shape[-1]), omega, grid, draws.weights.mean(axis=0), theta_hat)

    # -- simulation -------------------------------------------------------

    def evaluate(self, x, lam, obj: _Objective) -> DesignPoint:
        seed = int(self.rng_sim.integers(2**63 - 1))
        m = self.cfg.m
        if self.decision_only:
            kde = obj.kde
            y = self.problem.simulate_inputs(x, lambda n, rng: kde_sample(kde, n, rng), m, seed)
        else:
            y = self.problem.simulate(x, self.family.from_kernel(np.asarray(lam).reshape(1, -1))[0], m, seed)
        var = float(np.var(y, ddof=1)) if m > 1 else 0.0
        return DesignPoint(x, lam, float(np.mean(y)), m, var)

    def initial_design(self, obj: _Objective, R: int) -> DesignSet:
        cfg, p = self.cfg, self.problem
        n = cfg.n0 * R
        X = lhs(n, p.bounds, self.rng_design)
        N, Rg = obj.grid.shape[0], obj.grid.shape[1]
        points = []
        for j in range(n):
            lam = obj.grid[(j // Rg) % N, j % Rg]
            points.append(self.evaluate(X[j], lam, obj))
        return DesignSet.from_points(points)

    # -- surrogate --------------------------------------------------------

    def fit(self, design: DesignSet) -> SurrogateModel:
        cfg, p = self.cfg, self.problem
        spans = np.concatenate([p.bounds[:, 1] - p.bounds[:, 0], np.ptp(design.L, axis=0) if design.dl else []])
        bounds = HyperBounds.from_design(design, spans)
        self.hyper = fit_hyperparams(design, bounds, self.rng_fit, cfg.fit_starts, cfg.noise_mode,
                                     cfg.fit_points, init=self.hyper)
        return SurrogateModel(design, self.hyper, cfg.noise_mode, cfg.window)

    def decide(self, agg: AggregateModel) -> tuple[np.ndarray, float]:
        """Argmin of the aggregate mean over evaluated decisions, then a bounded gradient polish."""
        X = np.unique(agg.surrogate.design.X, axis=0)
        mu = agg.mean(X)
        order = np.argsort(mu, kind="stable")
        best_x, best_mu = X[order[0]].copy(), float(mu[order[0]])
        b = self.problem.bounds
        for j in order[:3]:
            res = minimize(lambda v: float(agg.mean(v[None, :])[0]), X[j], jac=lambda v: agg.mean_grad(v),
                           method="L-BFGS-B", bounds=list(map(tuple, b)))
            val = float(agg.mean(res.x[None, :])[0])
            if val < best_mu - 1e-12:
                best_x, best_mu = np.clip(res.x, b[:, 0], b[:, 1]), val
        return best_x, best_mu

    def stage(self, t: int, data: np.ndarray, R: int, design: DesignSet | None) -> tuple[StageResult, DesignSet]:
        cfg = self.cfg
        start = time.perf_counter()
        obj = self.objective(data, R)
        if design is None:
            design = self.initial_design(obj, R)
        model = self.fit(design)
        agg = AggregateModel(model, obj.atoms, obj.omega)
        floor = None if self.decision_only else self.family.kernel_floor()
        for _ in range(cfg.u):
            ctx = EiContext(agg, self.problem.bounds[:, 0], self.problem.bounds[:, 1], cfg.m,
                            lam_floor=floor, lam_pad=cfg.lam_pad, restarts=cfg.restarts)
            x_new, lam_new, _ = optimize_ei(ctx, seed=self.rng_ei)
            point = self.evaluate(x_new, lam_new, obj)
            model = model.add_point(point)
            agg = agg.with_surrogate(model)
        x_hat, mu_hat = self.decide(agg)
        fitted = 0 if self.decision_only else (1 if cfg.method in ("NOBSO", "NOPSO") else R)
        res = StageResult(t + 1, x_hat, mu_hat, len(model.design), time.perf_counter() - start,
                          fitted, obj.weights, obj.theta_hat, design=model.design)
        log.info("%s stage %d: x_hat=%s mu=%.4g n=%d (%.1fs)", cfg.method, t + 1, np.round(x_hat, 4), mu_hat,
                 res.n_points, res.wall_time)
        return res, model.design


def _data_at(values: np.ndarray, cfg: RunConfig, t: int) -> np.ndarray:
    return values[: cfg.h + t * cfg.batch]


def run_rsobso(problem: Problem, stream, config: RunConfig, prior: PriorSpec | None = None) -> list[StageResult]:
    """Online loop with the configured stage objective (RSOBSO unless ``config.method`` says otherwise).

    Stage ``t`` (1-based) sees the first ``h + (t-1) * batch`` observations and
    picks a decision for the period that follows. Design points accumulate
    across stages.
    """
    if config.method == "HDPHMM_RSOBSO":
        return run_hdphmm_rsobso(problem, stream, config, prior)
    runner = _Runner(problem, stream, config, prior or PriorSpec(family=problem.family))
    results, design = [], None
    for t in range(config.t_max):
        try:
            res, design = runner.stage(t, _data_at(runner.values, config, t), config.n_regimes, design)
        except Exception as exc:
            raise StageFailure(t + 1, results, exc) from exc
        results.append(res)
    return results


def run_benchmark(problem: Problem, stream, config: RunConfig, prior: PriorSpec | None = None) -> list[StageResult]:
    if config.method not in ("RSOPSO", "NOBSO", "NOPSO", "NOKSO"):
        raise ValueError(f"{config.method} is not a benchmark method")
    return run_rsobso(problem, stream, config, prior)


def run_hdphmm_rsobso(problem: Problem, stream, config: RunConfig, prior: PriorSpec | None = None) -> list[StageResult]:
    """Online loop where each stage first re-estimates the regime count.

    The truncation level starts at ``hdp_truncation`` and is reset to
    ``s_max + 1`` after every stage. The kernel's lambda dimension is the
    per-regime parameter count, so design points stay usable when the count
    changes.
    """
    cfg = replace(config, method="HDPHMM_RSOBSO")
    runner = _Runner(problem, stream, cfg, prior or PriorSpec(family=problem.family))
    rng_hdp = np.random.default_rng(derive_seed(cfg.seed, "hdp"))
    n_max = cfg.hdp_truncation
    results, design = [], None
    for t in range(cfg.t_max):
        data = _data_at(runner.values, cfg, t)
        tau = 1.0 / np.sqrt(len(data))
        try:
            s_max, r_hat = infer_regime_count(data, n_max, cfg.hdp_steps, tau, runner.prior, rng_hdp,
                                              cfg.hdp_burn_in)
            res, design = runner.stage(t, data, r_hat, design)
        except Exception as exc:
            raise StageFailure(t + 1, results, exc) from exc
        res.n_max, res.s_max = n_max, s_max
        results.append(res)
        n_max = max(s_max + 1, 2)
    return results
