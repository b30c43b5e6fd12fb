"""Experiment orchestration: YAML specs, seeded macro-replications, GAP traces and reports."""

from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .msm import FilterState, ObservationStream, ThetaVector, forward, predictive_weights, simulate
from .optimizer import METHODS, RunConfig, StageFailure, StageResult, run_rsobso
from .posterior import GammaPrior, HdpPrior, PriorSpec, UniformPrior, posterior_draws
from .problems import Problem, Unavailable, gap, make_problem
from .sampling import derive_seed, lhs  # noqa: F401  (re-exported as part of the harness API)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Spec
# ---------------------------------------------------------------------------


def _prior_from(d: dict, family) -> PriorSpec:
    d = dict(d or {})
    kw = {"family": family}
    if "transition_concentration" in d:
        kw["transition_concentration"] = float(d["transition_concentration"])
    if "rate" in d:
        kw["rate"] = GammaPrior(*map(float, d["rate"]))
    if "mean" in d:
        kw["mean"] = UniformPrior(*map(float, d["mean"]))
    if "sd" in d:
        kw["sd"] = UniformPrior(*map(float, d["sd"]))
    if "hdp" in d:
        h = d["hdp"]
        kw["hdp"] = HdpPrior(GammaPrior(*map(float, h.get("gamma", (5, 1)))),
                             GammaPrior(*map(float, h.get("alpha", (5, 1)))), int(h.get("truncation", 10)))
    return PriorSpec(**kw)


@dataclass
class ExperimentSpec:
    """One declarative experiment: problem, truth or data, budget, priors, methods, macro count."""

    name: str
    problem: Problem
    run: RunConfig
    prior: PriorSpec
    methods: tuple = ("RSOBSO",)
    macros: int = 10
    seed: int = 0
    truth: ThetaVector | None = None
    stream_file: str | None = None
    out: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.macros < 1:
            raise ConfigError("macros must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        if self.truth is None and self.stream_file is None:
            raise ConfigError("need either a true model (truth) or a data stream file")
        if self.stream_file is not None and not Path(self.stream_file).exists():
            raise ConfigError(f"data file not found: {self.stream_file}")

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentSpec":
        try:
            pdef = d["problem"]
            pname = pdef if isinstance(pdef, str) else pdef["name"]
            pkw = {} if isinstance(pdef, str) else dict(pdef.get("params", {}))
            problem = make_problem(pname, **pkw)
            known = {f.name for f in fields(RunConfig)}
            run_kw = dict(d.get("run", {}))
            extra = set(run_kw) - known
            if extra:
                raise ConfigError(f"unknown run keys {sorted(extra)}")
            run = RunConfig(**run_kw)
            prior = _prior_from(d.get("prior", {}), problem.family)
            truth = None
            if "truth" in d:
                t = d["truth"]
                truth = ThetaVector(problem.family, np.array(t["params"], dtype=float),
                                    np.array(t["transition"], dtype=float), t.get("initial"))
            stream_file = None
            if "data" in d:
                stream_file = str((base or Path(".")) / d["data"]["stream"])
            methods = tuple(d.get("methods", [run.method]))
            return cls(d.get("name", pname), problem, run, prior, methods, int(d.get("macros", 10)),
                       int(d.get("seed", 0)), truth, stream_file, d.get("out"), d)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    @classmethod
    def from_yaml(cls, path) -> "ExperimentSpec":
        path = Path(path)
        try:
            d = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(d, path.parent)

    def stream(self, k: int) -> ObservationStream:
        """Observation stream of macro-replication ``k`` (shared by every method)."""
        if self.stream_file is not None:
            return ObservationStream.from_csv(self.stream_file)
        n = self.run.observations_needed() + 1
        return simulate(self.truth, n, derive_seed(self.seed, k, "stream"))

    def method_seed(self, k: int, method: str) -> int:
        return derive_seed(self.seed, k, "method", method)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass
class GapTrace:
    method: str
    macro: int
    seed: int
    stages: list
    x_hat: np.ndarray
    regimes: np.ndarray  # realized regime per stage (0-based, -1 if unknown)
    gaps: np.ndarray
    wall_time: float = 0.0
    mu_hat: np.ndarray | None = None
    n_regimes: np.ndarray | None = None

    @property
    def cum_gap(self) -> np.ndarray:
        return np.cumsum(self.gaps)


def trace_from_results(spec: ExperimentSpec, results: list[StageResult], stream: ObservationStream, method: str,
                       k: int, seed: int, wall: float) -> GapTrace:
    cfg = spec.run
    regimes, gaps = [], []
    for r in results:
        idx = cfg.h + (r.t - 1) * cfg.batch
        s = int(stream.regimes[idx]) if stream.regimes is not None and idx < len(stream) else -1
        g = np.nan
        if s >= 0 and spec.truth is not None:
            try:
                g = gap(spec.problem, r.x_hat, spec.truth.params[s])
            except Unavailable:
                pass
        regimes.append(s)
        gaps.append(g)
    return GapTrace(method, k, seed, [r.t for r in results], np.array([r.x_hat for r in results]),
                    np.array(regimes), np.array(gaps, dtype=float), wall,
                    np.array([r.mu_hat for r in results]), np.array([r.n_regimes for r in results]))


def _f(v) -> str:
    return repr(float(v))


def write_traces(traces: list[GapTrace], path) -> None:
    dx = traces[0].x_hat.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["macro", "method", "seed", "stage"] + [f"x{i + 1}" for i in range(dx)]
                   + ["regime", "gap", "cum_gap", "mu_hat", "n_regimes"])
        for tr in traces:
            cum = tr.cum_gap
            for i, st in enumerate(tr.stages):
                w.writerow([tr.macro, tr.method, tr.seed, st] + [_f(v) for v in tr.x_hat[i]]
                           + [int(tr.regimes[i]) + 1 if tr.regimes[i] >= 0 else "", _f(tr.gaps[i]), _f(cum[i]),
                              _f(tr.mu_hat[i]), int(tr.n_regimes[i])])


def read_traces(path) -> list[GapTrace]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    groups: dict = {}
    for r in rows:
        groups.setdefault((int(r["macro"]), r["method"]), []).append(r)
    out = []
    for (k, method), rs in groups.items():
        xs = sorted(c for c in rs[0] if c.startswith("x"))
        out.append(GapTrace(
            method, k, int(rs[0]["seed"]), [int(r["stage"]) for r in rs],
            np.array([[float(r[c]) for c in xs] for r in rs]),
            np.array([int(r["regime"]) - 1 if r["regime"] else -1 for r in rs]),
            np.array([float(r["gap"]) for r in rs]), 0.0,
            np.array([float(r["mu_hat"]) for r in rs]), np.array([int(r["n_regimes"]) for r in rs])))
    return out


def gap_report(traces: list[GapTrace], out=None) -> list[dict]:
    """Per-method, per-stage mean cumulative GAP with its standard error across macro-replications.

    ``se`` is the sample sd over macros divided by sqrt(#macros) (0 with a single
    trace). ``regime`` is the most common realized regime at that stage (1-based).
    """
    if not traces:
        raise ValueError("no traces to report")
    rows = []
    for method in dict.fromkeys(tr.method for tr in traces):
        group = [tr for tr in traces if tr.method == method]
        cum = np.vstack([tr.cum_gap for tr in group])
        n = cum.shape[0]
        mean = cum.mean(axis=0)
        se = cum.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
        for i, st in enumerate(group[0].stages):
            reg = Counter(int(tr.regimes[i]) for tr in group).most_common(1)[0][0]
            rows.append({"method": method, "stage": st, "mean_cum_gap": float(mean[i]), "se": float(se[i]),
                         "regime": reg + 1 if reg >= 0 else ""})
    if out is not None:
        out = Path(out)
        path = out / "summary.csv" if out.is_dir() else out
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "stage", "mean_cum_gap", "se", "regime"])
            for r in rows:
                w.writerow([r["method"], r["stage"], _f(r["mean_cum_gap"]), _f(r["se"]), r["regime"]])
    return rows


def write_designs(designs: list[tuple[int, str, object]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header_done = False
        for k, method, d in designs:
            if not header_done:
                w.writerow(["macro", "method"] + [f"x{i + 1}" for i in range(d.dx)]
                           + [f"lambda{i + 1}" for i in range(d.dl)] + ["y_bar", "m", "y_var"])
                header_done = True
            for j in range(len(d)):
                w.writerow([k, method] + [_f(v) for v in d.X[j]] + [_f(v) for v in d.L[j]]
                           + [_f(d.y[j]), int(d.m[j]), _f(d.y_var[j])])


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def run_experiment(spec: ExperimentSpec, out=None, methods=None) -> tuple[list[GapTrace], list[dict]]:
    """Run every (macro, method) pair; all methods of a macro share the same data stream.

    Writes ``traces.csv``, ``stages.csv``, ``summary.csv``, ``design.csv`` and
    ``timing.json`` when ``out`` is given. Wall-clock times go only to the JSON
    file so the CSVs are reproducible byte for byte. On failure the completed
    traces (including the stages a failing run finished) and a ``failure.json`` manifest are written before re-raising.
    """
    out = Path(out or spec.out) if (out or spec.out) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    methods = tuple(methods or spec.methods)
    traces, designs, timing = [], [], {}
    try:
        for k in range(spec.macros):
            stream = spec.stream(k)
            for method in methods:
                seed = spec.method_seed(k, method)
                cfg = replace(spec.run, method=method, seed=seed)
                t0 = time.perf_counter()
                results = run_rsobso(spec.problem, stream, cfg, spec.prior)
                wall = time.perf_counter() - t0
                traces.append(trace_from_results(spec, results, stream, method, k, seed, wall))
                designs.append((k, method, results[-1].design))
                timing[f"{method}/{k}"] = {"total": wall, "stages": [r.wall_time for r in results]}
                log.info("macro %d %s: final cumulative GAP %.4g (%.1fs)", k, method, traces[-1].cum_gap[-1], wall)
    except Exception as exc:
        if isinstance(exc, StageFailure) and exc.results:
            traces.append(trace_from_results(spec, exc.results, stream, method, k, seed, 0.0))
        if out is not None:
            if traces:
                write_traces(traces, out / "traces.csv")
            (out / "failure.json").write_text(json.dumps({
                "error": repr(exc), "traceback": traceback.format_exc(),
                "completed": [f"{t.method}/{t.macro}" for t in traces]}, indent=2))
        raise
    summary = gap_report(traces)
    if out is not None:
        write_traces(traces, out / "traces.csv")
        write_traces(traces, out / "stages.csv")
        gap_report(traces, out / "summary.csv")
        write_designs(designs, out / "design.csv")
        (out / "timing.json").write_text(json.dumps(timing, indent=2))
    return traces, summary


# ---------------------------------------------------------------------------
# Consistency study
# ---------------------------------------------------------------------------


def _mixture_objective(problem: Problem, theta: ThetaVector, values, x) -> float:
    filtered, _ = forward(theta, values)
    w = predictive_weights(FilterState(filtered[-1], len(values)), theta)
    return float(sum(w[l] * problem.true_z(x, theta.params[l]) for l in range(theta.n_regimes)))


def consistency_study(problem: Problem, theta_true: ThetaVector, x_fixed, t_grid, seed=0, macros: int = 20,
                      prior: PriorSpec | None = None, n_mc: int = 100, burn_in: int = 200) -> list[dict]:
    """Error of the posterior-averaged regime-weighted objective against its true-parameter value.

    For each macro-replication one long stream is simulated and every ``t`` in
    ``t_grid`` uses its first ``t`` observations. The signed error at ``t`` is
    ``E_post[sum_l w_l(theta) z(x, lam_l)] - sum_l w_l(theta_true) z(x, lam_l_true)``.

    Returns one row per ``t`` with the mean absolute error, its standard error
    and the sample sd of ``sqrt(t)`` times the signed error.
    """
    try:
        problem.true_z(x_fixed, theta_true.params[0])
    except Unavailable:
        raise
    prior = prior or PriorSpec(family=theta_true.family)
    t_grid = sorted(int(t) for t in t_grid)
    err = np.empty((macros, len(t_grid)))
    for k in range(macros):
        stream = simulate(theta_true, t_grid[-1], derive_seed(seed, k, "consistency-stream"))
        for j, t in enumerate(t_grid):
            vals = stream.values[:t]
            draws = posterior_draws(vals, theta_true.n_regimes, prior, n_mc, burn_in, 1,
                                    derive_seed(seed, k, t, "consistency-draws"))
            est = np.mean([
                float(sum(draws.weights[i, l] * problem.true_z(x_fixed, d.params[l]) for l in range(d.n_regimes)))
                for i, d in enumerate(draws.draws)])
            err[k, j] = est - _mixture_objective(problem, theta_true, vals, x_fixed)
    rows = []
    for j, t in enumerate(t_grid):
        a = np.abs(err[:, j])
        rows.append({"t": t, "mean_abs_error": float(a.mean()),
                     "se": float(a.std(ddof=1) / np.sqrt(macros)) if macros > 1 else 0.0,
                     "sd_scaled": float(np.std(np.sqrt(t) * err[:, j], ddof=1)) if macros > 1 else 0.0,
                     "errors": err[:, j].copy()})
    return rows


def write_consistency(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean_abs_error", "se", "sd_scaled"])
        for r in rows:
            w.writerow([r["t"], _f(r["mean_abs_error"]), _f(r["se"]), _f(r["sd_scaled"])])
