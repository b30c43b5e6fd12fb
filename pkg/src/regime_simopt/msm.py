"""Markov-switching input model: emission families, filtering, prediction, simulation.

Regime labels are 0-based everywhere inside the package. CSV files use 1-based
labels, matching how regimes are usually numbered in data files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

ROW_TOL = 1e-12
PROB_TOL = 1e-10


class AllZeroLikelihood(ValueError):
    """Every regime assigns zero density to an observation."""

    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"all regimes give zero likelihood at observation {index}")


# ---------------------------------------------------------------------------
# Emission families
# ---------------------------------------------------------------------------


class Emission:
    """Base class for a per-regime observation distribution.

    ``params`` arrays are shaped ``(R, n_params)``; one row per regime.
    Kernel coordinates are the per-regime vector fed to the surrogate; they
    may differ from the natural parameterization (see ``Exponential``).
    """

    kind: str = ""
    param_names: tuple[str, ...] = ()
    obs_dim: int = 1

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def validate(self, params: np.ndarray) -> None:
        if params.ndim != 2 or params.shape[1] != self.n_params:
            raise ValueError(f"{self.kind} expects params of shape (R, {self.n_params}), got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("emission parameters must be finite")

    def logpdf(self, params: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Log density of every observation under every regime, shape ``(T, R)``."""
        raise NotImplementedError

    def sample(self, param_row: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sort_key(self, params: np.ndarray) -> np.ndarray:
        """Permutation putting regimes into canonical order."""
        return np.argsort(params[:, 0], kind="stable")

    def to_kernel(self, params: np.ndarray) -> np.ndarray:
        return np.asarray(params, dtype=float)

    def from_kernel(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=float)

    def kernel_floor(self) -> np.ndarray:
        """Smallest admissible value of each kernel coordinate (-inf if unbounded)."""
        return np.full(self.n_params, -np.inf)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Exponential(Emission):
    """Exponential(rate). Kernel coordinate is the mean ``1/rate``.

    The objectives in this package are smooth in the mean but very steep in
    the rate near zero, so the surrogate works on the mean scale.
    """

    kind = "exponential"
    param_names = ("rate",)

    def validate(self, params):
        super().validate(params)
        if np.any(params <= 0):
            raise ValueError("exponential rates must be > 0")

    def logpdf(self, params, values):
        x = np.asarray(values, dtype=float).reshape(-1, 1)
        rate = params[:, 0][None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(rate) - rate * x
        return np.where(x >= 0, out, -np.inf)

    def sample(self, param_row, size, rng):
        return rng.exponential(1.0 / param_row[0], size=size)

    def to_kernel(self, params):
        return 1.0 / np.asarray(params, dtype=float)

    def from_kernel(self, coords):
        return 1.0 / np.asarray(coords, dtype=float)

    def kernel_floor(self):
        return np.array([1e-6])


@dataclass(frozen=True)
class GaussianKnownVar(Emission):
    """Normal(mean, sd) with ``sd`` fixed and shared across regimes."""

    sd: float = 1.0
    kind = "gaussian_known_var"
    param_names = ("mean",)

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("sd must be > 0")

    def logpdf(self, params, values):
        x = np.asarray(values, dtype=float).reshape(-1, 1)
        z = (x - params[:, 0][None, :]) / self.sd
        return -0.5 * z * z - np.log(self.sd) - 0.5 * np.log(2 * np.pi)

    def sample(self, param_row, size, rng):
        return rng.normal(param_row[0], self.sd, size=size)

    def to_dict(self):
        return {"kind": self.kind, "sd": self.sd}


@dataclass(frozen=True)
class Gaussian(Emission):
    """Normal(mean, sd) with both parameters regime-specific."""

    kind = "gaussian"
    param_names = ("mean", "sd")

    def validate(self, params):
        super().validate(params)
        if np.any(params[:, 1] <= 0):
            raise ValueError("sd must be > 0")

    def logpdf(self, params, values):
        x = np.asarray(values, dtype=float).reshape(-1, 1)
        mu, sd = params[:, 0][None, :], params[:, 1][None, :]
        z = (x - mu) / sd
        return -0.5 * z * z - np.log(sd) - 0.5 * np.log(2 * np.pi)

    def sample(self, param_row, size, rng):
        return rng.normal(param_row[0], param_row[1], size=size)

    def kernel_floor(self):
        return np.array([-np.inf, 1e-6])


@dataclass(frozen=True)
class DiagonalBivariateGaussian(Emission):
    """Two independent normals; params ordered ``(mean1, mean2, sd1, sd2)``."""

    kind = "diag_bivariate_gaussian"
    param_names = ("mean1", "mean2", "sd1", "sd2")
    obs_dim = 2

    def validate(self, params):
        super().validate(params)
        if np.any(params[:, 2:] <= 0):
            raise ValueError("sd must be > 0")

    def logpdf(self, params, values):
        x = np.asarray(values, dtype=float).reshape(-1, 2)
        out = np.zeros((x.shape[0], params.shape[0]))
        for d in range(2):
            mu, sd = params[:, d][None, :], params[:, 2 + d][None, :]
            z = (x[:, d : d + 1] - mu) / sd
            out += -0.5 * z * z - np.log(sd) - 0.5 * np.log(2 * np.pi)
        return out

    def sample(self, param_row, size, rng):
        return rng.normal(param_row[:2], param_row[2:], size=(size, 2))

    def sort_key(self, params):
        return np.lexsort((params[:, 1], params[:, 0]))

    def kernel_floor(self):
        return np.array([-np.inf, -np.inf, 1e-6, 1e-6])


FAMILIES = {
    "exponential": Exponential,
    "gaussian_known_var": GaussianKnownVar,
    "gaussian": Gaussian,
    "diag_bivariate_gaussian": DiagonalBivariateGaussian,
}


def make_family(kind: str, **kwargs) -> Emission:
    try:
        cls = FAMILIES[kind]
    except KeyError:
        raise ValueError(f"unknown emission family {kind!r}; choose from {sorted(FAMILIES)}") from None
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Parameter vector and filter state
# ---------------------------------------------------------------------------


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def check_transition(A: np.ndarray) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"transition matrix must be square, got shape {A.shape}")
    if np.any(A < 0) or np.any(A > 1):
        raise ValueError("transition entries must lie in [0, 1]")
    if not np.allclose(A.sum(axis=1), 1.0, rtol=0, atol=ROW_TOL):
        raise ValueError("transition rows must sum to 1")


@dataclass(frozen=True)
class ThetaVector:
    """One full parameterization: per-regime emission params, transitions, initial law."""

    family: Emission
    params: np.ndarray
    transition: np.ndarray
    initial: np.ndarray | None = None

    def __post_init__(self):
        params = np.array(self.params, dtype=float)
        if params.ndim == 1:
            params = params.reshape(-1, self.family.n_params)
        A = np.array(self.transition, dtype=float)
        R = A.shape[0]
        init = np.full(R, 1.0 / R) if self.initial is None else np.array(self.initial, dtype=float)
        self.family.validate(params)
        check_transition(A)
        if params.shape[0] != R or init.shape != (R,):
            raise ValueError("emissions, transition rows and initial distribution disagree on R")
        if np.any(init < 0) or abs(init.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial distribution must be a probability vector")
        object.__setattr__(self, "params", _frozen(params))
        object.__setattr__(self, "transition", _frozen(A))
        object.__setattr__(self, "initial", _frozen(init))

    @property
    def n_regimes(self) -> int:
        return self.transition.shape[0]

    def permute(self, perm) -> "ThetaVector":
        """Relabel regimes so that new regime ``k`` is old regime ``perm[k]``."""
        perm = np.asarray(perm)
        return ThetaVector(
            self.family,
            self.params[perm],
            self.transition[np.ix_(perm, perm)],
            self.initial[perm],
        )

    def canonical(self) -> tuple["ThetaVector", np.ndarray]:
        perm = self.family.sort_key(self.params)
        return self.permute(perm), perm


@dataclass(frozen=True)
class FilterState:
    """``P(S_t = . | xi^t, theta)`` after ``t`` observations."""

    probs: np.ndarray
    t: int = 0

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
            raise ValueError("filter probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", _frozen(p))


@dataclass(frozen=True)
class ObservationStream:
    """Ordered observations with optional (0-based) ground-truth regimes."""

    values: np.ndarray
    regimes: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 2 and v.shape[1] == 1:
            v = v[:, 0]
        object.__setattr__(self, "values", _frozen(v))
        if self.regimes is not None:
            r = np.array(self.regimes, dtype=int)
            if r.shape != (v.shape[0],):
                raise ValueError("regimes must have one label per observation")
            if np.any(r < 0):
                raise ValueError("regime labels must be >= 0 (0-based)")
            r.setflags(write=False)
            object.__setattr__(self, "regimes", r)

    def __len__(self) -> int:
        return self.values.shape[0]

    def head(self, n: int) -> "ObservationStream":
        regimes = None if self.regimes is None else self.regimes[:n]
        return ObservationStream(self.values[:n], regimes)

    def to_csv(self, path) -> None:
        v = self.values.reshape(len(self), -1)
        header = ["t", "value"] + (["value2"] if v.shape[1] == 2 else [])
        if self.regimes is not None:
            header.append("regime")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = [i + 1] + [repr(float(a)) for a in v[i]]
                if self.regimes is not None:
                    row.append(int(self.regimes[i]) + 1)
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "ObservationStream":
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no data rows")
        cols = rows[0].keys()
        if "value" not in cols and "regime" not in cols:
            raise ValueError(f"{path}: expected a 'value' or 'regime' column")
        regimes = None
        if "regime" in cols:
            regimes = np.array([int(r["regime"]) - 1 for r in rows])
        if "value" not in cols:
            # label-only file; values are generated elsewhere
            return cls(np.full(len(rows), np.nan), regimes)
        vals = [[float(r["value"])] + ([float(r["value2"])] if "value2" in cols else []) for r in rows]
        return cls(np.array(vals), regimes)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def initial_state(theta: ThetaVector) -> FilterState:
    return FilterState(theta.initial, 0)


def _predict(state: FilterState, theta: ThetaVector) -> np.ndarray:
    return state.probs if state.t == 0 else state.probs @ theta.transition


def filter_step(state: FilterState, theta: ThetaVector, obs) -> FilterState:
    """Absorb one observation: Bayes update of the one-step regime prediction."""
    logp = theta.family.logpdf(theta.params, np.asarray(obs, dtype=float).reshape(1, -1))[0]
    if not np.any(np.isfinite(logp)):
        raise AllZeroLikelihood(state.t)
    lik = np.exp(logp - logp.max())
    post = _predict(state, theta) * lik
    total = post.sum()
    if total <= 0:
        raise AllZeroLikelihood(state.t)
    return FilterState(post / total, state.t + 1)


def forward(theta: ThetaVector, values) -> tuple[np.ndarray, np.ndarray]:
    """Run the filter over a whole sequence.

    Returns
    -------
    filtered : ndarray (T, R)
        ``P(S_t | xi^t)`` for every t.
    log_norm : ndarray (T,)
        ``log p(xi_t | xi^{t-1})``; these sum to the log likelihood.
    """
    values = np.asarray(values, dtype=float)
    logp = theta.family.logpdf(theta.params, values)
    return _forward_logp(logp, theta.transition, theta.initial)


def _forward_logp(logp: np.ndarray, A: np.ndarray, init: np.ndarray):
    T, R = logp.shape
    mx = logp.max(axis=1)
    bad = ~np.isfinite(mx)
    if np.any(bad):
        raise AllZeroLikelihood(int(np.argmax(bad)))
    lik = np.exp(logp - mx[:, None])
    filtered = np.empty((T, R))
    norm = np.empty(T)
    pred = init
    for t in range(T):
        p = pred * lik[t]
        s = p.sum()
        if s <= 0.0:
            raise AllZeroLikelihood(t)
        p = p / s
        filtered[t] = p
        norm[t] = s
        pred = p @ A
    return filtered, np.log(norm) + mx


def filter_stream(theta: ThetaVector, values) -> FilterState:
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return initial_state(theta)
    filtered, _ = forward(theta, values)
    return FilterState(filtered[-1], len(values))


def predictive_weights(state: FilterState, theta: ThetaVector) -> np.ndarray:
    """Next-stage regime probabilities ``w_l = sum_k A[k, l] P(S_t = k | xi^t)``."""
    w = state.probs @ theta.transition
    return w / w.sum()


def log_likelihood(theta: ThetaVector, stream) -> float:
    values = stream.values if isinstance(stream, ObservationStream) else np.asarray(stream, dtype=float)
    if len(values) == 0:
        raise ValueError("stream must be nonempty")
    _, log_norm = forward(theta, values)
    return float(log_norm.sum())


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def simulate_regimes(A: np.ndarray, init: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(A, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(t)
    s = np.empty(t, dtype=int)
    s[0] = min(int(np.searchsorted(np.cumsum(init), u[0], side="right")), len(init) - 1)
    for i in range(1, t):
        s[i] = np.searchsorted(cum[s[i - 1]], u[i], side="right")
    return s


def emit(family: Emission, params: np.ndarray, regimes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one observation per entry of ``regimes``."""
    shape = (len(regimes),) if family.obs_dim == 1 else (len(regimes), family.obs_dim)
    out = np.empty(shape)
    for k in range(params.shape[0]):
        idx = np.flatnonzero(regimes == k)
        if idx.size:
            out[idx] = family.sample(params[k], idx.size, rng)
    return out


def simulate(theta: ThetaVector, t: int, seed) -> ObservationStream:
    if t < 1:
        raise ValueError("t must be >= 1")
    rng = np.random.default_rng(seed)
    regimes = simulate_regimes(theta.transition, theta.initial, t, rng)
    return ObservationStream(emit(theta.family, theta.params, regimes, rng), regimes)


def stationary_distribution(A: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(A.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    v = np.abs(v)
    return v / v.sum()


def log_dirichlet_norm(alpha: np.ndarray) -> float:
    """log B(alpha) = sum lgamma(alpha_i) - lgamma(sum alpha)."""
    return float(np.sum(gammaln(alpha)) - gammaln(np.sum(alpha)))
