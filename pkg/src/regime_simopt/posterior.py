"""Posterior inference for the Markov-switching input model.

Blocked Gibbs: forward-filtering backward-sampling of the hidden path,
conjugate Dirichlet draws for transition rows, and per-regime emission
updates (exact where conjugate, slice sampling otherwise). Also the
weak-limit HDP-HMM sampler used to infer the regime count, and a Gaussian
KDE input model for the nonparametric benchmark.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr, ndtri

from .msm import (
    DiagonalBivariateGaussian,
    Emission,
    Exponential,
    Gaussian,
    GaussianKnownVar,
    ObservationStream,
    ThetaVector,
    _forward_logp,
    forward,
    predictive_weights,
    FilterState,
)


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError("Gamma prior hyperparameters must be > 0")

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -np.inf
        return self.shape * math.log(self.rate) - math.lgamma(self.shape) + (self.shape - 1) * math.log(x) - self.rate * x

    @property
    def mean(self) -> float:
        return self.shape / self.rate


@dataclass(frozen=True)
class UniformPrior:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("uniform prior needs lo < hi")

    @property
    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class HdpPrior:
    gamma: GammaPrior = GammaPrior(5.0, 1.0)
    alpha: GammaPrior = GammaPrior(5.0, 1.0)
    truncation: int = 10


@dataclass(frozen=True)
class PriorSpec:
    """Priors for one emission family plus the transition and HDP hyperpriors.

    ``rate`` is used by exponential emissions, ``mean``/``sd`` by the Gaussian
    families (``sd`` only where the sd is unknown).
    """

    family: Emission = field(default_factory=Exponential)
    transition_concentration: float = 1.0
    rate: GammaPrior = GammaPrior(1.0, 0.1)
    mean: UniformPrior = UniformPrior(0.0, 50.0)
    sd: UniformPrior = UniformPrior(0.1, 20.0)
    hdp: HdpPrior = HdpPrior()

    def __post_init__(self):
        if not self.transition_concentration > 0:
            raise ValueError("transition concentration must be > 0")
        if self.sd.lo <= 0:
            raise ValueError("sd prior must have a positive lower bound")

    def sample_emission(self, rng: np.random.Generator) -> np.ndarray:
        """One regime's parameters drawn from the prior."""
        f = self.family
        if isinstance(f, Exponential):
            return np.array([rng.gamma(self.rate.shape, 1.0 / self.rate.rate)])
        if isinstance(f, GaussianKnownVar):
            return np.array([rng.uniform(self.mean.lo, self.mean.hi)])
        if isinstance(f, Gaussian):
            return np.array([rng.uniform(self.mean.lo, self.mean.hi), rng.uniform(self.sd.lo, self.sd.hi)])
        if isinstance(f, DiagonalBivariateGaussian):
            m = rng.uniform(self.mean.lo, self.mean.hi, size=2)
            s = rng.uniform(self.sd.lo, self.sd.hi, size=2)
            return np.concatenate([m, s])
        raise TypeError(f"no prior defined for {type(f).__name__}")

    def prior_mean(self) -> np.ndarray:
        f = self.family
        if isinstance(f, Exponential):
            return np.array([self.rate.mean])
        if isinstance(f, GaussianKnownVar):
            return np.array([self.mean.mean])
        if isinstance(f, Gaussian):
            return np.array([self.mean.mean, self.sd.mean])
        return np.array([self.mean.mean] * 2 + [self.sd.mean] * 2)


# ---------------------------------------------------------------------------
# Small samplers
# ---------------------------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draw that stays valid for tiny concentrations.

    Uses Gamma(a) = Gamma(a + 1) * U**(1/a) in log space so that components
    with a << 1 underflow gracefully instead of producing NaNs.
    Rows of a 2-d ``alpha`` are drawn independently.
    """
    alpha = np.asarray(alpha, dtype=float)
    logg = np.log(rng.gamma(alpha + 1.0)) + np.log(rng.random(alpha.shape)) / alpha
    g = np.exp(logg - logg.max(axis=-1, keepdims=True))
    return g / g.sum(axis=-1, keepdims=True)


def truncnorm_draw(mean: float, sd: float, lo: float, hi: float, rng: np.random.Generator) -> float:
    a, b = (lo - mean) / sd, (hi - mean) / sd
    sign = 1.0
    if a > 0:
        # work in the lower tail where ndtr keeps precision
        a, b, sign = -b, -a, -1.0
    pa, pb = ndtr(a), ndtr(b)
    if pb - pa <= 0:
        z = b if sign > 0 else a
    else:
        z = float(np.clip(ndtri(pa + rng.random() * (pb - pa)), a, b))
    return mean + sign * sd * z


def slice_sample(logf, x0: float, rng: np.random.Generator, width: float, lo=-np.inf, hi=np.inf, max_steps=50) -> float:
    """One univariate slice-sampling update (stepping out, then shrinkage)."""
    y = logf(x0) - rng.exponential()
    left = x0 - width * rng.random()
    right = left + width
    j = int(max_steps * rng.random())
    k = max_steps - 1 - j
    while j > 0 and left > lo and logf(left) > y:
        left -= width
        j -= 1
    while k > 0 and right < hi and logf(right) > y:
        right += width
        k -= 1
    left, right = max(left, lo), min(right, hi)
    for _ in range(200):
        x1 = left + rng.random() * (right - left)
        if logf(x1) > y:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
    return x0


def _draw_index(p: np.ndarray, u: float) -> int:
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, u * c[-1], side="right")), len(p) - 1)


# ---------------------------------------------------------------------------
# Gibbs components
# ---------------------------------------------------------------------------


def ffbs_from_logp(logp: np.ndarray, A: np.ndarray, init: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    filtered, _ = _forward_logp(logp, A, init)
    T = filtered.shape[0]
    u = rng.random(T)
    s = np.empty(T, dtype=int)
    s[-1] = _draw_index(filtered[-1], u[-1])
    for t in range(T - 2, -1, -1):
        s[t] = _draw_index(filtered[t] * A[:, s[t + 1]], u[t])
    return s


def ffbs_sample_states(theta: ThetaVector, stream, seed=None) -> np.ndarray:
    """Draw a hidden regime path (0-based labels) from its joint smoothing posterior."""
    values = stream.values if isinstance(stream, ObservationStream) else np.asarray(stream, dtype=float)
    if len(values) == 0:
        raise ValueError("stream must be nonempty")
    logp = theta.family.logpdf(theta.params, values)
    return ffbs_from_logp(logp, theta.transition, theta.initial, _rng(seed))


def transition_counts(labels: np.ndarray, R: int) -> np.ndarray:
    n = np.zeros((R, R))
    labels = np.asarray(labels)
    np.add.at(n, (labels[:-1], labels[1:]), 1.0)
    return n


def sample_transition_rows(labels, R: int, prior: PriorSpec, seed=None) -> np.ndarray:
    """Each row ``i`` drawn from ``Dir(c + n_i1, ..., c + n_iR)``."""
    rng = _rng(seed)
    counts = transition_counts(np.asarray(labels), R)
    return dirichlet(prior.transition_concentration + counts, rng)


def _gaussian_mean_sd(x: np.ndarray, mean: float, sd: float, prior: PriorSpec, rng) -> tuple[float, float]:
    """Update (mean, sd) of one normal component: exact mean draw, slice step on sd."""
    n = x.size
    if n == 0:
        return rng.uniform(prior.mean.lo, prior.mean.hi), rng.uniform(prior.sd.lo, prior.sd.hi)
    mean = truncnorm_draw(x.mean(), sd / math.sqrt(n), prior.mean.lo, prior.mean.hi, rng)
    ss = float(np.sum((x - mean) ** 2))
    lo, hi = prior.sd.lo, prior.sd.hi

    def logf(s):
        if s <= lo or s >= hi:
            return -np.inf
        return -n * math.log(s) - 0.5 * ss / (s * s)

    width = max(0.5 * sd, 1e-3 * (hi - lo))
    sd = slice_sample(logf, min(max(sd, lo + 1e-12), hi - 1e-12), rng, width, lo, hi)
    return mean, sd


def sample_emission_params(labels, stream, prior: PriorSpec, current: ThetaVector, seed=None) -> np.ndarray:
    """One conditional update of every regime's emission parameters.

    Regimes with no assigned observations are redrawn from the prior.
    """
    rng = _rng(seed)
    values = stream.values if isinstance(stream, ObservationStream) else np.asarray(stream, dtype=float)
    labels = np.asarray(labels)
    f = prior.family
    R = current.n_regimes
    out = np.array(current.params, dtype=float)
    for k in range(R):
        x = values[labels == k]
        if isinstance(f, Exponential):
            a = prior.rate.shape + x.shape[0]
            b = prior.rate.rate + float(np.sum(x))
            out[k, 0] = rng.gamma(a, 1.0 / b)
        elif isinstance(f, GaussianKnownVar):
            if x.size == 0:
                out[k, 0] = rng.uniform(prior.mean.lo, prior.mean.hi)
            else:
                out[k, 0] = truncnorm_draw(x.mean(), f.sd / math.sqrt(x.size), prior.mean.lo, prior.mean.hi, rng)
        elif isinstance(f, Gaussian):
            out[k] = _gaussian_mean_sd(x, out[k, 0], out[k, 1], prior, rng)
        elif isinstance(f, DiagonalBivariateGaussian):
            x = x.reshape(-1, 2)
            for d in range(2):
                out[k, d], out[k, 2 + d] = _gaussian_mean_sd(x[:, d], out[k, d], out[k, 2 + d], prior, rng)
        else:
            raise TypeError(f"unsupported family {type(f).__name__}")
    return out


def initial_theta(values: np.ndarray, R: int, prior: PriorSpec) -> ThetaVector:
    """Data-driven starting point: regimes seeded from sorted-data quantile blocks."""
    f = prior.family
    values = np.asarray(values, dtype=float)
    key = values if values.ndim == 1 else values[:, 0]
    blocks = np.array_split(values[np.argsort(key, kind="stable")], R)
    rows = []
    for blk in blocks:
        if blk.shape[0] == 0:
            rows.append(prior.prior_mean())
            continue
        if isinstance(f, Exponential):
            rows.append([1.0 / max(float(np.mean(blk)), 1e-8)])
        elif isinstance(f, GaussianKnownVar):
            rows.append([np.clip(np.mean(blk), prior.mean.lo, prior.mean.hi)])
        else:
            blk = blk.reshape(blk.shape[0], -1)
            m = np.clip(blk.mean(axis=0), prior.mean.lo, prior.mean.hi)
            s = blk.std(axis=0) if blk.shape[0] > 1 else np.full(blk.shape[1], prior.sd.mean)
            eps = 1e-6 * (prior.sd.hi - prior.sd.lo)
            s = np.clip(s, prior.sd.lo + eps, prior.sd.hi - eps)
            rows.append(np.concatenate([m, s]))
    A = np.full((R, R), 0.2 / (R - 1)) if R > 1 else np.ones((1, 1))
    if R > 1:
        np.fill_diagonal(A, 0.8)
    return ThetaVector(f, np.array(rows, dtype=float), A)


class GibbsSampler:
    """Blocked Gibbs chain over (regime path, transitions, emission params).

    The initial regime distribution is held fixed at ``theta.initial``
    (uniform unless a starting theta says otherwise).
    """

    def __init__(self, values, n_regimes: int, prior: PriorSpec, seed=None, init: ThetaVector | None = None):
        self.values = np.asarray(values, dtype=float)
        if len(self.values) == 0:
            raise ValueError("need at least one observation")
        self.R = n_regimes
        self.prior = prior
        self.rng = _rng(seed)
        if init is not None and init.n_regimes != n_regimes:
            init = None
        self.theta = init if init is not None else initial_theta(self.values, n_regimes, prior)
        self.states: np.ndarray | None = None

    def extend(self, new_values) -> None:
        new_values = np.asarray(new_values, dtype=float)
        self.values = np.concatenate([self.values, new_values.reshape((-1,) + self.values.shape[1:])])

    def sweep(self) -> ThetaVector:
        th = self.theta
        logp = th.family.logpdf(th.params, self.values)
        s = ffbs_from_logp(logp, th.transition, th.initial, self.rng)
        A = sample_transition_rows(s, self.R, self.prior, self.rng)
        params = sample_emission_params(s, self.values, self.prior, th, self.rng)
        self.states = s
        self.theta = ThetaVector(th.family, params, A, th.initial)
        return self.theta


@dataclass(frozen=True)
class PosteriorDraws:
    """Relabeled posterior samples of theta with their next-stage regime weights."""

    draws: tuple
    weights: np.ndarray
    burn_in: int = 0
    thin: int = 1

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(len(self.draws), -1)
        if len(self.draws) == 0:
            raise ValueError("need at least one draw")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-10):
            raise ValueError("weights per draw must sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "draws", tuple(self.draws))
        object.__setattr__(self, "weights", w)

    @property
    def n_mc(self) -> int:
        return len(self.draws)

    @property
    def n_regimes(self) -> int:
        return self.draws[0].n_regimes

    @property
    def family(self) -> Emission:
        return self.draws[0].family

    @property
    def params(self) -> np.ndarray:
        """Stacked emission parameters, shape (N, R, p)."""
        return np.stack([d.params for d in self.draws])

    @property
    def transitions(self) -> np.ndarray:
        return np.stack([d.transition for d in self.draws])

    @classmethod
    def point_mass(cls, theta: ThetaVector, values) -> "PosteriorDraws":
        return cls((theta,), _weights_for(theta, values)[None, :])

    def to_csv(self, path) -> None:
        d0 = self.draws[0]
        R, names = d0.n_regimes, d0.family.param_names
        header = ["draw"]
        header += [f"{nm}_{k + 1}" for k in range(R) for nm in names]
        header += [f"A_{i + 1}_{j + 1}" for i in range(R) for j in range(R)]
        header += [f"w_{k + 1}" for k in range(R)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, d in enumerate(self.draws):
                row = [i + 1] + [repr(float(v)) for v in d.params.ravel()]
                row += [repr(float(v)) for v in d.transition.ravel()]
                row += [repr(float(v)) for v in self.weights[i]]
                w.writerow(row)


def _weights_for(theta: ThetaVector, values) -> np.ndarray:
    filtered, _ = forward(theta, values)
    return predictive_weights(FilterState(filtered[-1], len(filtered)), theta)


def relabel(theta: ThetaVector) -> ThetaVector:
    return theta.canonical()[0]


def collect_draws(sampler: GibbsSampler, n_mc: int, burn_in: int = 200, thin: int = 1) -> PosteriorDraws:
    if n_mc < 1 or thin < 1 or burn_in < 0:
        raise ValueError("need n_mc >= 1, thin >= 1, burn_in >= 0")
    for _ in range(burn_in):
        sampler.sweep()
    draws, weights = [], []
    for _ in range(n_mc):
        for _ in range(thin):
            th = sampler.sweep()
        th = relabel(th)
        draws.append(th)
        weights.append(_weights_for(th, sampler.values))
    return PosteriorDraws(tuple(draws), np.array(weights), burn_in, thin)


def posterior_draws(stream, R: int, prior: PriorSpec, n_mc: int, burn_in: int = 200, thin: int = 1, seed=None,
                    init: ThetaVector | None = None) -> PosteriorDraws:
    """Run the blocked Gibbs sampler and return ``n_mc`` relabeled draws."""
    values = stream.values if isinstance(stream, ObservationStream) else np.asarray(stream, dtype=float)
    sampler = GibbsSampler(values, R, prior, seed, init)
    return collect_draws(sampler, n_mc, burn_in, thin)


def plug_in_estimate(draws: PosteriorDraws) -> tuple[ThetaVector, np.ndarray]:
    """Posterior-mean parameters and posterior-mean predictive weights."""
    params = draws.params.mean(axis=0)
    A = draws.transitions.mean(axis=0)
    A = A / A.sum(axis=1, keepdims=True)
    init = np.mean([d.initial for d in draws.draws], axis=0)
    w = draws.weights.mean(axis=0)
    return ThetaVector(draws.family, params, A, init / init.sum()), w / w.sum()


# ---------------------------------------------------------------------------
# Weak-limit HDP-HMM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HdpStep:
    beta: np.ndarray
    theta: ThetaVector
    gamma: float
    alpha: float
    states: np.ndarray


def _log_dm_alpha(alpha: float, beta: np.ndarray, n: np.ndarray) -> float:
    # Dirichlet-multinomial likelihood of the transition counts, pi integrated out
    ab = alpha * beta
    rows = n.sum(axis=1)
    used = rows > 0
    out = np.sum(gammaln(alpha) - gammaln(alpha + rows[used]))
    out += np.sum(gammaln(ab[None, :] + n[used]) - gammaln(ab)[None, :])
    return float(out)


def _log_dm_gamma(gamma: float, m: np.ndarray, L: int) -> float:
    a = gamma / L
    return float(gammaln(gamma) - gammaln(gamma + m.sum()) + np.sum(gammaln(a + m) - gammaln(a)))


class WeakLimitHdpSampler:
    """Blocked Gibbs for the weak-limit (truncation ``L``) HDP-HMM.

    Global weights ``beta ~ Dir(gamma/L, ...)``, rows ``pi_j ~ Dir(alpha*beta)``.
    Table counts come from the Chinese-restaurant-table auxiliary variables;
    ``gamma`` and ``alpha`` get random-walk Metropolis updates on the log scale
    against their Gamma hyperpriors, with ``beta`` and ``pi`` integrated out of
    the respective targets (each is redrawn right after).
    """

    def __init__(self, values, L: int, prior: PriorSpec, seed=None, step: float = 0.5):
        if L < 2:
            raise ValueError("truncation L must be >= 2")
        self.values = np.asarray(values, dtype=float)
        if len(self.values) == 0:
            raise ValueError("need at least one observation")
        self.L = L
        self.prior = prior
        self.rng = _rng(seed)
        self.step = step
        self.gamma = prior.hdp.gamma.mean
        self.alpha = prior.hdp.alpha.mean
        self.beta = np.full(L, 1.0 / L)
        start = initial_theta(self.values, L, prior)
        self.pi = np.full((L, L), 1.0 / L)
        self.params = np.array(start.params)
        self.states = None

    def extend(self, new_values) -> None:
        new_values = np.asarray(new_values, dtype=float)
        self.values = np.concatenate([self.values, new_values.reshape((-1,) + self.values.shape[1:])])

    def _mh(self, current: float, logtarget, hyper: GammaPrior) -> float:
        def lp(log_x):
            x = math.exp(log_x)
            return hyper.logpdf(x) + logtarget(x) + log_x  # log-scale Jacobian

        x0 = math.log(current)
        x1 = x0 + self.step * self.rng.standard_normal()
        if math.log(self.rng.random()) < lp(x1) - lp(x0):
            return math.exp(x1)
        return current

    def sweep(self) -> HdpStep:
        rng, L, f = self.rng, self.L, self.prior.family
        init = np.maximum(self.beta, 1e-300)
        logp = f.logpdf(self.params, self.values)
        s = ffbs_from_logp(logp, self.pi, init / init.sum(), rng)
        n = transition_counts(s, L)

        # table counts m_jk via CRT draws
        m = np.zeros((L, L))
        ab = self.alpha * np.maximum(self.beta, 1e-300)
        for j, k in zip(*np.nonzero(n)):
            cnt = int(n[j, k])
            m[j, k] = np.sum(rng.random(cnt) < ab[k] / (ab[k] + np.arange(cnt)))
        mk = m.sum(axis=0)

        self.gamma = self._mh(self.gamma, lambda g: _log_dm_gamma(g, mk, L), self.prior.hdp.gamma)
        self.beta = dirichlet(self.gamma / L + mk, rng)
        beta_safe = np.maximum(self.beta, 1e-300)
        self.alpha = self._mh(self.alpha, lambda a: _log_dm_alpha(a, beta_safe, n), self.prior.hdp.alpha)
        self.pi = dirichlet(self.alpha * beta_safe + n, rng)

        cur = ThetaVector(f, self.params, self.pi, self.beta / self.beta.sum())
        self.params = sample_emission_params(s, self.values, self.prior, cur, rng)
        self.states = s
        theta = ThetaVector(f, self.params, self.pi, self.beta / self.beta.sum())
        return HdpStep(self.beta.copy(), theta, self.gamma, self.alpha, s)


def weak_limit_hdp_sample(stream, L: int, prior: PriorSpec, n_steps: int, seed=None, burn_in: int = 0) -> list[HdpStep]:
    values = stream.values if isinstance(stream, ObservationStream) else np.asarray(stream, dtype=float)
    sampler = WeakLimitHdpSampler(values, L, prior, seed)
    for _ in range(burn_in):
        sampler.sweep()
    return [sampler.sweep() for _ in range(n_steps)]


# ---------------------------------------------------------------------------
# KDE input model
# ---------------------------------------------------------------------------


class DegenerateDataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class KdeModel:
    data: np.ndarray
    bandwidth: np.ndarray

    @property
    def ndim(self) -> int:
        return 1 if self.data.ndim == 1 else self.data.shape[1]

    def density(self, x) -> np.ndarray:
        """Gaussian-kernel density at points ``x`` (scalar data: shape (k,))."""
        if np.any(self.bandwidth == 0):
            raise ValueError("point-mass KDE has no density")
        x = np.asarray(x, dtype=float).reshape(-1, self.ndim)
        d = self.data.reshape(-1, self.ndim)
        z = (x[:, None, :] - d[None, :, :]) / self.bandwidth
        k = np.exp(-0.5 * np.sum(z * z, axis=2)) / np.prod(self.bandwidth * math.sqrt(2 * math.pi))
        return k.mean(axis=1)


def silverman_bandwidth(data: np.ndarray) -> np.ndarray:
    d = data.reshape(data.shape[0], -1)
    n = d.shape[0]
    return 1.06 * d.std(axis=0, ddof=1) * n ** (-0.2)


def kde_fit(data) -> KdeModel:
    data = np.asarray(data, dtype=float)
    if data.shape[0] < 2:
        raise ValueError("KDE needs at least 2 data points")
    h = silverman_bandwidth(data)
    if np.any(h == 0):
        warnings.warn("degenerate data (zero spread); KDE falls back to a point mass", DegenerateDataWarning)
        h = np.zeros_like(h)
    data = data.copy()
    data.setflags(write=False)
    return KdeModel(data, h)


def kde_sample(model: KdeModel, n: int, seed=None) -> np.ndarray:
    rng = _rng(seed)
    idx = rng.integers(0, model.data.shape[0], size=n)
    base = model.data[idx]
    if model.ndim == 1:
        return base + model.bandwidth[0] * rng.standard_normal(n)
    return base + model.bandwidth * rng.standard_normal((n, model.ndim))
