"""Gaussian-process metamodel over (decision, input parameter) and its regime-weighted aggregate.

The kernel is a separable squared-exponential,
``k((x, l), (x', l')) = s2 * kx(x, x') * kl(l, l')``, which lets the aggregate
model pre-contract the lambda factor against the posterior atoms once per
stage. Every query afterwards costs O(n) per decision point for the mean and
O(n^2) for variances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

NOISE_MODES = ("heteroscedastic", "pooled")


class SingularCovariance(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# Design data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignPoint:
    x: np.ndarray
    lam: np.ndarray
    y_bar: float
    m: int = 1
    y_var: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "lam", np.atleast_1d(np.asarray(self.lam, dtype=float)).reshape(-1))
        if self.m < 1:
            raise ValueError("replication count m must be >= 1")
        if not self.y_var >= 0:
            raise ValueError("y_var must be >= 0")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.lam)) and np.isfinite(self.y_bar)):
            raise ValueError("design point must be finite")


@dataclass(frozen=True)
class DesignSet:
    """Column-stored design: ``X (n, dx)``, ``L (n, dl)``, outputs, variances, replication counts."""

    X: np.ndarray
    L: np.ndarray
    y: np.ndarray
    y_var: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        n = X.shape[0]
        X = X.reshape(n, -1)
        L = np.array(self.L, dtype=float).reshape(n, -1)
        y = np.array(self.y, dtype=float).reshape(n)
        v = np.array(self.y_var, dtype=float).reshape(n)
        m = np.array(self.m, dtype=int).reshape(n)
        if np.any(m < 1) or np.any(v < 0):
            raise ValueError("design needs m >= 1 and y_var >= 0")
        for name, a in (("X", X), ("L", L), ("y", y), ("y_var", v), ("m", m)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_points(cls, points, dx: int | None = None, dl: int | None = None) -> "DesignSet":
        points = list(points)
        if not points:
            return cls.empty(dx or 1, dl or 0)
        return cls(
            np.array([p.x for p in points]),
            np.array([p.lam for p in points]).reshape(len(points), -1),
            [p.y_bar for p in points],
            [p.y_var for p in points],
            [p.m for p in points],
        )

    @classmethod
    def empty(cls, dx: int, dl: int) -> "DesignSet":
        return cls(np.zeros((0, dx)), np.zeros((0, dl)), [], [], [])

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dx(self) -> int:
        return self.X.shape[1]

    @property
    def dl(self) -> int:
        return self.L.shape[1]

    def point(self, j: int) -> DesignPoint:
        return DesignPoint(self.X[j], self.L[j], float(self.y[j]), int(self.m[j]), float(self.y_var[j]))

    def append(self, p: DesignPoint) -> "DesignSet":
        return DesignSet(
            np.vstack([self.X, p.x.reshape(1, -1)]),
            np.vstack([self.L, p.lam.reshape(1, -1)]),
            np.append(self.y, p.y_bar),
            np.append(self.y_var, p.y_var),
            np.append(self.m, p.m),
        )

    def tail(self, k: int) -> "DesignSet":
        s = slice(max(len(self) - k, 0), None)
        return DesignSet(self.X[s], self.L[s], self.y[s], self.y_var[s], self.m[s])

    def to_csv(self, path) -> None:
        header = [f"x{i + 1}" for i in range(self.dx)] + [f"lambda{i + 1}" for i in range(self.dl)]
        header += ["y_bar", "m", "y_var"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for j in range(len(self)):
                row = [repr(float(v)) for v in self.X[j]] + [repr(float(v)) for v in self.L[j]]
                row += [repr(float(self.y[j])), int(self.m[j]), repr(float(self.y_var[j]))]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "DesignSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        xi = [i for i, h in enumerate(header) if h.startswith("x")]
        li = [i for i, h in enumerate(header) if h.startswith("lambda")]
        col = {h: i for i, h in enumerate(header)}
        arr = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(arr[:, xi], arr[:, li], arr[:, col["y_bar"]], arr[:, col["y_var"]], arr[:, col["m"]].astype(int))


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelHyperparams:
    """Squared-exponential hyperparameters.

    ``center`` is the constant prior mean (0 gives the zero-mean GP);
    ``noise_var`` is the pooled per-replication variance used in pooled mode.
    """

    sigma_g2: float
    lengthscales_x: np.ndarray
    lengthscales_lambda: np.ndarray = field(default_factory=lambda: np.zeros(0))
    noise_var: float = 0.0
    center: float = 0.0

    def __post_init__(self):
        lx = np.atleast_1d(np.asarray(self.lengthscales_x, dtype=float))
        ll = np.atleast_1d(np.asarray(self.lengthscales_lambda, dtype=float)).reshape(-1)
        if not self.sigma_g2 > 0 or np.any(lx <= 0) or np.any(ll <= 0):
            raise ValueError("variance and lengthscales must be > 0")
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        object.__setattr__(self, "lengthscales_x", lx)
        object.__setattr__(self, "lengthscales_lambda", ll)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.concatenate([self.lengthscales_x, self.lengthscales_lambda])


def sq_exp(a: np.ndarray, b: np.ndarray, ls: np.ndarray) -> np.ndarray:
    """Unit-variance squared-exponential correlation ``exp(-sum (a-b)^2 / (2 ls^2))``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if ls.size == 0:
        rows = lambda z: z.shape[0] if z.ndim == 2 else max(z.size, 1)
        return np.ones((rows(a), rows(b)))
    a = a.reshape(-1, ls.size) / ls
    b = b.reshape(-1, ls.size) / ls
    d2 = np.zeros((a.shape[0], b.shape[0]))
    for j in range(ls.size):
        d2 += (a[:, j, None] - b[None, :, j]) ** 2
    return np.exp(-0.5 * d2)


def _factor(K: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Cholesky of ``K``, retrying with diagonal jitter 1e-10 * scale, x10 per retry up to 1e-4 * scale.

    The unjittered factor is kept only when every pivot exceeds the first
    jitter level; smaller pivots mean the factor is dominated by rounding.
    """
    n = K.shape[0]
    try:
        C = np.linalg.cholesky(K)
        if n == 0 or np.min(np.diag(C)) ** 2 > 1e-10 * scale:
            return C, 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * scale
    while jitter <= 1e-4 * scale * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularCovariance("covariance not positive definite after maximum jitter")


# ---------------------------------------------------------------------------
# GP model
# ---------------------------------------------------------------------------


class SurrogateModel:
    """Stochastic-kriging GP on a design set.

    Parameters
    ----------
    design : DesignSet
    hyper : KernelHyperparams
    noise_mode : {"heteroscedastic", "pooled"}
        ``heteroscedastic`` puts each point's own ``y_var / m`` on the diagonal;
        ``pooled`` uses ``hyper.noise_var / m`` for every point.
    window : int, optional
        Keep only the most recent ``window`` design points.
    """

    def __init__(self, design: DesignSet, hyper: KernelHyperparams, noise_mode: str = "heteroscedastic",
                 window: int | None = None, _factored=None):
        if noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if window is not None and len(design) > window:
            design = design.tail(window)
        if len(design) == 0:
            raise ValueError("surrogate needs at least one design point")
        if hyper.lengthscales_x.size != design.dx or hyper.lengthscales_lambda.size != design.dl:
            raise ValueError("lengthscale dimensions do not match the design")
        self.design = design
        self.hyper = hyper
        self.noise_mode = noise_mode
        self.window = window
        self.Z = np.hstack([design.X, design.L])
        self.noise = self._noise_vector(design)
        if _factored is None:
            K = hyper.sigma_g2 * sq_exp(self.Z, self.Z, hyper.lengthscales) + np.diag(self.noise)
            self.chol, self.jitter = _factor(K, hyper.sigma_g2)
        else:
            self.chol, self.jitter = _factored
        self.alpha = cho_solve((self.chol, True), design.y - hyper.center)

    def _noise_vector(self, design: DesignSet) -> np.ndarray:
        if self.noise_mode == "pooled":
            return self.hyper.noise_var / design.m
        return design.y_var / design.m

    @property
    def n(self) -> int:
        return len(self.design)

    def kx(self, x1, x2) -> np.ndarray:
        return sq_exp(x1, x2, self.hyper.lengthscales_x)

    def kl(self, l1, l2) -> np.ndarray:
        return sq_exp(l1, l2, self.hyper.lengthscales_lambda)

    def cross(self, x, lam) -> np.ndarray:
        """Prior covariances between queries and design points, shape (B, n)."""
        h = self.hyper
        return h.sigma_g2 * self.kx(x, self.design.X) * self.kl(lam, self.design.L)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self.chol, True), b)

    def predict(self, x, lam) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at a batch of ``(x, lam)`` queries."""
        c = self.cross(x, lam)
        mean = self.hyper.center + c @ self.alpha
        v = solve_triangular(self.chol, c.T, lower=True)
        var = np.maximum(self.hyper.sigma_g2 - np.sum(v * v, axis=0), 0.0)
        return mean, var

    def noise_at(self, x, lam, m: int) -> np.ndarray:
        """Replication-averaged noise variance for a new evaluation with ``m`` replications.

        Heteroscedastic mode borrows the per-replication variance of the nearest
        design point, with distance measured in lengthscale units.
        """
        x = np.asarray(x, dtype=float).reshape(-1, self.design.dx)
        lam = np.asarray(lam, dtype=float).reshape(x.shape[0], -1)
        if self.noise_mode == "pooled":
            return np.full(x.shape[0], self.hyper.noise_var / m)
        ls = self.hyper.lengthscales
        q = np.hstack([x, lam]) / ls
        z = self.Z / ls
        d2 = (q * q).sum(1)[:, None] + (z * z).sum(1)[None, :] - 2 * q @ z.T
        return self.design.y_var[np.argmin(d2, axis=1)] / m

    def add_point(self, p: DesignPoint) -> "SurrogateModel":
        """New model with one more point; the Cholesky factor is extended by one row."""
        design = self.design.append(p)
        if self.window is not None and len(design) > self.window:
            return SurrogateModel(design, self.hyper, self.noise_mode, self.window)
        h = self.hyper
        noise_new = self._noise_vector(design)[-1]
        k = self.cross(p.x.reshape(1, -1), p.lam.reshape(1, -1))[0]
        row = solve_triangular(self.chol, k, lower=True)
        d2 = h.sigma_g2 + noise_new + self.jitter - row @ row
        if d2 <= 1e-10 * h.sigma_g2:
            return SurrogateModel(design, h, self.noise_mode, self.window)
        n = self.n
        C = np.zeros((n + 1, n + 1))
        C[:n, :n] = self.chol
        C[n, :n] = row
        C[n, n] = np.sqrt(d2)
        return SurrogateModel(design, h, self.noise_mode, self.window, _factored=(C, self.jitter))

    def refit(self, hyper: KernelHyperparams) -> "SurrogateModel":
        return SurrogateModel(self.design, hyper, self.noise_mode, self.window)


def posterior_mean_cov(model: SurrogateModel, p, q) -> tuple[float, float]:
    """``(m_n(p), k_n(p, q))`` for single points ``p = (x, lam)``, ``q = (x', lam')``."""
    cp = model.cross(np.atleast_1d(p[0]), np.atleast_1d(p[1]))[0]
    cq = model.cross(np.atleast_1d(q[0]), np.atleast_1d(q[1]))[0]
    h = model.hyper
    mean = h.center + cp @ model.alpha
    prior = h.sigma_g2 * model.kx(p[0], q[0])[0, 0] * model.kl(p[1], q[1])[0, 0]
    cov = prior - cp @ model.solve(cq)
    same = np.array_equal(np.atleast_1d(p[0]), np.atleast_1d(q[0])) and np.array_equal(
        np.atleast_1d(p[1]), np.atleast_1d(q[1]))
    if same:
        cov = max(cov, 0.0)
    return float(mean), float(cov)


# ---------------------------------------------------------------------------
# Hyperparameter fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperBounds:
    sigma_g2: tuple[float, float]
    lengthscales: np.ndarray  # (d, 2)

    @classmethod
    def from_design(cls, design: DesignSet, spans=None) -> "HyperBounds":
        y = design.y
        scale = float(np.var(y)) if y.size > 1 and np.var(y) > 0 else 1.0
        Z = np.hstack([design.X, design.L])
        if spans is None:
            spans = np.ptp(Z, axis=0) if Z.shape[0] > 1 else np.ones(Z.shape[1])
        spans = np.where(np.asarray(spans, dtype=float) > 0, spans, 1.0)
        return cls((1e-6 * scale, 1e3 * scale), np.column_stack([0.02 * spans, 20.0 * spans]))


def pooled_noise_var(design: DesignSet) -> float:
    w = design.m - 1
    if np.sum(w) <= 0:
        return 0.0
    return float(np.sum(w * design.y_var) / np.sum(w))


def _nll_and_grad(phi, Z, r, noise, dx):
    s2 = np.exp(phi[0])
    ls = np.exp(phi[1:])
    Ks = s2 * sq_exp(Z, Z, ls)
    K = Ks + np.diag(noise)
    try:
        C, _ = _factor(K, s2)
    except SingularCovariance:
        return 1e25, np.zeros_like(phi)
    a = cho_solve((C, True), r)
    nll = 0.5 * r @ a + np.sum(np.log(np.diag(C)))
    W = cho_solve((C, True), np.eye(len(r))) - np.outer(a, a)
    g = np.empty_like(phi)
    g[0] = 0.5 * np.sum(W * Ks)
    for d in range(Z.shape[1]):
        diff = Z[:, d][:, None] - Z[:, d][None, :]
        g[1 + d] = 0.5 * np.sum(W * Ks * (diff / ls[d]) ** 2)
    return nll, g


def fit_hyperparams(design: DesignSet, bounds: HyperBounds | None = None, seed=None, n_starts: int = 4,
                    noise_mode: str = "heteroscedastic", max_points: int | None = 200,
                    init: KernelHyperparams | None = None, center: float | None = None) -> KernelHyperparams:
    """Maximize the GP log marginal likelihood over (variance, lengthscales).

    Multi-start L-BFGS-B in log space with the analytic gradient. The constant
    mean is the sample mean of the outputs unless ``center`` is given, and
    noise is held at its replication estimate. Only the ``max_points`` most
    recent points enter the likelihood.
    """
    if len(design) < 2:
        raise ValueError("need at least 2 design points to fit hyperparameters")
    rng = np.random.default_rng(seed)
    fit_set = design.tail(max_points) if max_points else design
    bounds = bounds or HyperBounds.from_design(design)
    Z = np.hstack([fit_set.X, fit_set.L])
    c = float(np.mean(design.y)) if center is None else center
    r = fit_set.y - c
    noise_var = pooled_noise_var(design)
    noise = (noise_var if noise_mode == "pooled" else fit_set.y_var) / fit_set.m
    lo = np.log(np.concatenate([[bounds.sigma_g2[0]], bounds.lengthscales[:, 0]]))
    hi = np.log(np.concatenate([[bounds.sigma_g2[1]], bounds.lengthscales[:, 1]]))
    starts = []
    if init is not None and init.lengthscales.size == Z.shape[1]:
        starts.append(np.log(np.concatenate([[init.sigma_g2], init.lengthscales])))
    mid = np.log(np.concatenate([[max(np.var(r), np.exp(lo[0]))], np.exp(0.5 * (lo[1:] + hi[1:])) / 10.0]))
    starts.append(mid)
    while len(starts) < n_starts:
        starts.append(lo + (hi - lo) * (0.15 + 0.55 * rng.random(lo.size)))
    best = None
    for s in starts:
        s = np.clip(s, lo, hi)
        res = minimize(_nll_and_grad, s, args=(Z, r, noise, design.dx), jac=True, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)), options={"maxiter": 200})
        if best is None or res.fun < best.fun:
            best = res
    phi = np.clip(best.x, lo, hi)
    ls = np.exp(phi[1:])
    return KernelHyperparams(float(np.exp(phi[0])), ls[: design.dx], ls[design.dx:], noise_var, c)


# ---------------------------------------------------------------------------
# Aggregate model
# ---------------------------------------------------------------------------


class AggregateModel:
    """Weighted mixture of GP slices ``G(x) = sum_a omega_a Z(x, lam_a)``.

    Parameters
    ----------
    surrogate : SurrogateModel
    atoms : ndarray (A, dl)
        Kernel coordinates of every (draw, regime) pair.
    omega : ndarray (A,)
        Mixture weights ``w_l^(i) / N``; they sum to 1.
    """

    def __init__(self, surrogate: SurrogateModel, atoms, omega):
        s = surrogate
        self.surrogate = s
        self.omega = np.asarray(omega, dtype=float).reshape(-1)
        atoms = np.asarray(atoms, dtype=float)
        self.atoms = atoms.reshape(-1, s.design.dl) if s.design.dl else np.zeros((atoms.shape[0] if atoms.ndim else 0, 0))
        if self.atoms.shape[0] == 0 or self.atoms.shape[0] != self.omega.shape[0]:
            raise ValueError("need a nonempty set of atoms with one weight each")
        self.b = self.omega @ s.kl(self.atoms, s.design.L)
        self.Omega = float(self.omega @ s.kl(self.atoms, self.atoms) @ self.omega)
        self.total = float(self.omega.sum())

    @classmethod
    def from_draws(cls, surrogate: SurrogateModel, draws) -> "AggregateModel":
        fam = draws.family
        atoms = np.concatenate([fam.to_kernel(d.params) for d in draws.draws])
        omega = (draws.weights / draws.n_mc).reshape(-1)
        return cls(surrogate, atoms, omega)

    def with_surrogate(self, surrogate: SurrogateModel) -> "AggregateModel":
        return AggregateModel(surrogate, self.atoms, self.omega)

    def _a(self, x) -> np.ndarray:
        s = self.surrogate
        return s.hyper.sigma_g2 * s.kx(x, s.design.X) * self.b

    def mean(self, x) -> np.ndarray:
        s = self.surrogate
        return s.hyper.center * self.total + self._a(x) @ s.alpha

    def mean_grad(self, x) -> np.ndarray:
        """Gradient of the aggregate mean at a single decision ``x``."""
        s = self.surrogate
        x = np.asarray(x, dtype=float).reshape(1, -1)
        w = self._a(x)[0] * s.alpha
        diff = s.design.X - x
        return (w @ diff) / s.hyper.lengthscales_x ** 2

    def var(self, x) -> np.ndarray:
        s = self.surrogate
        a = self._a(x)
        v = solve_triangular(s.chol, a.T, lower=True)
        return np.maximum(s.hyper.sigma_g2 * self.Omega - np.sum(v * v, axis=0), 0.0)

    def cov(self, x1, x2) -> np.ndarray:
        s = self.surrogate
        a1, a2 = self._a(x1), self._a(x2)
        return s.hyper.sigma_g2 * s.kx(x1, x2) * self.Omega - a1 @ s.solve(a2.T)

    def cross_cov(self, x, xq, lq) -> np.ndarray:
        """``sum_a omega_a k_n((x_i, lam_a), (xq_j, lq_j))``, shape (len(x), len(xq))."""
        s = self.surrogate
        lw = self.omega @ s.kl(self.atoms, lq)
        prior = s.hyper.sigma_g2 * s.kx(x, xq) * lw[None, :]
        return prior - self._a(x) @ s.solve(s.cross(xq, lq).T)


def aggregate_mean(agg: AggregateModel, x) -> float:
    return float(agg.mean(np.atleast_2d(np.asarray(x, dtype=float).reshape(1, -1)))[0])


def aggregate_cov(agg: AggregateModel, x, x2) -> float:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    x2 = np.asarray(x2, dtype=float).reshape(1, -1)
    c = float(agg.cov(x, x2)[0, 0])
    return max(c, 0.0) if np.array_equal(x, x2) else c
