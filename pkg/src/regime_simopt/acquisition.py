"""Regime-aware expected improvement and its maximization over (x, lambda)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

from .sampling import lhs
from .surrogate import AggregateModel

_SQRT2PI = np.sqrt(2.0 * np.pi)
DEGENERATE_TOL = 1e-14
EI_FLAT = 1e-12


class DegenerateCandidate(ValueError):
    pass


def ei_closed_form(delta, sigma) -> np.ndarray:
    """``delta * Phi(delta/sigma) + sigma * phi(delta/sigma)``, with the ``max(delta, 0)`` limit at sigma = 0."""
    delta = np.asarray(delta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    delta, sigma = np.broadcast_arrays(delta, sigma)
    out = np.array(np.maximum(delta, 0.0), dtype=float)
    pos = sigma > 0
    with np.errstate(over="ignore"):
        z = delta[pos] / sigma[pos]
        val = delta[pos] * ndtr(z) + sigma[pos] * np.exp(-0.5 * z * z) / _SQRT2PI
    out[pos] = np.maximum(val, 0.0)
    return out if out.ndim else float(out[()])


def _tilde_parts(agg: AggregateModel, xq, cx, cl, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Numerator (aggregate-to-candidate covariance) and squared denominator, row-paired."""
    s = agg.surrogate
    xq = np.asarray(xq, dtype=float).reshape(-1, s.design.dx)
    cx = np.asarray(cx, dtype=float).reshape(-1, s.design.dx)
    cl = np.asarray(cl, dtype=float).reshape(cx.shape[0], s.design.dl)
    h = s.hyper
    lw = agg.omega @ s.kl(agg.atoms, cl)
    kxx = np.exp(-0.5 * np.sum(((xq - cx) / h.lengthscales_x) ** 2, axis=1))
    a = agg._a(xq)
    c = s.cross(cx, cl)
    va = solve_triangular(s.chol, a.T, lower=True)
    vc = solve_triangular(s.chol, c.T, lower=True)
    num = h.sigma_g2 * kxx * lw - np.sum(va * vc, axis=0)
    den2 = np.maximum(h.sigma_g2 - np.sum(vc * vc, axis=0), 0.0) + s.noise_at(cx, cl, m)
    return num, den2


def tilde_sigma(agg: AggregateModel, x_query, candidate, m: int = 1) -> float:
    """Sd of the one-step change in the aggregate mean at ``x_query`` if ``candidate`` were evaluated.

    Parameters
    ----------
    agg : AggregateModel
    x_query : array_like (dx,)
    candidate : tuple (x_plus, lam_plus)
        ``lam_plus`` in kernel coordinates.
    m : int
        Replications the candidate evaluation would use.
    """
    num, den2 = _tilde_parts(agg, x_query, candidate[0], candidate[1], m)
    if den2[0] <= DEGENERATE_TOL:
        raise DegenerateCandidate("candidate has no residual variance")
    return float(abs(num[0]) / np.sqrt(den2[0]))


def tilde_sigma_batch(agg: AggregateModel, x, lam, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Self-query sigma-tilde at candidates ``(x_i, lam_i)`` plus a degeneracy mask."""
    num, den2 = _tilde_parts(agg, x, x, lam, m)
    bad = den2 <= DEGENERATE_TOL
    sig = np.where(bad, 0.0, np.abs(num) / np.sqrt(np.where(bad, 1.0, den2)))
    return sig, bad


@dataclass
class EiContext:
    """Everything needed to score and maximize EI within one acquisition step.

    ``lam_lo``/``lam_hi`` bound the continuous lambda search; when omitted they
    are set from the atom hull padded by ``lam_pad`` of its range on each side
    and clamped below at ``lam_floor``.
    """

    agg: AggregateModel
    x_lo: np.ndarray
    x_hi: np.ndarray
    m: int = 1
    lam_lo: np.ndarray | None = None
    lam_hi: np.ndarray | None = None
    lam_floor: np.ndarray | None = None
    lam_pad: float = 0.2
    restarts: int = 16

    def __post_init__(self):
        self.x_lo = np.atleast_1d(np.asarray(self.x_lo, dtype=float))
        self.x_hi = np.atleast_1d(np.asarray(self.x_hi, dtype=float))
        if np.any(self.x_hi < self.x_lo):
            raise ValueError("decision bounds must satisfy lo <= hi")
        atoms = self.agg.atoms
        if self.lam_lo is None or self.lam_hi is None:
            lo, hi = atoms.min(axis=0), atoms.max(axis=0)
            span = hi - lo
            span = np.where(span > 0, span, np.maximum(np.abs(hi), 1e-3))
            self.lam_lo, self.lam_hi = lo - self.lam_pad * span, hi + self.lam_pad * span
        if self.lam_floor is not None:
            self.lam_lo = np.maximum(self.lam_lo, self.lam_floor)
        self.lam_lo = np.asarray(self.lam_lo, dtype=float).reshape(-1)
        self.lam_hi = np.asarray(self.lam_hi, dtype=float).reshape(-1)

    @property
    def dx(self) -> int:
        return self.x_lo.size

    @property
    def dl(self) -> int:
        return self.lam_lo.size

    @property
    def lo(self) -> np.ndarray:
        return np.concatenate([self.x_lo, self.lam_lo])

    @property
    def hi(self) -> np.ndarray:
        return np.concatenate([self.x_hi, self.lam_hi])

    def evaluated_x(self) -> np.ndarray:
        return np.unique(self.agg.surrogate.design.X, axis=0)

    @property
    def incumbent(self) -> float:
        """Minimum aggregate mean over the evaluated decisions (recomputed each call)."""
        return float(np.min(self.agg.mean(self.evaluated_x())))

    def score(self, Q: np.ndarray, incumbent: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """EI and sigma-tilde for a batch of joint points ``Q = [x | lam]``."""
        T = self.incumbent if incumbent is None else incumbent
        X, L = Q[:, : self.dx], Q[:, self.dx:]
        sig, bad = tilde_sigma_batch(self.agg, X, L, self.m)
        ei = ei_closed_form(T - self.agg.mean(X), sig)
        ei = np.where(bad, 0.0, ei)
        return np.atleast_1d(ei), sig


def expected_improvement(ctx: EiContext, candidate) -> float:
    q = np.concatenate([np.atleast_1d(candidate[0]), np.atleast_1d(candidate[1])]).reshape(1, -1)
    return float(ctx.score(q)[0][0])


def _seed_pool(ctx: EiContext, rng, n_lhs: int) -> np.ndarray:
    lo, hi = ctx.lo, ctx.hi
    pool = [lhs(n_lhs, np.column_stack([lo, hi]), rng, candidates=1)]
    atoms = ctx.agg.atoms
    if ctx.dl:
        top = np.argsort(-ctx.agg.omega, kind="stable")[:16]
        uniq = np.unique(atoms[top], axis=0)
        ev = ctx.evaluated_x()
        best_x = ev[np.argmin(ctx.agg.mean(ev))]
        xs = np.vstack([best_x, pool[0][:32, : ctx.dx]])
        pairs = np.array([np.concatenate([x, a]) for x in xs for a in uniq])
        pool.append(np.clip(pairs, lo, hi))
    else:
        ev = ctx.evaluated_x()
        pool.append(ev[np.argmin(ctx.agg.mean(ev))][None, :])
    return np.vstack(pool)


def optimize_ei(ctx: EiContext, restarts: int | None = None, seed=None, n_pool: int | None = None,
                max_iter: int = 25) -> tuple[np.ndarray, np.ndarray, float]:
    """Multi-start coordinate pattern search for the EI maximizer.

    Seeds come from a Latin hypercube over the joint box, the best evaluated
    decision, and (decision, atom) pairs. The top ``restarts`` seeds are refined
    by a vectorized compass search with step halving. When EI is flat
    (<= 1e-12 everywhere) the pool point with the largest sigma-tilde is
    returned instead.

    Returns
    -------
    x_plus, lam_plus, ei_value
    """
    rng = np.random.default_rng(seed)
    restarts = ctx.restarts if restarts is None else restarts
    D = ctx.dx + ctx.dl
    n_pool = n_pool or max(128, 64 * D)
    lo, hi = ctx.lo, ctx.hi
    T = ctx.incumbent
    pool = _seed_pool(ctx, rng, n_pool)
    ei, sig = ctx.score(pool, T)
    if ei.max() <= EI_FLAT:
        j = int(np.argmax(sig))
        q = pool[j]
        return q[: ctx.dx].copy(), q[ctx.dx:].copy(), float(ei[j])

    order = np.argsort(-ei, kind="stable")[:restarts]
    P, val = pool[order].copy(), ei[order].copy()
    width = np.where(hi > lo, hi - lo, 0.0)
    step = np.tile(0.1 * width, (P.shape[0], 1))
    dirs = np.vstack([np.eye(D), -np.eye(D)])
    for _ in range(max_iter):
        active = np.any(step > 1e-4 * width, axis=1)
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        C = (P[idx, None, :] + dirs[None, :, :] * step[idx, None, :]).reshape(-1, D)
        C = np.clip(C, lo, hi)
        ce, _ = ctx.score(C, T)
        ce = ce.reshape(idx.size, 2 * D)
        best = np.argmax(ce, axis=1)
        gain = ce[np.arange(idx.size), best] > val[idx]
        for r, i in enumerate(idx):
            if gain[r]:
                P[i] = C[r * 2 * D + best[r]]
                val[i] = ce[r, best[r]]
            else:
                step[i] *= 0.5
    k = int(np.argmax(val))
    if val[k] < ei[order[0]]:
        P[k], val[k] = pool[order[0]], ei[order[0]]
    return P[k, : ctx.dx].copy(), P[k, ctx.dx:].copy(), float(val[k])
