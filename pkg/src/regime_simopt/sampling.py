"""Space-filling designs and seed derivation."""

from __future__ import annotations

import hashlib

import numpy as np


def _as_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if np.any(b[:, 1] < b[:, 0]):
        raise ValueError("bounds must satisfy lo <= hi")
    return b


def _min_dist(P: np.ndarray) -> float:
    if P.shape[0] < 2:
        return np.inf
    d2 = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=-1)
    d2[np.diag_indices_from(d2)] = np.inf
    return float(np.sqrt(d2.min()))


def lhs(n: int, bounds, seed=None, candidates: int = 100) -> np.ndarray:
    """Latin hypercube of ``n`` points in a box, maximin over ``candidates`` random designs.

    Each dimension is cut into ``n`` equal strata and every stratum holds
    exactly one point. Among the candidate designs, the one with the largest
    minimum pairwise distance (in unit-cube coordinates) is returned.

    Parameters
    ----------
    n : int
    bounds : array_like, shape (d, 2)
    seed : int or Generator, optional
    candidates : int
        Number of random LHS designs to compare; 1 disables the maximin step.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    b = _as_bounds(bounds)
    d = b.shape[0]
    rng = np.random.default_rng(seed)
    best, best_score = None, -np.inf
    for _ in range(max(candidates, 1)):
        u = (np.argsort(rng.random((n, d)), axis=0) + rng.random((n, d))) / n
        score = _min_dist(u)
        if best is None or score > best_score:
            best, best_score = u, score
    return b[:, 0] + best * (b[:, 1] - b[:, 0])


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed from a master seed and a path of labels (sha256-based)."""
    key = ":".join([str(int(master))] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big") >> 1
