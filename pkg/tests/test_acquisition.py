import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regime_simopt.acquisition import (
    DegenerateCandidate,
    EiContext,
    _seed_pool,
    _tilde_parts,
    ei_closed_form,
    expected_improvement,
    optimize_ei,
    tilde_sigma,
)
from regime_simopt.surrogate import AggregateModel, DesignSet, KernelHyperparams, SurrogateModel, posterior_mean_cov

from oracles import normal_cdf, normal_pdf


def make_model(seed, n=8, noise=True, s2=1.0, ls=1.0, noise_mode="heteroscedastic", noise_var=0.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 5, (n, 1))
    L = rng.uniform(0, 3, (n, 1))
    y = np.sin(X[:, 0]) + 0.3 * L[:, 0] + (0.1 * rng.standard_normal(n) if noise else 0.0)
    v = np.full(n, 0.2) if noise else np.zeros(n)
    m = np.full(n, 10) if noise else np.ones(n, int)
    h = KernelHyperparams(s2, [ls], [ls], noise_var=noise_var)
    return SurrogateModel(DesignSet(X, L, y, v, m), h, noise_mode=noise_mode)


def make_agg(s, seed=0, k=4):
    rng = np.random.default_rng(seed + 100)
    atoms = rng.uniform(0.5, 2.5, (k, 1))
    return AggregateModel(s, atoms, rng.dirichlet(np.ones(k)))


class TestClosedForm:
    def test_zero_delta_unit_sigma(self):
        assert abs(ei_closed_form(0.0, 1.0) - 0.3989423) < 1e-6

    def test_small_sigma_limit(self):
        assert abs(ei_closed_form(1.0, 1e-12) - 1.0) < 1e-6
        assert ei_closed_form(1.0, 0.0) == 1.0
        assert ei_closed_form(-1.0, 0.0) == 0.0

    def test_negative_delta_oracle(self):
        ref = -1.0 * normal_cdf(-2.0) + 0.5 * normal_pdf(-2.0)
        assert abs(ei_closed_form(-1.0, 0.5) - ref) < 1e-6
        assert abs(ref - 0.0042453513) < 1e-9

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(0)
        d = rng.normal(0, 10, 100_000)
        s = np.abs(rng.normal(0, 5, 100_000)) * (rng.random(100_000) > 0.05)
        assert np.all(ei_closed_form(d, s) >= 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(0, 10), st.floats(0, 10))
def test_ei_monotone_in_sigma(delta, s1, s2):
    lo, hi = sorted([s1, s2])
    assert ei_closed_form(delta, hi) >= ei_closed_form(delta, lo) - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5))
def test_ei_continuous_at_zero_sigma(delta):
    assert abs(ei_closed_form(delta, 1e-9) - max(delta, 0.0)) < 1e-8


class TestTildeSigma:
    def test_distant_candidate_formula(self):
        s = make_model(1, noise_mode="pooled", noise_var=0.4, s2=2.0)
        agg = make_agg(s, 1)
        xq, cx, cl = np.array([60.0]), np.array([60.5]), np.array([1.3])
        kx = math.exp(-0.5 * 0.5 ** 2)
        lw = sum(w * math.exp(-0.5 * (a[0] - 1.3) ** 2) for a, w in zip(agg.atoms, agg.omega))
        ref = (2.0 * kx * lw / math.sqrt(2.0 + 0.4 / 5)) ** 2
        assert abs(tilde_sigma(agg, xq, (cx, cl), m=5) ** 2 - ref) < 1e-10

    def test_coincident_noiseless_point(self):
        s = make_model(2, noise=False)
        agg = make_agg(s, 2)
        x0, l0 = s.design.X[0], s.design.L[0]
        num, den2 = _tilde_parts(agg, x0, x0, l0, 1)
        assert num[0] ** 2 <= 1e-8 and den2[0] <= 1e-14
        with pytest.raises(DegenerateCandidate):
            tilde_sigma(agg, x0, (x0, l0))
        ctx = EiContext(agg, [0.0], [5.0])
        assert expected_improvement(ctx, (x0, l0)) == 0.0

    def test_single_draw_collapse(self):
        s = make_model(3)
        agg = AggregateModel(s, [[1.1]], [1.0])
        xq, cand = np.array([2.0]), (np.array([2.7]), np.array([0.8]))
        num = posterior_mean_cov(s, (xq, [1.1]), cand)[1]
        den = posterior_mean_cov(s, cand, cand)[1] + s.noise_at(cand[0], cand[1], 1)[0]
        assert abs(tilde_sigma(agg, xq, cand) - abs(num) / math.sqrt(den)) < 1e-12

    def test_uncorrelated_candidate_zero(self):
        s = make_model(4)
        agg = make_agg(s, 4)
        assert tilde_sigma(agg, [1.0], ([1.0], [500.0])) == 0.0


def near_point_suppression(seed):
    """EI 1e-3 lengthscales from a random design point vs 3 lengthscales away, noiseless model."""
    rng = np.random.default_rng(seed + 500)
    s = make_model(seed, noise=False)
    agg = make_agg(s, seed)
    ctx = EiContext(agg, [-10.0], [20.0])
    j = int(rng.integers(s.n))
    sign = rng.choice([-1.0, 1.0])
    x0, l0 = s.design.X[j], s.design.L[j]
    near = expected_improvement(ctx, (x0 + sign * 1e-3, l0))
    far = expected_improvement(ctx, (x0 + sign * 3.0, l0))
    return near, far


def test_near_point_suppression_on_random_models():
    results = [near_point_suppression(seed) for seed in range(20)]
    held = [near < far for near, far in results]
    assert all(held), f"property held on {sum(held)}/20 models"


class TestOptimizeEi:
    def test_within_bounds_and_beats_pool(self):
        s = make_model(5)
        agg = make_agg(s, 5)
        ctx = EiContext(agg, [0.0], [5.0])
        x, lam, val = optimize_ei(ctx, seed=7)
        assert np.all(x >= 0) and np.all(x <= 5)
        assert np.all(lam >= ctx.lam_lo) and np.all(lam <= ctx.lam_hi)
        pool = _seed_pool(ctx, np.random.default_rng(7), max(128, 64 * 2))
        assert val >= ctx.score(pool)[0].max() - 1e-15
        assert val == pytest.approx(expected_improvement(ctx, (x, lam)), rel=1e-12)

    def test_deterministic(self):
        ctx = EiContext(make_agg(make_model(6), 6), [0.0], [5.0])
        a, b = optimize_ei(ctx, seed=3), optimize_ei(ctx, seed=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_dense_grid_oracle(self):
        for seed in (8, 9, 10):
            ctx = EiContext(make_agg(make_model(seed), seed), [0.0], [5.0])
            _, _, val = optimize_ei(ctx, seed=seed)
            gx, gl = np.meshgrid(np.linspace(0, 5, 100), np.linspace(ctx.lam_lo[0], ctx.lam_hi[0], 100))
            grid = np.column_stack([gx.ravel(), gl.ravel()])
            assert val >= 0.95 * ctx.score(grid)[0].max()

    def test_explores_away_from_single_incumbent(self):
        d = DesignSet([[0.0]], [[1.0]], [0.0], [0.0], [1])
        s = SurrogateModel(d, KernelHyperparams(1.0, [1.0], [1.0]))
        ctx = EiContext(AggregateModel(s, [[1.0]], [1.0]), [-5.0], [5.0])
        x, _, _ = optimize_ei(ctx, seed=0)
        assert abs(x[0]) >= 1.0

    def test_flat_ei_picks_max_sigma(self):
        rng = np.random.default_rng(11)
        X = rng.uniform(0, 5, (6, 1))
        L = rng.uniform(0, 3, (6, 1))
        d = DesignSet(X, L, np.zeros(6), np.zeros(6), np.ones(6, int))
        s = SurrogateModel(d, KernelHyperparams(1e-26, [1.0], [1.0]))
        ctx = EiContext(make_agg(s, 11), [0.0], [5.0])
        x, lam, val = optimize_ei(ctx, seed=2)
        pool = _seed_pool(ctx, np.random.default_rng(2), 128)
        ei, sig = ctx.score(pool)
        assert ei.max() <= 1e-12
        j = int(np.argmax(sig))
        np.testing.assert_array_equal(np.concatenate([x, lam]), pool[j])

    def test_incumbent_tracks_model(self):
        s = make_model(12)
        agg = make_agg(s, 12)
        ctx = EiContext(agg, [0.0], [5.0])
        ev = np.unique(s.design.X, axis=0)
        assert ctx.incumbent == pytest.approx(agg.mean(ev).min())

    def test_decision_only_context(self):
        rng = np.random.default_rng(13)
        X = rng.uniform(0, 5, (6, 1))
        d = DesignSet(X, np.zeros((6, 0)), np.sin(X[:, 0]), np.full(6, 0.1), np.full(6, 5))
        s = SurrogateModel(d, KernelHyperparams(1.0, [1.0]))
        ctx = EiContext(AggregateModel(s, np.zeros((1, 0)), [1.0]), [0.0], [5.0])
        x, lam, val = optimize_ei(ctx, seed=0)
        assert lam.size == 0 and 0 <= x[0] <= 5 and val >= 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3.0, 3.0), st.floats(0.5, 6.0))
def test_optimizer_respects_bounds(seed, lo, width):
    ctx = EiContext(make_agg(make_model(seed % 1000), seed % 7), [lo], [lo + width])
    x, lam, val = optimize_ei(ctx, seed=seed, n_pool=64)
    assert lo <= x[0] <= lo + width
    assert ctx.lam_lo[0] <= lam[0] <= ctx.lam_hi[0]
    assert val >= 0
