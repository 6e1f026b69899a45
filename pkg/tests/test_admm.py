import warnings

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import expit, logit

from gfen.admm import (
    GAUSSIAN,
    AdmmOptions,
    NodeLoss,
    PenaltyConfig,
    TrailLayout,
    fit_map,
    gfl_mode,
    gmrf_mode,
    step_size_adapt,
)
from gfen.graph import chain_trails, decompose_trails, grid_graph

TIGHT = AdmmOptions(tol=1e-10, max_iter=50000)
CVX = dict(tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11, max_iter=500)


def gap_chain(y1, y3):
    """Gaussian 3-chain with data at the ends and none in the middle."""
    return NodeLoss(GAUSSIAN, np.array([1.0, 0.0, 1.0]), np.array([y1, 0.0, y3]))


def cvx_binomial(n, s, edges, l1, l2):
    beta = cp.Variable(n.size)
    d = beta[edges[:, 0]] - beta[edges[:, 1]]
    obj = cp.sum(cp.multiply(n, cp.logistic(beta)) - cp.multiply(s, beta))
    obj += l1 * cp.norm1(d) + l2 / 2 * cp.sum_squares(d)
    cp.Problem(cp.Minimize(obj)).solve(solver=cp.CLARABEL, **CVX)
    return beta.value


class TestPenaltyConfig:
    @pytest.mark.parametrize("vals", [(-1, 0, 0, 0), (0, np.nan, 0, 0), (0, 0, np.inf, 0)])
    def test_rejects(self, vals):
        with pytest.raises(ValueError):
            PenaltyConfig(*vals)

    def test_roundtrip(self):
        p = PenaltyConfig(0.1, 0.2, 0.3, 0.4)
        assert PenaltyConfig.from_dict(p.as_dict()) == p
        assert PenaltyConfig.from_array(p.as_array()) == p
        assert list(p.as_dict()) == ["lambda_s1", "lambda_s2", "lambda_t1", "lambda_t2"]


class TestGaussianChain:
    """Three vertices, middle one unobserved; minimisers derived from the KKT conditions."""

    @pytest.mark.parametrize("seed", range(10))
    def test_l1_below_threshold(self, seed):
        rng = np.random.default_rng(seed)
        y1, y3 = np.sort(rng.uniform(-5, 5, 2))
        lam = rng.uniform(0, 0.49) * (y3 - y1)
        b = gfl_mode(gap_chain(y1, y3), chain_trails(3), lam, TIGHT).beta
        assert b[0] == pytest.approx(y1 + lam, abs=1e-6)
        assert b[2] == pytest.approx(y3 - lam, abs=1e-6)
        assert b[0] - 1e-8 <= b[1] <= b[2] + 1e-8

    @pytest.mark.parametrize("seed", range(10))
    def test_l1_fused(self, seed):
        rng = np.random.default_rng(seed)
        y1, y3 = np.sort(rng.uniform(-5, 5, 2))
        lam = (0.5 + rng.uniform(0, 2)) * (y3 - y1)
        b = gfl_mode(gap_chain(y1, y3), chain_trails(3), lam, TIGHT).beta
        np.testing.assert_allclose(b, np.full(3, 0.5 * (y1 + y3)), atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_l2(self, seed):
        rng = np.random.default_rng(seed)
        y1, y3 = rng.uniform(-5, 5, 2)
        lam = 10 ** rng.uniform(-2, 1)
        b = gmrf_mode(gap_chain(y1, y3), chain_trails(3), lam, TIGHT).beta
        half = 0.5 * (y3 - y1)
        shrink = lam / (1 + lam) * half
        np.testing.assert_allclose(b, [y1 + shrink, 0.5 * (y1 + y3), y3 - shrink], atol=1e-7)

    @pytest.mark.parametrize("seed", range(10))
    def test_elastic_net(self, seed):
        # the half-gap d solves D/2 - d = l1 + l2 d, so d = (D/2 - l1) / (1 + l2)
        rng = np.random.default_rng(seed)
        y1, y3 = np.sort(rng.uniform(-5, 5, 2))
        half = 0.5 * (y3 - y1)
        l1, l2 = rng.uniform(0, 1.5) * half, 10 ** rng.uniform(-2, 1)
        b = fit_map(gap_chain(y1, y3), chain_trails(3), PenaltyConfig(l1, l2), TIGHT).beta
        d = max(half - l1, 0.0) / (1 + l2)
        m = 0.5 * (y1 + y3)
        np.testing.assert_allclose(b, [m - d, m, m + d], atol=1e-7)

    def test_elastic_net_hand_value(self):
        b = fit_map(gap_chain(0.0, 4.0), chain_trails(3), PenaltyConfig(0.5, 1.0), TIGHT).beta
        np.testing.assert_allclose(b, [1.25, 2.0, 2.75], atol=1e-8)

    def test_shrink_then_smooth_is_not_optimal(self):
        # adding the l1 shift to the l2 shrinkage over-shrinks when both are active
        loss, tr, pen = gap_chain(0.0, 4.0), chain_trails(3), PenaltyConfig(0.5, 1.0)
        naive = np.array([0.5 + 1.0, 2.0, 3.5 - 1.0])
        layout = TrailLayout(tr, 3)
        value = lambda b: loss.value(b) + layout.penalty_value(b, pen)
        best = fit_map(loss, tr, pen, TIGHT).beta
        assert value(best) < value(naive) - 1e-3

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        g = grid_graph(4, 4, cyclic=False)
        tr = decompose_trails(g)
        n = rng.integers(0, 4, g.n_vertices).astype(float)
        s = n * rng.normal(size=g.n_vertices)
        pen = PenaltyConfig(0.3, 0.5, 0.2, 0.1)
        a = fit_map(NodeLoss(GAUSSIAN, n, s), tr, pen, TIGHT).beta
        b = fit_map(NodeLoss(GAUSSIAN, n, s + 2.5 * n), tr, pen, TIGHT).beta
        np.testing.assert_allclose(b, a + 2.5, atol=1e-7)


class TestBinomial:
    @pytest.mark.parametrize("seed", range(5))
    def test_unpenalised_is_mle(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(5, 200, 12).astype(float)
        s = np.clip(rng.binomial(n.astype(int), 0.3), 1, n - 1).astype(float)
        b = fit_map(NodeLoss.binomial(n, s), chain_trails(12), PenaltyConfig(), TIGHT).beta
        np.testing.assert_allclose(b, logit(s / n), atol=1e-8)

    @pytest.mark.parametrize("seed", range(8))
    def test_l1_chain(self, seed):
        # stationarity at the ends: N sigma(b) - s = +-lam while the ends stay apart
        rng = np.random.default_rng(seed)
        N = float(rng.integers(10, 100))
        s1, s3 = np.sort(rng.integers(1, N, 2)).astype(float)
        if s3 - s1 < 2:
            s3 = min(s1 + 2, N - 1)
        lam = rng.uniform(0, 0.45) * (s3 - s1)
        loss = NodeLoss.binomial([N, 0, N], [s1, 0, s3])
        b = gfl_mode(loss, chain_trails(3), lam, TIGHT).beta
        assert b[0] == pytest.approx(logit((s1 + lam) / N), abs=1e-6)
        assert b[2] == pytest.approx(logit((s3 - lam) / N), abs=1e-6)

    @pytest.mark.parametrize("seed", range(8))
    def test_elastic_net_chain(self, seed):
        # with the middle at the midpoint, the half-gap d solves one scalar equation
        rng = np.random.default_rng(seed)
        N = float(rng.integers(10, 100))
        s1, s3 = float(rng.integers(1, N // 2)), float(rng.integers(N // 2 + 1, N))
        l1, l2 = rng.uniform(0, 1), 10 ** rng.uniform(-1, 1)
        loss = NodeLoss.binomial([N, 0, N], [s1, 0, s3])
        b = fit_map(loss, chain_trails(3), PenaltyConfig(l1, l2), TIGHT).beta
        m = b[1]
        f = lambda d: N * expit(m - d) - s1 - l1 - l2 * d
        d = brentq(f, 0, 50) if f(0) > 0 else 0.0
        np.testing.assert_allclose(b, [m - d, m, m + d], atol=1e-6)

    def test_logit_substitution_is_not_exact(self):
        N, y1, y3, lam = 10.0, 2.0, 8.0, 1.0
        b = gmrf_mode(NodeLoss.binomial([N, 0, N], [y1, 0, y3]), chain_trails(3), lam, TIGHT).beta
        b1, b3 = logit(y1 / N), logit(y3 / N)
        substituted = b1 + lam / (1 + lam) * 0.5 * (b3 - b1)
        assert b[0] == pytest.approx(-0.8969, abs=1e-4)
        assert abs(b[0] - substituted) > 0.1

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_convex_solver(self, seed):
        rng = np.random.default_rng(seed)
        g = grid_graph(5, 4, cyclic=True)
        n = rng.integers(0, 30, g.n_vertices).astype(float)
        s = rng.binomial(n.astype(int), 0.4).astype(float)
        pen = PenaltyConfig(*rng.uniform(0.05, 2.0, 4))
        b = fit_map(NodeLoss.binomial(n, s), decompose_trails(g), pen, TIGHT).beta
        edges = np.vstack([g.spatial_edges, g.temporal_edges])
        lam = np.r_[np.full(len(g.spatial_edges), 1.0), np.zeros(len(g.temporal_edges))]
        beta = cp.Variable(g.n_vertices)
        d = beta[edges[:, 0]] - beta[edges[:, 1]]
        l1 = pen.spatial_l1 * lam + pen.temporal_l1 * (1 - lam)
        l2 = pen.spatial_l2 * lam + pen.temporal_l2 * (1 - lam)
        obj = cp.sum(cp.multiply(n, cp.logistic(beta)) - cp.multiply(s, beta))
        obj += cp.sum(cp.multiply(l1, cp.abs(d))) + cp.sum(cp.multiply(l2 / 2, cp.square(d)))
        cp.Problem(cp.Minimize(obj)).solve(solver=cp.CLARABEL, **CVX)
        np.testing.assert_allclose(b, beta.value, atol=1e-5)

    def test_chain_matches_convex_solver(self):
        rng = np.random.default_rng(11)
        n = rng.integers(0, 20, 15).astype(float)
        s = rng.binomial(n.astype(int), 0.6).astype(float)
        edges = np.stack([np.arange(14), np.arange(1, 15)], 1)
        b = fit_map(NodeLoss.binomial(n, s), chain_trails(15), PenaltyConfig(0.7, 0.4), TIGHT).beta
        np.testing.assert_allclose(b, cvx_binomial(n, s, edges, 0.7, 0.4), atol=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(alpha=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
    def test_step_size_invariance(self, alpha, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(1, 30, 10).astype(float)
        s = rng.binomial(n.astype(int), 0.5).astype(float)
        loss, tr, pen = NodeLoss.binomial(n, s), chain_trails(10), PenaltyConfig(0.5, 0.5)
        a = fit_map(loss, tr, pen, TIGHT).beta
        b = fit_map(loss, tr, pen, AdmmOptions(tol=1e-10, max_iter=50000, alpha=alpha)).beta
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_all_zero_or_all_success_stays_finite(self):
        loss = NodeLoss.binomial([10, 10, 10, 10], [0, 0, 10, 10])
        f = fit_map(loss, chain_trails(4), PenaltyConfig(0.5, 0.5), TIGHT)
        assert np.all(np.isfinite(f.beta)) and f.converged
        assert f.beta[0] < 0 < f.beta[3]


class TestDiagnostics:
    def test_missing_without_l2_warns(self):
        loss = NodeLoss.binomial([5, 0, 5], [1, 0, 4])
        with pytest.warns(UserWarning, match="not unique"):
            fit_map(loss, chain_trails(3), PenaltyConfig(0.5, 0.0))

    def test_ridge_or_l2_silences(self):
        loss = NodeLoss.binomial([5, 0, 5], [1, 0, 4])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            fit_map(loss, chain_trails(3), PenaltyConfig(0.5, 0.1))
            gfl_mode(loss, chain_trails(3), 0.5)

    def test_nonconvergence_returns_flag(self, caplog):
        loss = NodeLoss.binomial([50, 3, 40, 7], [10, 1, 30, 2])
        f = fit_map(loss, chain_trails(4), PenaltyConfig(0.5, 0.5), AdmmOptions(tol=1e-14, max_iter=3))
        assert not f.converged and f.iterations == 3
        assert "did not converge" in caplog.text

    def test_nonfinite_raises(self):
        loss = NodeLoss.binomial([5, 5], [1, 4])
        with pytest.raises(FloatingPointError):
            fit_map(loss, chain_trails(2), PenaltyConfig(0.5, 0.5), init=[np.nan, 0.0])

    def test_trace(self, tmp_path):
        loss = NodeLoss.binomial([5, 2, 5], [1, 1, 4])
        f = fit_map(loss, chain_trails(3), PenaltyConfig(0.5, 0.5), AdmmOptions(trace=True))
        f.write_trace(tmp_path / "t.csv")
        rows = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
        assert rows.shape == (f.iterations, 5)

    def test_objective_reported(self):
        loss = NodeLoss.binomial([5, 2, 5], [1, 1, 4])
        pen = PenaltyConfig(0.5, 0.5)
        f = fit_map(loss, chain_trails(3), pen, TIGHT)
        expect = loss.value(f.beta) + TrailLayout(chain_trails(3), 3).penalty_value(f.beta, pen)
        assert f.objective == pytest.approx(expect)

    @pytest.mark.parametrize(
        "primal, dual, expect",
        [(100.0, 1.0, 2.0), (1.0, 100.0, 0.5), (1.0, 2.0, 1.0)],
    )
    def test_step_size_adapt(self, primal, dual, expect):
        assert step_size_adapt(1.0, primal, dual)[0] == expect

    @pytest.mark.parametrize("bad", [dict(n=[1, 2], s=[1]), dict(n=[-1.0], s=[0.0]), dict(n=[2.0], s=[3.0])])
    def test_rejects_bad_loss(self, bad):
        with pytest.raises(ValueError):
            NodeLoss.binomial(bad["n"], bad["s"])
