import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln
from scipy.stats import binom

from gfen.admm import AdmmOptions, NodeLoss, PenaltyConfig, fit_map
from gfen.graph import decompose_trails, grid_graph
from gfen.selection import (
    GFL_DIMS,
    SEARCH_BOX,
    BayesOptState,
    assign_folds,
    binomial_loglik,
    cv_loss,
    gp_posterior,
    propose_candidates,
    read_best,
    select_best,
    tune,
    write_best,
    write_tuning_log,
)
from gfen.tree import bin_observations, build_quantile_tree

OPTS = AdmmOptions(tol=1e-8, max_iter=20000)


@pytest.fixture(scope="module")
def problem():
    rng = np.random.default_rng(0)
    g = grid_graph(4, 6, cyclic=True)
    vertex = rng.integers(0, g.n_vertices, 600)
    y = rng.gamma(2.0 + (vertex % 6) / 3, 5.0)
    tree = build_quantile_tree(y, 2, n_left_tail=0, n_right_tail=0)
    return g, decompose_trails(g), bin_observations(tree, g.n_vertices, vertex, y)


class TestFolds:
    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(2, 300), k=st.integers(2, 10), seed=st.integers(0, 10**6))
    def test_balanced(self, n, k, seed):
        if k > n:
            return
        f = assign_folds(n, k, seed)
        sizes = np.bincount(f, minlength=k)
        assert f.min() == 0 and f.max() == k - 1
        assert sizes.max() - sizes.min() <= 1

    def test_seeded(self):
        assert np.array_equal(assign_folds(50, 5, 3), assign_folds(50, 5, 3))
        assert not np.array_equal(assign_folds(50, 5, 3), assign_folds(50, 5, 4))

    @pytest.mark.parametrize("n, k", [(10, 1), (3, 4)])
    def test_rejects(self, n, k):
        with pytest.raises(ValueError):
            assign_folds(n, k, 0)


class TestCvLoss:
    def test_loglik_matches_pmf(self):
        n = np.array([5.0, 12.0, 1.0])
        s = np.array([2.0, 12.0, 0.0])
        beta = np.array([0.3, 2.0, -1.0])
        p = 1 / (1 + np.exp(-beta))
        log_comb = gammaln(n + 1) - gammaln(s + 1) - gammaln(n - s + 1)
        np.testing.assert_allclose(binomial_loglik(n, s, beta), binom.logpmf(s, n, p) - log_comb)

    def test_matches_manual_refit(self, problem):
        g, tr, counts = problem
        folds = assign_folds(g.n_vertices, 3, 1)
        pen = PenaltyConfig(0.5, 1.0, 0.2, 0.5)
        res = cv_loss(counts, tr, pen, folds, options=OPTS)
        total = 0.0
        for j in range(3):
            test = folds == j
            for k in range(counts.n_splits):
                n, s = counts.attempts[k], counts.successes[k]
                fit = fit_map(NodeLoss.binomial(n * ~test, s * ~test), tr, pen, OPTS)
                total -= binomial_loglik(n[test], s[test], fit.beta[test]).sum()
        assert res.loss == pytest.approx(total / counts.leaf_counts.sum(), rel=1e-10)
        assert res.fold_points.sum() == counts.leaf_counts.sum()

    def test_point_weighted_average(self, problem):
        g, tr, counts = problem
        res = cv_loss(counts, tr, PenaltyConfig(0.3, 0.3, 0.3, 0.3), assign_folds(g.n_vertices, 4, 2), options=OPTS)
        w = res.fold_points / res.fold_points.sum()
        assert res.loss == pytest.approx(float(w @ res.fold_losses))

    def test_threads_deterministic(self, problem):
        g, tr, counts = problem
        folds = assign_folds(g.n_vertices, 3, 5)
        pen = PenaltyConfig(0.4, 0.6, 0.1, 0.9)
        a = cv_loss(counts, tr, pen, folds, options=OPTS, threads=1)
        b = cv_loss(counts, tr, pen, folds, options=OPTS, threads=4)
        assert a.loss == b.loss

    def test_smoothing_beats_no_smoothing(self, problem):
        # unpenalised fits cannot predict held-out vertices at all (beta = 0 there)
        g, tr, counts = problem
        folds = assign_folds(g.n_vertices, 4, 0)
        smooth = cv_loss(counts, tr, PenaltyConfig(0.1, 3.0, 0.1, 3.0), folds, options=OPTS)
        rough = cv_loss(counts, tr, PenaltyConfig(1e-3, 1e-3, 1e-3, 1e-3), folds, options=OPTS)
        assert smooth.loss < rough.loss


class TestGaussianProcess:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-2, 7, (15, 2))
        y = rng.normal(size=15)
        Xs = rng.uniform(-2, 7, (7, 2))
        a, noise = 0.15, 0.1
        k = lambda A, B: np.exp(-a * ((A[:, None] - B[None]) ** 2).sum(-1))
        Kinv = np.linalg.inv(k(X, X) + noise**2 * np.eye(15))
        mean, cov = gp_posterior(X, y, Xs, bandwidth=a, noise=noise, full_cov=True)
        np.testing.assert_allclose(mean, k(Xs, X) @ Kinv @ y, atol=1e-6)
        np.testing.assert_allclose(cov, k(Xs, Xs) - k(Xs, X) @ Kinv @ k(X, Xs), atol=1e-6)

    def test_interpolates_and_reverts(self):
        X = np.array([[0.0], [1.0]])
        mean, var = gp_posterior(X, [1.0, -1.0], np.array([[0.0], [1.0], [100.0]]), bandwidth=3.0, noise=1e-3)
        np.testing.assert_allclose(mean[:2], [1.0, -1.0], atol=1e-3)
        assert mean[2] == pytest.approx(0.0) and var[2] == pytest.approx(1.0)
        assert np.all(var[:2] < 1e-4)


class TestBayesOpt:
    def test_first_batch_uniform_in_box(self):
        c = propose_candidates(BayesOptState(), 6, np.random.default_rng(0))
        assert c.shape == (6, 4)
        assert np.all((c >= SEARCH_BOX[0]) & (c <= SEARCH_BOX[1]))

    def test_candidates_distinct_and_in_box(self):
        rng = np.random.default_rng(1)
        st_ = BayesOptState()
        for x in rng.uniform(-2, 7, (10, 4)):
            st_.add(x, float((x**2).sum()))
        c = propose_candidates(st_, 6, rng)
        assert len({tuple(r) for r in c}) == 6
        assert np.all((c >= SEARCH_BOX[0]) & (c <= SEARCH_BOX[1]))

    def test_active_dims(self):
        st_ = BayesOptState(active=GFL_DIMS)
        assert st_.dim == 2
        pen = st_.to_penalties([0.0, 1.0])
        assert pen.as_array().tolist() == [1.0, 0.0, 10.0, 0.0]

    def test_select_best_smooths_noise(self):
        st_ = BayesOptState(bandwidth=0.1)
        for x, yv in [(0.0, 1.0), (0.1, 5.0), (0.2, 5.0), (5.0, 2.0), (5.1, 2.0)]:
            st_.add([x, 0, 0, 0], yv)
        # the single low value sits among high neighbours; the GP prefers the consistent basin
        assert select_best(st_) in (3, 4)

    def test_beats_random_search_on_quadratic(self):
        wins = 0
        for trial in range(10):
            rng = np.random.default_rng(trial)
            centre = rng.uniform(-1, 5, 4)
            f = lambda x: float(((x - centre) ** 2).sum())
            st_ = BayesOptState()
            for _ in range(10):
                for x in propose_candidates(st_, 6, rng):
                    st_.add(x, f(x))
            wins += min(st_.y) < min(f(x) for x in rng.uniform(*SEARCH_BOX, size=(60, 4)))
        assert wins >= 7


class TestTune:
    def test_small_run(self, problem, tmp_path):
        g, tr, counts = problem
        folds = assign_folds(g.n_vertices, 3, 0)
        res = tune(counts, tr, folds, generations=2, n_candidates=3, seed=1, options=OPTS)
        assert set(res.best) == set(range(counts.n_splits))
        assert len(res.log) == counts.n_splits * 2 * 3
        write_best(res.best, tmp_path / "best.json")
        assert read_best(tmp_path / "best.json") == res.best
        write_tuning_log(res.log, tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "split,generation,lambda_s1,lambda_s2,lambda_t1,lambda_t2,cv_nll"
        assert len(lines) == 1 + len(res.log)

    def test_seeded(self, problem):
        g, tr, counts = problem
        folds = assign_folds(g.n_vertices, 3, 0)
        a = tune(counts, tr, folds, generations=2, n_candidates=2, seed=4, per_split=False, options=OPTS)
        b = tune(counts, tr, folds, generations=2, n_candidates=2, seed=4, per_split=False, options=OPTS)
        assert a.log == b.log and list(a.best) == ["shared"]
