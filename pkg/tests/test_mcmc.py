import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit, log_expit

from gfen.admm import NodeLoss, PenaltyConfig, fit_map
from gfen.graph import chain_trails, grid_graph
from gfen.mcmc import (
    ARS,
    ARSError,
    Neighborhood,
    ars_sample,
    conditional_logdensity,
    density_bands,
    run_chain,
    write_samples,
    write_summary,
)
from gfen.tree import DyadicTree, Split


def logistic_h(x):
    return -x - 2 * np.logaddexp(0.0, -x), 1.0 - 2.0 * expit(x)


def log_post(b, n, s, nbr, l1, l2):
    b = np.asarray(b, dtype=float)
    out = s * log_expit(b) + (n - s) * log_expit(-b)
    for w, a, c in zip(nbr, l1, l2):
        out = out - a * np.abs(b - w) - 0.5 * c * (b - w) ** 2
    return out


def quad_mean(logp, lo=-30, hi=30):
    grid = np.linspace(lo, hi, 200001)
    lp = logp(grid)
    w = np.exp(lp - lp.max())
    return integrate.trapezoid(grid * w, grid) / integrate.trapezoid(w, grid)


class TestARS:
    def test_gaussian_moments(self):
        draws = ars_sample(lambda x: (-0.5 * (x - 3) ** 2 / 4, -(x - 3) / 4), 0.0, 1.0, np.random.default_rng(0), 20000)
        assert draws.mean() == pytest.approx(3.0, abs=0.05)
        assert draws.std() == pytest.approx(2.0, abs=0.05)

    def test_logistic_ks(self):
        draws = ars_sample(logistic_h, -1.0, 1.0, np.random.default_rng(1), 20000)
        assert stats.kstest(draws, "logistic").statistic < 0.02

    def test_laplace_with_kink(self):
        h = lambda x: (-abs(x - 1.0), -np.sign(x - 1.0) if x != 1.0 else 0.0)
        draws = ars_sample(h, 5.0, 6.0, np.random.default_rng(2), 20000)
        assert stats.kstest(draws, "laplace", args=(1.0,)).statistic < 0.02

    def test_widens_from_one_side(self):
        a = ARS(lambda x: (-0.5 * (x - 100) ** 2, -(x - 100)), 0.0, 1.0)
        assert a.x[0] < 100 < a.x[-1]

    def test_improper_raises(self):
        with pytest.raises(ARSError):
            ARS(lambda x: (x, 1.0), 0.0, 1.0)

    def test_seeded(self):
        a = ars_sample(logistic_h, -1.0, 1.0, np.random.default_rng(5), 100)
        b = ars_sample(logistic_h, -1.0, 1.0, np.random.default_rng(5), 100)
        assert np.array_equal(a, b)


class TestConditional:
    def test_value_and_derivative(self):
        args = (12.0, 4.0, [0.3, -1.0, 2.0], [0.5, 0.1, 0.0], [1.0, 0.0, 2.0])
        h = conditional_logdensity(*args)
        for b in (-2.3, 0.1, 1.7):
            val, der = h(b)
            eps = 1e-6
            fd = (log_post(b + eps, *args) - log_post(b - eps, *args)) / (2 * eps)
            assert val - h(0.05)[0] == pytest.approx(log_post(b, *args) - log_post(0.05, *args), abs=1e-10)
            assert der == pytest.approx(fd, abs=1e-5)

    def test_curvature_bound(self):
        n, s, nbr, l1, l2 = 20.0, 7.0, [0.0, 1.0], [0.4, 0.4], [0.5, 1.5]
        h = conditional_logdensity(n, s, nbr, l1, l2)
        for b in np.linspace(-4, 4, 41):
            if min(abs(b - w) for w in nbr) < 1e-3:
                continue
            eps = 1e-4
            second = (h(b + eps)[1] - h(b - eps)[1]) / (2 * eps)
            w = expit(b)
            assert second <= -n * w * (1 - w) - sum(l2) + 1e-6

    def test_pure_l2_gaussian(self):
        # no data: the conditional is N(mean of neighbours, 1 / sum lam2)
        h = conditional_logdensity(0.0, 0.0, [1.0, 3.0], [0.0, 0.0], [2.0, 2.0])
        draws = ARS(h, 0.0, 1.0).sample(np.random.default_rng(3), 20000)
        assert draws.mean() == pytest.approx(2.0, abs=0.02)
        assert draws.var() == pytest.approx(0.25, abs=0.01)

    def test_mode_at_empirical_logit(self):
        h = conditional_logdensity(10.0, 3.0, [], [], [])
        assert h(np.log(3 / 7))[1] == pytest.approx(0.0, abs=1e-12)

    def test_improper(self):
        with pytest.raises(ValueError):
            conditional_logdensity(0.0, 0.0, [1.0], [0.0], [0.0])

    def test_single_vertex_mean_matches_quadrature(self):
        args = (8.0, 6.0, [-0.5, 0.5, 1.0], [0.3, 0.3, 0.8], [0.5, 0.5, 0.2])
        draws = ARS(conditional_logdensity(*args), 0.0, 1.0).sample(np.random.default_rng(4), 10000)
        assert draws.mean() == pytest.approx(quad_mean(lambda b: log_post(b, *args)), abs=0.05)


class TestChain:
    def test_isolated_vertex_matches_quadrature(self):
        nb = Neighborhood.from_edges(1, np.zeros((0, 2)), 0.0, 0.0)
        res = run_chain([10.0], [3.0], nb, None, [0.0], iters=10500, burn_in=500, seed=0)
        assert res.samples.shape == (10000, 1)
        expect = quad_mean(lambda b: log_post(b, 10.0, 3.0, [], [], []))
        assert res.samples.mean() == pytest.approx(expect, abs=0.05)

    def test_two_vertex_joint(self):
        n, s, l1, l2 = np.array([6.0, 3.0]), np.array([1.0, 2.0]), 0.5, 1.0
        nb = Neighborhood.from_edges(2, [[0, 1]], l1, l2)
        res = run_chain(n, s, nb, None, [0.0, 0.0], iters=20500, burn_in=500, seed=1)
        g = np.linspace(-12, 10, 1201)
        B0, B1 = np.meshgrid(g, g, indexing="ij")
        lp = (
            s[0] * log_expit(B0) + (n[0] - s[0]) * log_expit(-B0)
            + s[1] * log_expit(B1) + (n[1] - s[1]) * log_expit(-B1)
            - l1 * np.abs(B0 - B1) - 0.5 * l2 * (B0 - B1) ** 2
        )
        w = np.exp(lp - lp.max())
        w /= w.sum()
        np.testing.assert_allclose(res.samples.mean(0), [(w * B0).sum(), (w * B1).sum()], atol=0.05)

    def test_symmetric_missing_ends(self):
        nb = Neighborhood.from_edges(3, [[0, 1], [1, 2]], 0.3, 1.0)
        res = run_chain([0.0, 20.0, 0.0], [0.0, 10.0, 0.0], nb, None, np.zeros(3), iters=20500, burn_in=500, seed=2)
        m = res.samples.mean(0)
        assert m[0] == pytest.approx(m[2], abs=0.05)

    def test_map_inside_band(self):
        n, s = np.array([30.0, 0.0, 30.0]), np.array([5.0, 0.0, 24.0])
        pen = PenaltyConfig(0.5, 1.0)
        fit = fit_map(NodeLoss.binomial(n, s), chain_trails(3), pen)
        nb = Neighborhood.from_edges(3, [[0, 1], [1, 2]], 0.5, 1.0)
        summ = run_chain(n, s, nb, None, fit, iters=3000, burn_in=500, seed=3).summary()
        assert np.all((summ[:, 1] <= fit.beta) & (fit.beta <= summ[:, 2]))

    def test_seeded(self):
        g = grid_graph(3, 4, cyclic=True)
        rng = np.random.default_rng(0)
        n = rng.integers(0, 10, g.n_vertices).astype(float)
        s = rng.binomial(n.astype(int), 0.5).astype(float)
        pen = PenaltyConfig(0.2, 0.5, 0.2, 0.5)
        a = run_chain(n, s, g, pen, np.zeros(g.n_vertices), iters=60, burn_in=10, seed=7)
        b = run_chain(n, s, g, pen, np.zeros(g.n_vertices), iters=60, burn_in=10, seed=7)
        assert np.array_equal(a.samples, b.samples)

    def test_async_mode(self):
        g = grid_graph(3, 4, cyclic=True)
        n = np.full(g.n_vertices, 5.0)
        res = run_chain(n, n / 5, g, PenaltyConfig(0.2, 0.5, 0.2, 0.5), np.zeros(g.n_vertices),
                        iters=40, burn_in=20, thin=2, seed=0, mode="async", workers=3)
        assert res.samples.shape == (10, g.n_vertices) and np.all(np.isfinite(res.samples))

    def test_neighborhood_from_graph(self):
        g = grid_graph(3, 4, cyclic=True)
        nb = Neighborhood.from_graph(g, PenaltyConfig(1.0, 2.0, 3.0, 4.0))
        idx, l1, l2 = nb.of(g.vertex(1, 0))
        assert sorted(idx.tolist()) == sorted([g.vertex(0, 0), g.vertex(2, 0), g.vertex(1, 1), g.vertex(1, 3)])
        assert sorted(l1.tolist()) == [1.0, 1.0, 3.0, 3.0]
        assert sorted(l2.tolist()) == [2.0, 2.0, 4.0, 4.0]

    def test_rejects(self):
        nb = Neighborhood.from_edges(1, np.zeros((0, 2)), 0.0, 0.0)
        with pytest.raises(ValueError):
            run_chain([1.0], [0.0], nb, None, [0.0], iters=10, burn_in=10)
        with pytest.raises(ValueError):
            run_chain([1.0], [0.0], nb, None, [0.0], iters=10, burn_in=1, mode="nope")

    def test_writers(self, tmp_path):
        nb = Neighborhood.from_edges(2, [[0, 1]], 0.1, 0.1)
        res = run_chain([4.0, 4.0], [1.0, 3.0], nb, None, [0.0, 0.0], iters=8, burn_in=4, thin=2, seed=0)
        write_samples(res, tmp_path / "s.csv")
        write_summary(res, tmp_path / "m.csv")
        s = (tmp_path / "s.csv").read_text().splitlines()
        assert s[0] == "iter,vertex,beta" and s[1].startswith("4,0,") and s[3].startswith("6,0,")
        m = np.loadtxt(tmp_path / "m.csv", delimiter=",", skiprows=1)
        assert m.shape == (2, 4)


class TestBands:
    def test_constant_draws(self):
        tree = DyadicTree([Split("", 0.0, 1.0, 0.5)])
        draws = np.zeros((1, 5, 3))
        lo, med, hi = density_bands(tree, draws, lambda m: m.tail_probability(0.5))
        np.testing.assert_allclose([lo, med, hi], 0.5)

    def test_band_brackets_median(self):
        tree = DyadicTree([Split("", 0.0, 1.0, 0.5)])
        draws = np.random.default_rng(0).normal(size=(1, 200, 4))
        lo, med, hi = density_bands(tree, draws, lambda m: m.quantile(0.5), level=0.8)
        assert np.all(lo <= med) and np.all(med <= hi)
        assert np.all(lo < hi)
