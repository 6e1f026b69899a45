"""Gibbs sampling of split fields with adaptive rejection sampling.

The target for one split is ``exp(-objective)`` with the objective of
:mod:`gfen.admm` (binomial likelihood, l1 and halved-l2 edge penalties), so
the MAP of the chain is the ADMM solution.
"""

from __future__ import annotations

import bisect
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .admm import PenaltyConfig, SplitField
from .graph import SpatioTemporalGraph

logger = logging.getLogger(__name__)

INIT_PERTURBATION = 1.0
MAX_WIDEN = 60
MAX_HULL = 60


class ARSError(RuntimeError):
    pass


def _log_sigmoid(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x > 0 else x - math.log1p(math.exp(x))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class ARS:
    """Tangent-based adaptive rejection sampler for a log-concave density on the real line.

    ``h(x)`` returns ``(log_density, derivative)`` up to an additive
    constant.  At kinks any supergradient is a valid derivative.
    """

    def __init__(self, h, lo: float, hi: float, max_points: int = MAX_HULL):
        self.h = h
        self.max_points = max_points
        lo, hi = float(lo), float(hi)
        if not lo < hi:
            lo, hi = min(lo, hi) - 1.0, max(lo, hi) + 1.0
        hlo, dlo = h(lo)
        step = max(hi - lo, 1.0)
        for _ in range(MAX_WIDEN):
            if dlo > 0:
                break
            lo -= step
            step *= 2
            hlo, dlo = h(lo)
        else:
            raise ARSError(f"no point with positive slope found left of {lo}")
        hhi, dhi = h(hi)
        step = max(hi - lo, 1.0)
        for _ in range(MAX_WIDEN):
            if dhi < 0:
                break
            hi += step
            step *= 2
            hhi, dhi = h(hi)
        else:
            raise ARSError(f"no point with negative slope found right of {hi}")
        self.x = [lo, hi]
        self.hx = [hlo, hhi]
        self.dx = [dlo, dhi]
        self._update()

    def _update(self):
        x, hx, dx = self.x, self.hx, self.dx
        k = len(x)
        z = []
        for j in range(k - 1):
            d = dx[j] - dx[j + 1]
            if d > 1e-12 * max(abs(dx[j]), abs(dx[j + 1]), 1.0):
                zj = (hx[j + 1] - hx[j] - x[j + 1] * dx[j + 1] + x[j] * dx[j]) / d
                zj = min(max(zj, x[j]), x[j + 1])
            else:
                zj = 0.5 * (x[j] + x[j + 1])
            z.append(zj)
        self.z = [-math.inf] + z + [math.inf]
        logm = []
        for j in range(k):
            logm.append(self._seg_logmass(j))
        top = max(logm)
        w = [math.exp(v - top) for v in logm]
        total = sum(w)
        self.cum = list(np.cumsum(w) / total)

    def _seg_logmass(self, j):
        L, R = self.z[j], self.z[j + 1]
        b = self.dx[j]
        a = self.hx[j] - b * self.x[j]
        if R <= L:
            return -math.inf
        if b > 0:
            w = R - L
            tail = 0.0 if math.isinf(w) else math.exp(-b * w)
            return a + b * R + math.log1p(-tail) - math.log(b)
        if b < 0:
            w = R - L
            tail = 0.0 if math.isinf(w) else math.exp(b * w)
            return a + b * L + math.log1p(-tail) - math.log(-b)
        return a + math.log(R - L)

    def _upper(self, j, xv):
        return self.hx[j] + self.dx[j] * (xv - self.x[j])

    def _draw_upper(self, rng):
        j = bisect.bisect_left(self.cum, rng.random())
        j = min(j, len(self.x) - 1)
        L, R = self.z[j], self.z[j + 1]
        b = self.dx[j]
        U = rng.random()
        if b > 0:
            tail = 0.0 if math.isinf(L) else math.exp(-b * (R - L))
            xv = R + math.log(U + (1.0 - U) * tail) / b
        elif b < 0:
            tail = 0.0 if math.isinf(R) else math.exp(b * (R - L))
            xv = L + math.log(U + (1.0 - U) * tail) / b
        else:
            xv = L + U * (R - L)
        return j, xv

    def sample(self, rng, size: int | None = None):
        """One draw (``size=None``) or an array of ``size`` draws."""
        if size is not None:
            return np.array([self.sample(rng) for _ in range(size)])
        for _ in range(10_000):
            j, xv = self._draw_upper(rng)
            if not math.isfinite(xv):
                continue
            u = self._upper(j, xv)
            logU = math.log(rng.random())
            i = bisect.bisect_left(self.x, xv)
            if 0 < i < len(self.x):
                # squeeze: chord between neighbouring abscissae
                x0, x1 = self.x[i - 1], self.x[i]
                low = ((x1 - xv) * self.hx[i - 1] + (xv - x0) * self.hx[i]) / (x1 - x0)
                if logU <= low - u:
                    return xv
            hv, dv = self.h(xv)
            accept = logU <= hv - u
            if len(self.x) < self.max_points and xv not in self.x:
                self.x.insert(i, xv)
                self.hx.insert(i, hv)
                self.dx.insert(i, dv)
                self._update()
            if accept:
                return xv
        raise ARSError("rejection loop did not terminate")


def ars_sample(logdensity, init_lo: float, init_hi: float, rng, size: int | None = None):
    """Exact draw(s) from the log-concave density ``logdensity``.

    ``logdensity(x) -> (log f(x) + C, d/dx log f(x))``.  Initial points are
    widened geometrically until their slopes bracket the mode.
    """
    return ARS(logdensity, init_lo, init_hi).sample(rng, size)


@dataclass
class Neighborhood:
    """CSR neighbour lists with the edge's (l1, l2) weights."""

    indptr: np.ndarray
    nbr: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray

    @classmethod
    def from_graph(cls, graph: SpatioTemporalGraph, penalties: PenaltyConfig) -> "Neighborhood":
        es, et = graph.spatial_edges, graph.temporal_edges
        src = np.concatenate([es[:, 0], es[:, 1], et[:, 0], et[:, 1]])
        dst = np.concatenate([es[:, 1], es[:, 0], et[:, 1], et[:, 0]])
        n_s, n_t = 2 * len(es), 2 * len(et)
        l1 = np.concatenate([np.full(n_s, penalties.spatial_l1), np.full(n_t, penalties.temporal_l1)])
        l2 = np.concatenate([np.full(n_s, penalties.spatial_l2), np.full(n_t, penalties.temporal_l2)])
        order = np.lexsort((dst, src))
        src, dst, l1, l2 = src[order], dst[order], l1[order], l2[order]
        indptr = np.searchsorted(src, np.arange(graph.n_vertices + 1))
        return cls(indptr, dst, l1, l2)

    @classmethod
    def from_edges(cls, n_vertices, edges, lam1, lam2) -> "Neighborhood":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        lam1 = np.broadcast_to(np.asarray(lam1, dtype=float), (len(edges),))
        lam2 = np.broadcast_to(np.asarray(lam2, dtype=float), (len(edges),))
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        l1 = np.concatenate([lam1, lam1])
        l2 = np.concatenate([lam2, lam2])
        order = np.lexsort((dst, src))
        indptr = np.searchsorted(src[order], np.arange(n_vertices + 1))
        return cls(indptr, dst[order], l1[order], l2[order])

    def of(self, v):
        s, e = self.indptr[v], self.indptr[v + 1]
        return self.nbr[s:e], self.lam1[s:e], self.lam2[s:e]


def conditional_logdensity(n: float, s: float, nbr_values, lam1, lam2):
    """Full conditional of one vertex's log-odds, as ``h(b) -> (log p, d/db log p)``.

    ``log p(b) = s log w + (n - s) log(1 - w) - sum_w [lam1 |b - b_w| + lam2/2 (b - b_w)^2]``
    with ``w = sigmoid(b)``; its second derivative is at most
    ``-n w (1 - w) - sum lam2``.

    Raises
    ------
    ValueError
        When the vertex has no data and no penalty (improper conditional).
    """
    vals = [float(v) for v in nbr_values]
    l1 = [float(v) for v in lam1]
    l2 = [float(v) for v in lam2]
    if n <= 0 and not any(l1) and not any(l2):
        raise ValueError("improper conditional: no data and no penalty at this vertex")
    n, s = float(n), float(s)
    terms = list(zip(vals, l1, l2))

    def h(b):
        val = 0.0
        der = 0.0
        if n > 0:
            val = s * _log_sigmoid(b) + (n - s) * _log_sigmoid(-b)
            der = s - n * _sigmoid(b)
        for bw, a1, a2 in terms:
            d = b - bw
            val -= a1 * abs(d) + 0.5 * a2 * d * d
            der -= a1 * (1.0 if d > 0 else -1.0 if d < 0 else 0.0) + a2 * d
        return val, der

    return h


def _init_bounds(n, s, nbr_values, current, delta):
    pts = [current, *nbr_values]
    if 0 < s < n:
        pts.append(math.log(s / (n - s)))
    return min(pts) - delta, max(pts) + delta


@dataclass
class ChainResult:
    samples: np.ndarray
    seed: object
    iterations: int
    burn_in: int
    thin: int

    def summary(self, probs=(0.05, 0.95)) -> np.ndarray:
        """Rows ``(post_mean, q_lo, q_hi)`` per vertex."""
        q = np.quantile(self.samples, probs, axis=0)
        return np.column_stack([self.samples.mean(axis=0), q[0], q[1]])


def _sweep(vertices, beta, attempts, successes, nb: Neighborhood, rng, delta):
    for v in vertices:
        idx, l1, l2 = nb.of(v)
        nv = beta[idx]
        h = conditional_logdensity(attempts[v], successes[v], nv, l1, l2)
        lo, hi = _init_bounds(attempts[v], successes[v], nv, beta[v], delta)
        try:
            beta[v] = ARS(h, lo, hi).sample(rng)
        except ARSError:
            try:
                beta[v] = ARS(h, lo - 10 * delta, hi + 10 * delta).sample(rng)
            except ARSError as err:
                raise ARSError(f"ARS failed at vertex {v}: {err}") from err


def run_chain(
    attempts,
    successes,
    graph,
    penalties: PenaltyConfig | None,
    map_init,
    iters: int = 5000,
    burn_in: int = 4000,
    seed=0,
    thin: int = 1,
    perturbation: float = INIT_PERTURBATION,
    mode: str = "sweep",
    workers: int = 2,
) -> ChainResult:
    """Gibbs sampler over all vertices, started from the MAP field.

    ``graph`` is a :class:`SpatioTemporalGraph` (neighbour weights taken
    from ``penalties``) or a prebuilt :class:`Neighborhood`.

    ``mode="sweep"`` updates vertices in index order (reproducible).
    ``mode="async"`` splits vertices into ``workers`` contiguous blocks
    updated concurrently against a shared field, so neighbours across
    block boundaries may be read stale; results then depend on thread
    scheduling.
    """
    if burn_in >= iters:
        raise ValueError("burn_in must be smaller than iters")
    if isinstance(graph, Neighborhood):
        neighborhood = graph
    else:
        neighborhood = Neighborhood.from_graph(graph, penalties)
    attempts = np.asarray(attempts, dtype=float)
    successes = np.asarray(successes, dtype=float)
    beta = np.array(map_init.beta if isinstance(map_init, SplitField) else map_init, dtype=float)
    V = beta.size
    kept = []
    if mode == "sweep":
        rngs = [np.random.default_rng(seed)]
        blocks = [range(V)]
    elif mode == "async":
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(workers)]
        blocks = [range(b[0], b[-1] + 1) for b in np.array_split(np.arange(V), workers) if len(b)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pool = ThreadPoolExecutor(len(blocks)) if mode == "async" else None
    try:
        for it in range(iters):
            if pool is None:
                _sweep(blocks[0], beta, attempts, successes, neighborhood, rngs[0], perturbation)
            else:
                futs = [
                    pool.submit(_sweep, blk, beta, attempts, successes, neighborhood, r, perturbation)
                    for blk, r in zip(blocks, rngs)
                ]
                for f in futs:
                    f.result()
            if it >= burn_in and (it - burn_in) % thin == 0:
                kept.append(beta.copy())
    finally:
        if pool is not None:
            pool.shutdown()
    return ChainResult(np.array(kept).reshape(-1, V), seed, iters, burn_in, thin)


def write_samples(result: ChainResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("iter,vertex,beta\n")
        for i, row in enumerate(result.samples):
            it = result.burn_in + i * result.thin
            fh.writelines(f"{it},{v},{b!r}\n" for v, b in enumerate(row.tolist()))


def write_summary(result: ChainResult, path) -> None:
    summ = result.summary()
    with open(path, "w") as fh:
        fh.write("vertex,post_mean,q05,q95\n")
        fh.writelines(f"{v},{m!r},{a!r},{b!r}\n" for v, (m, a, b) in enumerate(summ.tolist()))


def density_bands(tree, samples_per_split, query, level=0.9):
    """Per-vertex credible band of a density query across retained draws.

    ``samples_per_split`` has shape ``(n_splits, n_draws, n_vertices)``;
    ``query(model)`` maps a :class:`~gfen.tree.DensityModel` to per-vertex values.
    """
    from .tree import DensityModel

    arr = np.asarray(samples_per_split)
    vals = np.array([query(DensityModel(tree, arr[:, d, :])) for d in range(arr.shape[1])])
    a = (1.0 - level) / 2
    return np.quantile(vals, [a, 0.5, 1.0 - a], axis=0)
