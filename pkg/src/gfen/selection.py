"""Node-wise cross-validation and Gaussian-process search over penalty hyperparameters."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_expit

from .admm import AdmmOptions, PenaltyConfig, TrailLayout, fit_map, NodeLoss
from .tree import SplitCounts

logger = logging.getLogger(__name__)

SEARCH_BOX = (-2.0, 7.0)
KERNEL_BANDWIDTH = 0.15
KERNEL_NOISE = 0.1
POOL_SIZE = 512
ALL_DIMS = (True, True, True, True)
GFL_DIMS = (True, False, True, False)
GMRF_DIMS = (False, True, False, True)


def assign_folds(n_vertices: int, k: int, seed) -> np.ndarray:
    """Uniformly random vertex folds labelled ``0..k-1`` with sizes differing by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n_vertices:
        raise ValueError(f"k={k} exceeds the number of vertices {n_vertices}")
    perm = np.random.default_rng(seed).permutation(n_vertices)
    folds = np.empty(n_vertices, dtype=np.int64)
    folds[perm] = np.arange(n_vertices) % k
    return folds


def binomial_loglik(attempts, successes, beta) -> np.ndarray:
    """Per-vertex ``s log(omega) + (n - s) log(1 - omega)`` (no binomial coefficient)."""
    return successes * log_expit(beta) + (attempts - successes) * log_expit(-beta)


@dataclass
class CvResult:
    penalties: PenaltyConfig | list
    loss: float
    fold_losses: np.ndarray
    fold_points: np.ndarray
    converged: bool = True
    empty_folds: list = field(default_factory=list)


def cv_loss(
    counts: SplitCounts,
    trails,
    penalties,
    folds: np.ndarray,
    splits=None,
    options: AdmmOptions | None = None,
    threads: int = 1,
) -> CvResult:
    """Held-out negative log-likelihood per data point, holding out whole vertices.

    For each fold the held-out vertices become missing data, every split in
    ``splits`` (default: all) is refitted, and the held-out split counts are
    scored under the fitted splitting probabilities.  Summed over splits this
    is ``-sum_i log P(leaf(y_i))``.  The result is the total divided by the
    number of held-out points, i.e. the point-weighted average of the
    per-fold losses.  ``penalties`` is one config or a per-split mapping.
    """
    layout = trails if isinstance(trails, TrailLayout) else TrailLayout(trails, counts.n_vertices)
    ks = list(range(counts.n_splits)) if splits is None else list(splits)
    k_folds = int(folds.max()) + 1
    root_points = counts.leaf_counts.sum(axis=1)

    def job(args):
        j, k = args
        test = folds == j
        pen = penalties[k] if isinstance(penalties, (list, tuple, dict)) else penalties
        train = NodeLoss.binomial(counts.attempts[k] * ~test, counts.successes[k] * ~test)
        fit = fit_map(train, layout, pen, options)
        ll = binomial_loglik(counts.attempts[k][test], counts.successes[k][test], fit.beta[test])
        return j, -float(ll.sum()), fit.converged

    jobs = [(j, k) for j in range(k_folds) for k in ks]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(a) for a in jobs]

    nll = np.zeros(k_folds)
    converged = True
    for j, val, ok in results:  # fixed reduction order
        nll[j] += val
        converged &= ok
    points = np.array([root_points[folds == j].sum() for j in range(k_folds)], dtype=float)
    empty = [j for j in range(k_folds) if points[j] == 0]
    if empty:
        logger.info("folds with no held-out data: %s", empty)
    total = points.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        per_fold = np.where(points > 0, nll / points, np.nan)
    loss = float(nll.sum() / total) if total > 0 else float("nan")
    return CvResult(penalties, loss, per_fold, points, converged, empty)


# ----------------------------------------------------------------------------
# Bayesian optimisation


def rbf_kernel(A, B, bandwidth: float = KERNEL_BANDWIDTH) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    return np.exp(-bandwidth * d2)


def gp_posterior(X, y, Xs, bandwidth=KERNEL_BANDWIDTH, noise=KERNEL_NOISE, full_cov=False):
    """Zero-mean GP posterior at ``Xs`` given observations ``y`` at ``X``.

    Returns the mean and either the marginal variances or the full covariance.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    K = rbf_kernel(X, X, bandwidth) + noise**2 * np.eye(len(X))
    jitter = 1e-8
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(X)))
            break
        except np.linalg.LinAlgError:
            jitter *= 10
    Ks = rbf_kernel(Xs, X, bandwidth)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    mean = Ks @ alpha
    W = np.linalg.solve(L, Ks.T)
    if full_cov:
        return mean, rbf_kernel(Xs, Xs, bandwidth) - W.T @ W
    return mean, np.maximum(1.0 - (W**2).sum(0), 0.0)


@dataclass
class BayesOptState:
    """Evaluated points in log10-lambda space over the active dimensions."""

    active: tuple = ALL_DIMS
    box: tuple = SEARCH_BOX
    bandwidth: float = KERNEL_BANDWIDTH
    noise: float = KERNEL_NOISE
    X: list = field(default_factory=list)
    y: list = field(default_factory=list)
    generation: int = 0

    @property
    def dim(self) -> int:
        return int(sum(self.active))

    def add(self, log_lambda, loss: float) -> None:
        self.X.append(np.asarray(log_lambda, dtype=float))
        self.y.append(float(loss))

    def to_penalties(self, log_lambda) -> PenaltyConfig:
        full = np.zeros(4)
        full[np.array(self.active)] = 10.0 ** np.asarray(log_lambda, dtype=float)
        return PenaltyConfig.from_array(full)

    def standardized(self):
        y = np.asarray(self.y, dtype=float)
        sd = y.std()
        return (y - y.mean()) / (sd if sd > 0 else 1.0)

    def posterior(self, Xs, full_cov=False):
        return gp_posterior(np.array(self.X), self.standardized(), Xs, self.bandwidth, self.noise, full_cov)


def propose_candidates(
    state: BayesOptState,
    n_candidates: int,
    rng,
    pool_size: int = POOL_SIZE,
    local_scale: float = 0.5,
    n_elite: int = 8,
) -> np.ndarray:
    """Next batch of log10-lambda points (rows) inside the search box.

    Before any evaluation the batch is uniform.  Afterwards the candidate
    pool is half uniform over the box and half Gaussian perturbations
    (``local_scale``) of the ``n_elite`` best evaluated points, clipped to
    the box.  Each candidate is the pool point minimising an independent
    joint draw from the GP posterior over the pool (without repeats).
    """
    lo, hi = state.box
    if not state.X:
        return rng.uniform(lo, hi, size=(n_candidates, state.dim))
    n_local = pool_size // 2
    X = np.array(state.X)
    elite = np.argsort(state.y, kind="stable")[:n_elite]
    local = X[rng.choice(elite, n_local)] + rng.normal(scale=local_scale, size=(n_local, state.dim))
    pool = np.vstack([rng.uniform(lo, hi, size=(pool_size - n_local, state.dim)), np.clip(local, lo, hi)])
    mean, cov = state.posterior(pool, full_cov=True)
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    root = np.sqrt(np.clip(w, 0.0, None))
    chosen: list[int] = []
    for _ in range(n_candidates):
        draw = mean + U @ (root * rng.standard_normal(len(w)))
        draw[chosen] = np.inf
        chosen.append(int(np.argmin(draw)))
    return pool[chosen]


def select_best(state: BayesOptState) -> int:
    """Index of the evaluated point with the lowest posterior mean (first on ties)."""
    if not state.X:
        raise ValueError("no evaluations")
    mean, _ = state.posterior(np.array(state.X))
    return int(np.argmin(mean))


@dataclass
class TuningResult:
    best: dict
    log: list


def tune(
    counts: SplitCounts,
    trails,
    folds: np.ndarray,
    generations: int = 48,
    n_candidates: int = 6,
    seed=0,
    per_split: bool = True,
    active=ALL_DIMS,
    options: AdmmOptions | None = None,
    threads: int = 1,
) -> TuningResult:
    """Bayesian-optimisation search of the cross-validated loss.

    With ``per_split`` each split gets its own search; otherwise one shared
    configuration is searched against the loss summed over splits.
    ``best`` maps split index (or ``"shared"``) to a :class:`PenaltyConfig`;
    ``log`` rows are ``(split, generation, l_s1, l_s2, l_t1, l_t2, cv_nll)``.
    """
    layout = trails if isinstance(trails, TrailLayout) else TrailLayout(trails, counts.n_vertices)
    groups = [[k] for k in range(counts.n_splits)] if per_split else [list(range(counts.n_splits))]
    seeds = np.random.SeedSequence(seed).spawn(len(groups))
    best, log = {}, []
    for group, ss in zip(groups, seeds):
        rng = np.random.default_rng(ss)
        state = BayesOptState(active=tuple(active))
        label = group[0] if per_split else "shared"
        for gen in range(generations):
            for x in propose_candidates(state, n_candidates, rng):
                pen = state.to_penalties(x)
                res = cv_loss(counts, layout, pen, folds, splits=group, options=options, threads=threads)
                state.add(x, res.loss)
                log.append((label, gen, *pen.as_array().tolist(), res.loss))
            state.generation = gen + 1
            logger.info("split %s generation %d best so far %.5f", label, gen, min(state.y))
        best[label] = state.to_penalties(state.X[select_best(state)])
    return TuningResult(best, log)


def write_tuning_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "generation", *PenaltyConfig.names(), "cv_nll"])
        for row in rows:
            w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])


def write_best(best: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump({str(k): v.as_dict() for k, v in best.items()}, fh, indent=1)


def read_best(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    return {(int(k) if k.isdigit() else k): PenaltyConfig.from_dict(v) for k, v in data.items()}
