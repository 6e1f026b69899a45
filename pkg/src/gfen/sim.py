"""Simulated spatiotemporal density tasks and the GFL / GFEN / GMRF comparison."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.stats import norm

from .admm import GFL_RIDGE, AdmmOptions, PenaltyConfig, TrailLayout, fit_splits
from .graph import decompose_trails, grid_graph
from .selection import SEARCH_BOX, assign_folds, cv_loss
from .tree import DensityModel, bin_observations, build_quantile_tree

logger = logging.getLogger(__name__)

EFFECT_KINDS = ("pw_constant", "pw_linear", "mixed")
METHODS = ("gfl", "gfen", "gmrf")
# (spatial, temporal, outliers): the seven task rows
TASKS = (
    ("pw_constant", "pw_constant", False),
    ("pw_constant", "pw_linear", False),
    ("pw_constant", "mixed", False),
    ("pw_linear", "pw_linear", False),
    ("pw_linear", "mixed", False),
    ("mixed", "mixed", False),
    ("mixed", "mixed", True),
)
MISSING_REGIMES = (0.1, 0.8)
OUTLIER_SCALE = 10.0
N_EVAL = 100
BENCH_TOL = 1e-4


def segment_bounds(n: int) -> np.ndarray:
    """Start indices of the three segments plus ``n``; the remainder goes to the last segment."""
    step = n // 3
    return np.array([0, step, 2 * step, n])


def generate_effect(kind: str, n: int, rng=None, anchors=None, segment_types=None) -> np.ndarray:
    """Length-``n`` effect built from three constant or linear segments.

    Anchor values (default ``U[-1, 1]``) sit at the segment boundaries.  A
    constant segment repeats its left anchor; a linear one interpolates from
    its left anchor towards its right anchor.  ``mixed`` draws the segment
    types at random with at least one of each.

    >>> generate_effect("pw_linear", 9, anchors=[0, 1, 0, 1])
    array([0.        , 0.33333333, 0.66666667, 1.        , 0.66666667,
           0.33333333, 0.        , 0.33333333, 0.66666667])
    """
    if kind not in EFFECT_KINDS:
        raise ValueError(f"unknown effect kind {kind!r}")
    if n < 3:
        raise ValueError("n must be at least 3")
    rng = np.random.default_rng(rng)
    a = rng.uniform(-1.0, 1.0, 4) if anchors is None else np.asarray(anchors, dtype=float)
    if a.shape != (4,):
        raise ValueError("need four anchors")
    if segment_types is None:
        if kind == "pw_constant":
            segment_types = ("constant",) * 3
        elif kind == "pw_linear":
            segment_types = ("linear",) * 3
        else:
            lin = rng.integers(1, 3)  # one or two linear segments
            segment_types = tuple(rng.permutation(["linear"] * lin + ["constant"] * (3 - lin)))
    b = segment_bounds(n)
    out = np.empty(n)
    for j, typ in enumerate(segment_types):
        lo, hi = b[j], b[j + 1]
        if typ == "constant":
            out[lo:hi] = a[j]
        else:
            out[lo:hi] = a[j] + (a[j + 1] - a[j]) * np.arange(hi - lo) / (hi - lo)
    return out


@dataclass(frozen=True)
class SimTask:
    n: int = 30
    spatial_kind: str = "pw_constant"
    temporal_kind: str = "pw_constant"
    sigma: float = 0.2
    missing: float = 0.1
    samples: int = 10
    outliers: bool = False
    seed: int = 0

    @property
    def label(self) -> str:
        s = f"{self.spatial_kind}/{self.temporal_kind}"
        return s + "+outliers" if self.outliers else s


@dataclass
class SimData:
    """One simulated dataset on the ``n x n`` grid (vertex ``v = s * n + t``)."""

    task: SimTask
    means: np.ndarray  # (2, n_vertices) mixture component means
    missing: np.ndarray  # bool mask
    vertex: np.ndarray  # training observations
    values: np.ndarray
    eval_values: np.ndarray  # (n_vertices, N_EVAL)

    def true_logpdf(self, values) -> np.ndarray:
        """Log density of the ground truth, row ``v`` of ``values`` at vertex ``v``."""
        sd = self.task.sigma
        x = np.asarray(values, dtype=float)
        l0 = norm.logpdf(x, self.means[0][:, None], sd)
        l1 = norm.logpdf(x, self.means[1][:, None], sd)
        return np.logaddexp(l0, l1) - np.log(2.0)


def _mixture_draws(rng, means, size, sd):
    comp = rng.integers(0, 2, size=(means.shape[1], size))
    mu = np.where(comp == 0, means[0][:, None], means[1][:, None])
    return mu + sd * rng.standard_normal(mu.shape)


def sample_task(task: SimTask) -> SimData:
    """Ground truth, training observations and evaluation draws for ``task``.

    The missing vertices are an exact ``round(missing * V)`` subset.  In
    outlier mode half of the observed vertices (rounded down) receive one
    extra draw whose component is picked as usual but whose spread is
    ``10 * sigma``.
    """
    rng = np.random.default_rng(task.seed)
    n = task.n
    nu = [generate_effect(task.spatial_kind, n, rng) for _ in range(2)]
    mu = [generate_effect(task.temporal_kind, n, rng) for _ in range(2)]
    means = np.stack([np.outer(nu[i], mu[i]).ravel() for i in range(2)])
    V = n * n
    missing = np.zeros(V, dtype=bool)
    missing[rng.choice(V, size=int(round(task.missing * V)), replace=False)] = True
    observed = np.flatnonzero(~missing)
    draws = _mixture_draws(rng, means[:, observed], task.samples, task.sigma)
    vertex = np.repeat(observed, task.samples)
    values = draws.ravel()
    if task.outliers:
        hit = np.sort(rng.choice(observed, size=observed.size // 2, replace=False))
        extra = _mixture_draws(rng, means[:, hit], 1, OUTLIER_SCALE * task.sigma).ravel()
        vertex = np.concatenate([vertex, hit])
        values = np.concatenate([values, extra])
        order = np.argsort(vertex, kind="stable")
        vertex, values = vertex[order], values[order]
    eval_values = _mixture_draws(rng, means, N_EVAL, task.sigma)
    return SimData(task, means, missing, vertex, values, eval_values)


def draw_penalties(method: str, n: int, rng) -> list[PenaltyConfig]:
    """``n`` random configurations with ``log10(lambda) ~ U(SEARCH_BOX)`` on the method's norms."""
    lo, hi = SEARCH_BOX
    mask = {"gfl": [1, 0, 1, 0], "gfen": [1, 1, 1, 1], "gmrf": [0, 1, 0, 1]}[method]
    x = 10.0 ** rng.uniform(lo, hi, size=(n, 4))
    return [PenaltyConfig.from_array(row * mask) for row in x]


def method_options(method: str, options: AdmmOptions) -> AdmmOptions:
    return replace(options, ridge=GFL_RIDGE) if method == "gfl" else options


def eval_nll(model: DensityModel, data: SimData, vertices=None) -> float:
    """Mean negative log-likelihood of the evaluation draws under ``model``."""
    V = data.eval_values.shape[0]
    vs = np.arange(V) if vertices is None else np.flatnonzero(vertices) if np.asarray(vertices).dtype == bool else np.asarray(vertices)
    vals = data.eval_values[vs]
    rows = np.repeat(vs, vals.shape[1])
    return float(-model.log_density(rows, vals.ravel()).mean())


@dataclass
class MethodResult:
    method: str
    penalties: PenaltyConfig
    cv_loss: float
    eval_nll: float
    eval_nll_missing: float
    n_discarded: int


@dataclass
class BenchmarkResult:
    task: SimTask
    methods: dict
    baseline_nll: float
    baseline_nll_missing: float
    truth_nll: float


def run_benchmark(
    task: SimTask,
    methods=METHODS,
    n_lambda: int = 24,
    n_folds: int = 5,
    depth: int = 3,
    seed=0,
    options: AdmmOptions | None = None,
) -> BenchmarkResult:
    """Random-search CV selection and evaluation of each method on one dataset.

    Each method draws ``n_lambda`` configurations, shared across all splits,
    picks the lowest node-wise CV loss, refits on all training data and is
    scored on the evaluation draws.  Draws whose fits fail to converge are
    discarded.  The pooled-density baseline uses the same tree with every
    vertex set to the pooled empirical split frequencies.
    """
    opts = options or AdmmOptions(tol=BENCH_TOL)
    data = sample_task(task)
    V = task.n * task.n
    graph = grid_graph(task.n, task.n, cyclic=False)
    layout = TrailLayout(decompose_trails(graph), V)
    pad = 3.0 * task.sigma
    tree = build_quantile_tree(
        data.values, depth, n_left_tail=0, n_right_tail=0,
        support=(data.values.min() - pad, data.values.max() + pad),
    )
    counts = bin_observations(tree, V, data.vertex, data.values)
    folds = assign_folds(V, n_folds, np.random.SeedSequence([seed, 1]))
    seqs = np.random.SeedSequence([seed, 2]).spawn(len(methods))

    results = {}
    for method, ss in zip(methods, seqs):
        mopts = method_options(method, opts)
        best, best_loss, discarded = None, np.inf, 0
        for pen in draw_penalties(method, n_lambda, np.random.default_rng(ss)):
            try:
                cv = cv_loss(counts, layout, pen, folds, options=mopts)
            except FloatingPointError as err:
                logger.warning("%s %s: %s", method, pen, err)
                discarded += 1
                continue
            if not cv.converged:
                logger.info("%s: discarding non-converged draw %s", method, pen.as_dict())
                discarded += 1
                continue
            if cv.loss < best_loss:
                best, best_loss = pen, cv.loss
        if best is None:
            raise RuntimeError(f"{method}: every hyperparameter draw failed")
        fields = fit_splits(counts, layout, best, mopts)
        model = DensityModel(tree, np.array([f.beta for f in fields]))
        results[method] = MethodResult(
            method, best, best_loss, eval_nll(model, data),
            eval_nll(model, data, data.missing) if data.missing.any() else float("nan"),
            discarded,
        )

    pooled = counts.successes.sum(axis=1) / np.maximum(counts.attempts.sum(axis=1), 1)
    with np.errstate(divide="ignore"):
        pooled_beta = np.log(pooled) - np.log1p(-pooled)
    baseline = DensityModel(tree, np.repeat(pooled_beta[:, None], V, axis=1))
    truth = float(-data.true_logpdf(data.eval_values).mean())
    return BenchmarkResult(
        task, results, eval_nll(baseline, data),
        eval_nll(baseline, data, data.missing) if data.missing.any() else float("nan"),
        truth,
    )


def task_grid(n: int = 15, replicates: int = 8, seed: int = 0, sigma: float = 0.2, tasks=TASKS, regimes=MISSING_REGIMES):
    """All ``(task, replicate)`` pairs; replicate seeds derive from ``seed``."""
    out = []
    for ti, (sk, tk, outl) in enumerate(tasks):
        for mi, miss in enumerate(regimes):
            for r in range(replicates):
                s = int(np.random.SeedSequence([seed, ti, mi, r]).generate_state(1)[0])
                out.append((SimTask(n, sk, tk, sigma, miss, 10, outl, s), r))
    return out


REPLICATE_FIELDS = ["task", "missing", "replicate", "method", *PenaltyConfig.names(), "cv_nll", "eval_nll", "eval_nll_missing"]


def replicate_rows(result: BenchmarkResult, replicate: int) -> list[list]:
    t = result.task
    rows = []
    for m, r in result.methods.items():
        rows.append([t.label, t.missing, replicate, m, *r.penalties.as_array(), r.cv_loss, r.eval_nll, r.eval_nll_missing])
    rows.append([t.label, t.missing, replicate, "pooled", *[np.nan] * 4, np.nan, result.baseline_nll, result.baseline_nll_missing])
    rows.append([t.label, t.missing, replicate, "truth", *[np.nan] * 4, np.nan, result.truth_nll, np.nan])
    return rows


def write_replicates(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPLICATE_FIELDS)
        for row in rows:
            w.writerow([v if isinstance(v, str) else repr(float(v)) if isinstance(v, float) else v for v in row])


def summarize(rows, methods=METHODS) -> list[dict]:
    """Table-1 layout: one row per task label with mean and standard error per (regime, method).

    ``gfen_ok`` flags whether GFEN is lowest or within two standard errors of
    the paired GFEN-minus-best difference.
    """
    rows = [dict(zip(REPLICATE_FIELDS, r)) for r in rows]
    labels = list(dict.fromkeys(r["task"] for r in rows))
    regimes = sorted({r["missing"] for r in rows})
    out = []
    for lab in labels:
        for miss in regimes:
            sel = [r for r in rows if r["task"] == lab and r["missing"] == miss]
            if not sel:
                continue
            entry = {"task": lab, "missing": miss}
            per = {}
            for m in methods:
                vals = np.array([r["eval_nll"] for r in sorted(sel, key=lambda r: r["replicate"]) if r["method"] == m])
                per[m] = vals
                entry[f"{m}_mean"] = float(vals.mean())
                entry[f"{m}_se"] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else float("nan")
            if "gfen" in per:
                means = {m: v.mean() for m, v in per.items()}
                best = min(means, key=means.get)
                diff = per["gfen"] - per[best]
                se = diff.std(ddof=1) / np.sqrt(len(diff)) if len(diff) > 1 else 0.0
                entry["best"] = best
                entry["gfen_ok"] = bool(best == "gfen" or diff.mean() <= 2 * se)
            out.append(entry)
    return out


def write_summary(summary: list[dict], path) -> None:
    if not summary:
        raise ValueError("empty summary")
    keys = list(summary[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys)
        w.writeheader()
        w.writerows(summary)


def run_suite(n=15, replicates=8, n_lambda=12, seed=0, options=None, tasks=TASKS, regimes=MISSING_REGIMES, threads=1):
    """Run every ``(task, regime, replicate)``; returns replicate rows in a fixed order."""
    jobs = task_grid(n, replicates, seed, tasks=tasks, regimes=regimes)

    def one(job):
        task, r = job
        return replicate_rows(run_benchmark(task, n_lambda=n_lambda, seed=task.seed, options=options), r)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(j) for j in jobs]
    return [row for part in parts for row in part]


def task_dict(task: SimTask) -> dict:
    return asdict(task)
