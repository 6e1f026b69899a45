"""MAP estimation of a split field under the graph-fused elastic net.

The objective minimised for one tree split is::

    sum_v loss_v(beta_v)
      + sum_{d in (S, T)} [ lam_{d,1} sum_{vw in E_d} |beta_v - beta_w|
                          + lam_{d,2} / 2 sum_{vw in E_d} (beta_v - beta_w)^2 ]
      + ridge * ||beta||^2

with ``loss_v`` the binomial negative log-likelihood of the split counts
(or ``1/2 sum_i (y_i - beta_v)^2`` for the Gaussian variant).  ADMM keeps
one slack copy of ``beta`` per trail and per active norm; the ``beta`` step
is one guarded Newton iteration, the slack steps are the exact chain
proxes in :mod:`gfen.tv`.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .graph import SPATIAL, TEMPORAL, TrailDecomposition
from .tv import tv1_trails, tv2_trails

logger = logging.getLogger(__name__)

BINOMIAL = 0
GAUSSIAN = 1

GFL_RIDGE = 1e-8

# status codes returned by the compiled loop
_CONVERGED, _MAX_ITER, _NAN = 0, 1, 2


@dataclass(frozen=True)
class PenaltyConfig:
    """Edge penalties ``lam_{d,p}`` for spatial/temporal edges and l1/l2 norms."""

    spatial_l1: float = 0.0
    spatial_l2: float = 0.0
    temporal_l1: float = 0.0
    temporal_l2: float = 0.0

    def __post_init__(self):
        for name, val in zip(self.names(), self.as_array()):
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {val}")

    @staticmethod
    def names():
        return ("lambda_s1", "lambda_s2", "lambda_t1", "lambda_t2")

    def as_array(self) -> np.ndarray:
        return np.array([self.spatial_l1, self.spatial_l2, self.temporal_l1, self.temporal_l2], dtype=float)

    @classmethod
    def from_array(cls, values) -> "PenaltyConfig":
        return cls(*(float(v) for v in values))

    def as_dict(self) -> dict:
        return dict(zip(self.names(), self.as_array().tolist()))

    @classmethod
    def from_dict(cls, d) -> "PenaltyConfig":
        return cls(*(float(d.get(k, 0.0)) for k in cls.names()))

    def lam(self, kind: str, p: int) -> float:
        if kind == SPATIAL:
            return self.spatial_l1 if p == 1 else self.spatial_l2
        return self.temporal_l1 if p == 1 else self.temporal_l2

    @property
    def has_l2(self) -> bool:
        return self.spatial_l2 > 0 or self.temporal_l2 > 0


@dataclass
class AdmmOptions:
    tol: float = 1e-6
    max_iter: int = 5000
    alpha: float = 1.0
    max_step: float = 4.0
    adapt: bool = True
    adapt_ratio: float = 10.0
    adapt_factor: float = 2.0
    alpha_min: float = 1e-4
    alpha_max: float = 1e4
    ridge: float = 0.0
    trace: bool = False


@dataclass
class NodeLoss:
    """Per-vertex node loss.

    Binomial: ``n`` attempts and ``s`` successes.  Gaussian: ``n`` sample
    counts and ``s`` sample sums, i.e. ``1/2 sum_i (y_i - beta)^2`` up to a
    constant.
    """

    kind: int
    n: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.n = np.ascontiguousarray(self.n, dtype=np.float64)
        self.s = np.ascontiguousarray(self.s, dtype=np.float64)
        if self.n.shape != self.s.shape or self.n.ndim != 1:
            raise ValueError("n and s must be vectors of equal length")
        if np.any(self.n < 0):
            raise ValueError("counts must be non-negative")
        if self.kind == BINOMIAL and np.any((self.s < 0) | (self.s > self.n)):
            raise ValueError("binomial successes must lie in [0, attempts]")

    @classmethod
    def binomial(cls, attempts, successes) -> "NodeLoss":
        return cls(BINOMIAL, attempts, successes)

    @classmethod
    def gaussian(cls, observations) -> "NodeLoss":
        """``observations[v]`` is a sequence of values (possibly empty) at vertex ``v``."""
        n = np.array([len(o) for o in observations], dtype=float)
        s = np.array([float(np.sum(o)) if len(o) else 0.0 for o in observations])
        return cls(GAUSSIAN, n, s)

    @property
    def n_vertices(self) -> int:
        return self.n.size

    def value(self, beta) -> float:
        beta = np.asarray(beta, dtype=float)
        if self.kind == BINOMIAL:
            return float(np.sum(self.n * np.logaddexp(0.0, beta) - self.s * beta))
        return float(np.sum(0.5 * self.n * beta**2 - self.s * beta))

    def initial(self) -> np.ndarray:
        """Empirical start: smoothed logit (or sample mean) where data exist, 0 elsewhere."""
        has = self.n > 0
        out = np.zeros_like(self.n)
        if self.kind == BINOMIAL:
            p = (self.s[has] + 0.5) / (self.n[has] + 1.0)
            out[has] = np.log(p) - np.log1p(-p)
        else:
            out[has] = self.s[has] / self.n[has]
        return out


@dataclass
class SplitField:
    """Fitted log-odds ``beta`` of one split plus solver diagnostics."""

    beta: np.ndarray
    converged: bool = True
    iterations: int = 0
    primal_residual: float = 0.0
    dual_residual: float = 0.0
    alpha: float = 1.0
    objective: float = float("nan")
    trace: np.ndarray | None = field(default=None, repr=False)

    @property
    def omega(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.beta))

    def write_trace(self, path) -> None:
        if self.trace is None:
            raise ValueError("fit was run without trace=True")
        with open(path, "w") as fh:
            fh.write("iter,alpha,primal_res,dual_res,objective\n")
            for i, row in enumerate(self.trace.tolist()):
                fh.write(f"{i + 1},{row[0]!r},{row[1]!r},{row[2]!r},{row[3]!r}\n")


class TrailLayout:
    """Flattened trail positions per norm, reusable across fits on one graph."""

    def __init__(self, trails: TrailDecomposition, n_vertices: int | None = None):
        self.trails = trails
        nonempty = [(t, k) for t, k in zip(trails.trails, trails.kinds) if len(t) > 1]
        self._idx = np.concatenate([t for t, _ in nonempty]) if nonempty else np.zeros(0, np.int64)
        self._off = np.concatenate([[0], np.cumsum([len(t) for t, _ in nonempty])]).astype(np.int64)
        self._kinds = np.array([k for _, k in nonempty])
        top = int(self._idx.max()) + 1 if self._idx.size else 0
        self.n_vertices = top if n_vertices is None else int(n_vertices)
        if top > self.n_vertices:
            raise ValueError("trail references a vertex beyond n_vertices")

    def arrays(self, penalties: PenaltyConfig, p: int):
        """``(idx, offsets, lam)`` restricted to trails whose penalty for norm ``p`` is positive."""
        lam = np.array([penalties.lam(k, p) for k in self._kinds], dtype=float)
        keep = lam > 0
        if not keep.any():
            return np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros(0)
        lens = np.diff(self._off)[keep]
        idx = np.concatenate([self._idx[s:e] for s, e in zip(self._off[:-1][keep], self._off[1:][keep])])
        off = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        return idx, off, lam[keep]

    def penalty_value(self, beta, penalties: PenaltyConfig) -> float:
        total = 0.0
        for (s, e), k in zip(zip(self._off[:-1], self._off[1:]), self._kinds):
            d = np.diff(beta[self._idx[s:e]])
            total += penalties.lam(k, 1) * np.abs(d).sum() + 0.5 * penalties.lam(k, 2) * (d**2).sum()
        return float(total)


@njit(cache=True, nogil=True)
def _admm_loop(
    kind, n, s, ridge, beta,
    idx1, off1, lam1, idx2, off2, lam2,
    alpha, tol, max_iter, max_step,
    adapt, ratio, factor, amin, amax,
    trace,
):
    V = beta.shape[0]
    m1 = idx1.shape[0]
    m2 = idx2.shape[0]
    n1 = off1.shape[0] - 1
    n2 = off2.shape[0] - 1
    cnt = np.zeros(V)
    for j in range(m1):
        cnt[idx1[j]] += 1.0
    for j in range(m2):
        cnt[idx2[j]] += 1.0
    z1 = np.empty(m1)
    z2 = np.empty(m2)
    for j in range(m1):
        z1[j] = beta[idx1[j]]
    for j in range(m2):
        z2[j] = beta[idx2[j]]
    u1 = np.zeros(m1)
    u2 = np.zeros(m2)
    v1 = np.empty(m1)
    v2 = np.empty(m2)
    zn1 = np.empty(m1)
    zn2 = np.empty(m2)
    acc = np.empty(V)
    dz = np.empty(V)
    au = np.empty(V)
    lam1s = np.empty(n1)
    lam2s = np.empty(n2)

    best = beta.copy()
    best_score = np.inf
    status = 1
    it = 0
    r_rel = np.inf
    s_rel = np.inf
    has_trace = trace.shape[0] > 0
    for it in range(1, max_iter + 1):
        # beta: one guarded Newton step on loss + (alpha/2) sum (beta - z + u)^2
        acc[:] = 0.0
        for j in range(m1):
            acc[idx1[j]] += z1[j] - u1[j]
        for j in range(m2):
            acc[idx2[j]] += z2[j] - u2[j]
        max_move = 0.0
        for v in range(V):
            b = beta[v]
            g = 2.0 * ridge * b + alpha * (cnt[v] * b - acc[v])
            h = 2.0 * ridge + alpha * cnt[v]
            if n[v] > 0.0:
                if kind == 0:
                    w = 1.0 / (1.0 + np.exp(-b))
                    g += n[v] * w - s[v]
                    h += n[v] * w * (1.0 - w)
                else:
                    g += n[v] * b - s[v]
                    h += n[v]
            if h > 0.0:
                step = g / h
                if step > max_step:
                    step = max_step
                elif step < -max_step:
                    step = -max_step
                beta[v] = b - step
                if abs(step) > max_move:
                    max_move = abs(step)
        if not np.isfinite(max_move):
            status = 2
            break

        # slack copies: exact chain proxes
        for j in range(m1):
            v1[j] = beta[idx1[j]] + u1[j]
        for j in range(m2):
            v2[j] = beta[idx2[j]] + u2[j]
        for j in range(n1):
            lam1s[j] = lam1[j] / alpha
        for j in range(n2):
            lam2s[j] = lam2[j] / alpha
        tv1_trails(v1, off1, lam1s, zn1)
        tv2_trails(v2, off2, lam2s, zn2)

        # residuals and scaled dual update
        r2 = 0.0
        nb2 = 0.0
        nz2 = 0.0
        dz[:] = 0.0
        au[:] = 0.0
        for j in range(m1):
            bj = beta[idx1[j]]
            d = bj - zn1[j]
            r2 += d * d
            nb2 += bj * bj
            nz2 += zn1[j] * zn1[j]
            dz[idx1[j]] += zn1[j] - z1[j]
            u1[j] += d
            au[idx1[j]] += u1[j]
            z1[j] = zn1[j]
        for j in range(m2):
            bj = beta[idx2[j]]
            d = bj - zn2[j]
            r2 += d * d
            nb2 += bj * bj
            nz2 += zn2[j] * zn2[j]
            dz[idx2[j]] += zn2[j] - z2[j]
            u2[j] += d
            au[idx2[j]] += u2[j]
            z2[j] = zn2[j]
        s2 = 0.0
        u2n = 0.0
        for v in range(V):
            s2 += dz[v] * dz[v]
            u2n += au[v] * au[v]
        r = np.sqrt(r2)
        sres = alpha * np.sqrt(s2)
        r_rel = r / max(np.sqrt(max(nb2, nz2)), 1.0)
        s_rel = sres / max(alpha * np.sqrt(u2n), 1.0)
        if not (np.isfinite(r_rel) and np.isfinite(s_rel)):
            status = 2
            break

        if has_trace:
            trace[it - 1, 0] = alpha
            trace[it - 1, 1] = r_rel
            trace[it - 1, 2] = s_rel
            obj = ridge * np.sum(beta * beta)
            for v in range(V):
                if n[v] > 0.0:
                    if kind == 0:
                        b = beta[v]
                        sp = b + np.log1p(np.exp(-b)) if b > 0 else np.log1p(np.exp(b))
                        obj += n[v] * sp - s[v] * b
                    else:
                        obj += 0.5 * n[v] * beta[v] * beta[v] - s[v] * beta[v]
            for t in range(n1):
                for j in range(off1[t], off1[t + 1] - 1):
                    obj += lam1[t] * abs(beta[idx1[j + 1]] - beta[idx1[j]])
            for t in range(n2):
                for j in range(off2[t], off2[t + 1] - 1):
                    dd = beta[idx2[j + 1]] - beta[idx2[j]]
                    obj += 0.5 * lam2[t] * dd * dd
            trace[it - 1, 3] = obj

        score = max(r_rel, s_rel, max_move)
        if score < best_score:
            best_score = score
            best[:] = beta
        if r_rel < tol and s_rel < tol and max_move < tol:
            status = 0
            break

        # residual balancing of the step size; scaled duals move inversely
        if adapt:
            scale = 1.0
            if r_rel > ratio * s_rel and alpha * factor <= amax:
                scale = factor
            elif s_rel > ratio * r_rel and alpha / factor >= amin:
                scale = 1.0 / factor
            if scale != 1.0:
                alpha *= scale
                for j in range(m1):
                    u1[j] /= scale
                for j in range(m2):
                    u2[j] /= scale

    if status != 0:
        if status == 1:
            beta[:] = best
    return status, it, r_rel, s_rel, alpha


def step_size_adapt(alpha, primal, dual, ratio=10.0, factor=2.0, alpha_min=1e-4, alpha_max=1e4):
    """Residual-balancing update of the ADMM step size.

    Returns ``(new_alpha, scale)``; scaled duals must be divided by ``scale``.
    """
    if primal > ratio * dual and alpha * factor <= alpha_max:
        return alpha * factor, factor
    if dual > ratio * primal and alpha / factor >= alpha_min:
        return alpha / factor, 1.0 / factor
    return alpha, 1.0


def fit_map(
    loss: NodeLoss,
    trails: TrailDecomposition | TrailLayout,
    penalties: PenaltyConfig,
    options: AdmmOptions | None = None,
    init=None,
) -> SplitField:
    """Minimise the elastic-net graph objective for one split.

    Non-convergence within ``max_iter`` returns the best iterate with
    ``converged=False``; a non-finite iterate raises ``FloatingPointError``.
    """
    opts = options or AdmmOptions()
    layout = trails if isinstance(trails, TrailLayout) else TrailLayout(trails, loss.n_vertices)
    if layout.n_vertices != loss.n_vertices:
        raise ValueError(f"loss has {loss.n_vertices} vertices, trails cover {layout.n_vertices}")
    missing = loss.n == 0
    if missing.any() and not penalties.has_l2 and opts.ridge <= 0:
        warnings.warn(
            "no l2 penalty or ridge with missing-data vertices: the solution is not unique",
            stacklevel=2,
        )
    beta = loss.initial() if init is None else np.array(init, dtype=np.float64)
    idx1, off1, lam1 = layout.arrays(penalties, 1)
    idx2, off2, lam2 = layout.arrays(penalties, 2)
    trace = np.zeros((opts.max_iter if opts.trace else 0, 4))
    status, it, r, s, alpha = _admm_loop(
        loss.kind, loss.n, loss.s, float(opts.ridge), beta,
        idx1, off1, lam1, idx2, off2, lam2,
        float(opts.alpha), float(opts.tol), int(opts.max_iter), float(opts.max_step),
        bool(opts.adapt), float(opts.adapt_ratio), float(opts.adapt_factor),
        float(opts.alpha_min), float(opts.alpha_max),
        trace,
    )
    if status == _NAN:
        raise FloatingPointError(f"ADMM produced a non-finite iterate at iteration {it} (alpha={alpha:g})")
    if status == _MAX_ITER:
        logger.warning("ADMM did not converge in %d iterations (primal %.2e, dual %.2e)", it, r, s)
    objective = loss.value(beta) + layout.penalty_value(beta, penalties) + opts.ridge * float(beta @ beta)
    return SplitField(
        beta=beta,
        converged=status == _CONVERGED,
        iterations=int(it),
        primal_residual=float(r),
        dual_residual=float(s),
        alpha=float(alpha),
        objective=objective,
        trace=trace[:it] if opts.trace else None,
    )


def _pair(lam):
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (2,))
    return float(lam[0]), float(lam[1])


def gfl_mode(loss, trails, lam, options: AdmmOptions | None = None, **kw) -> SplitField:
    """Pure l1 fit; ``lam`` is a scalar or a (spatial, temporal) pair.  Adds the tiny identifiability ridge."""
    ls, lt = _pair(lam)
    opts = replace(options or AdmmOptions(), ridge=GFL_RIDGE)
    return fit_map(loss, trails, PenaltyConfig(ls, 0.0, lt, 0.0), opts, **kw)


def gmrf_mode(loss, trails, lam, options: AdmmOptions | None = None, **kw) -> SplitField:
    """Pure l2 fit; ``lam`` is a scalar or a (spatial, temporal) pair."""
    ls, lt = _pair(lam)
    return fit_map(loss, trails, PenaltyConfig(0.0, ls, 0.0, lt), options, **kw)


def fit_splits(counts, trails, penalties, options: AdmmOptions | None = None, splits=None, keep=None):
    """Fit every split (or ``splits``) of ``counts``; ``penalties`` may be one config or one per split.

    ``keep`` masks vertices whose data are used (others become missing).
    Returns a list of :class:`SplitField`.
    """
    layout = trails if isinstance(trails, TrailLayout) else TrailLayout(trails, counts.n_vertices)
    ks = range(counts.n_splits) if splits is None else splits
    out = []
    for k in ks:
        pen = penalties[k] if isinstance(penalties, (list, tuple, dict)) else penalties
        n, s = counts.attempts[k], counts.successes[k]
        if keep is not None:
            n, s = n * keep, s * keep
        out.append(fit_map(NodeLoss.binomial(n, s), layout, pen, options))
    return out
