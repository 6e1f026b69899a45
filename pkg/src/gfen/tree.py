"""Dyadic partition trees over a scalar support and the densities they induce."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Split:
    """Node ``address`` covering ``[lo, hi)``; left child ``[lo, cut)``, right ``[cut, hi)``."""

    address: str
    lo: float
    hi: float
    cut: float

    @property
    def level(self) -> int:
        return len(self.address) + 1


class DyadicTree:
    """Recursive binary partition of ``[root.lo, root.hi)``.

    ``splits`` are stored in creation order (breadth-first for the balanced
    part, then tail splits); that order is the split index used everywhere
    else.  Leaves are the child intervals that are not split further, kept
    sorted left to right.
    """

    def __init__(self, splits):
        self.splits = list(splits)
        if not self.splits:
            raise ValueError("a tree needs at least one split")
        by_addr = {s.address: s for s in self.splits}
        if len(by_addr) != len(self.splits):
            raise ValueError("duplicate split addresses")
        if "" not in by_addr:
            raise ValueError("missing root split (address '')")
        for s in self.splits:
            if not s.lo < s.cut < s.hi:
                raise ValueError(f"split {s.address!r}: need lo < cut < hi, got {s}")
            if s.address:
                parent = by_addr.get(s.address[:-1])
                if parent is None:
                    raise ValueError(f"split {s.address!r} has no parent")
                want = (parent.lo, parent.cut) if s.address[-1] == "0" else (parent.cut, parent.hi)
                if (s.lo, s.hi) != want:
                    raise ValueError(f"split {s.address!r} does not match its parent's child interval")
        self._by_addr = by_addr

        leaves = []
        for s in self.splits:
            for bit, (lo, hi) in (("0", (s.lo, s.cut)), ("1", (s.cut, s.hi))):
                if s.address + bit not in by_addr:
                    leaves.append((lo, hi, s.address + bit))
        leaves.sort()
        self.leaf_lo = np.array([lf[0] for lf in leaves])
        self.leaf_hi = np.array([lf[1] for lf in leaves])
        self.leaf_address = [lf[2] for lf in leaves]

        # leaf index ranges covered by each split and by its left child
        self._range = np.empty((len(self.splits), 3), dtype=np.int64)
        for k, s in enumerate(self.splits):
            a = int(np.searchsorted(self.leaf_lo, s.lo))
            m = int(np.searchsorted(self.leaf_lo, s.cut))
            b = int(np.searchsorted(self.leaf_lo, s.hi))
            self._range[k] = (a, m, b)

    @property
    def root(self) -> Split:
        return self._by_addr[""]

    @property
    def n_splits(self) -> int:
        return len(self.splits)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_lo)

    def __len__(self) -> int:
        return len(self.splits)

    def leaf_of(self, values) -> np.ndarray:
        """Leaf index of each value; values at or above the root's upper edge go to the last leaf."""
        idx = np.searchsorted(self.leaf_lo, np.asarray(values, dtype=np.float64), side="right") - 1
        return np.clip(idx, 0, self.n_leaves - 1)

    def to_json(self) -> dict:
        return {
            "splits": [
                {"address": s.address, "lo": s.lo, "hi": s.hi, "cut": s.cut} for s in self.splits
            ]
        }

    @classmethod
    def from_json(cls, data) -> "DyadicTree":
        return cls(Split(d["address"], float(d["lo"]), float(d["hi"]), float(d["cut"])) for d in data["splits"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "DyadicTree":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_quantile_tree(
    pooled_samples,
    depth: int,
    tail_cap: float | None = None,
    n_left_tail: int = 1,
    n_right_tail: int = 5,
    support: tuple[float, float] | None = None,
) -> DyadicTree:
    """Balanced tree on dyadic quantiles of the pooled data, plus tail splits.

    The balanced part has ``2**depth - 1`` splits at quantiles ``k / 2**depth``.
    The leftmost leaf gets ``n_left_tail`` (0 or 1) extra split at the
    midpoint of ``[min, q_{1/2^d})``.  The rightmost leaf is split repeatedly
    at the interior points of ``n_right_tail + 2`` uniformly spaced points on
    ``[q_{1-1/2^d}, tail_cap]``, each new split subdividing the previous right
    child.  Cut points that would fall outside their node (or coincide with a
    bound) are skipped; the realised count is ``len(tree)``.

    ``support`` overrides the root interval, which defaults to
    ``[min(samples), max(samples))``.
    """
    y = np.asarray(pooled_samples, dtype=np.float64)
    if y.size == 0:
        raise ValueError("pooled samples must be non-empty")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if n_left_tail not in (0, 1):
        raise ValueError("n_left_tail must be 0 or 1")
    lo, hi = (float(y.min()), float(y.max())) if support is None else map(float, support)
    if not lo < hi:
        raise ValueError(f"degenerate support [{lo}, {hi})")

    K = 2**depth
    q = np.quantile(y, np.arange(K + 1) / K)
    q[0], q[K] = lo, hi
    splits: list[Split] = []
    requested = K - 1 + n_left_tail + n_right_tail
    # breadth-first: level k has nodes j = 0..2^k-1 covering quantile indices
    nodes = {"": (0, K)}
    for level in range(depth):
        for j in range(2**level):
            addr = format(j, f"0{level}b") if level else ""
            if addr not in nodes:
                continue
            a, b = nodes.pop(addr)
            m = (a + b) // 2
            node_lo, node_hi, cut = q[a], q[b], q[m]
            if not node_lo < cut < node_hi:
                # degenerate quantile: collapse this node onto its non-empty side
                continue
            splits.append(Split(addr, float(node_lo), float(node_hi), float(cut)))
            if level + 1 < depth:
                nodes[addr + "0"] = (a, m)
                nodes[addr + "1"] = (m, b)

    tree = DyadicTree(splits)
    if n_left_tail:
        first = tree.leaf_address[0]
        llo, lhi = tree.leaf_lo[0], tree.leaf_hi[0]
        cut = 0.5 * (llo + lhi)
        if llo < cut < lhi:
            splits.append(Split(first, float(llo), float(lhi), float(cut)))
    if n_right_tail:
        if tail_cap is None:
            raise ValueError("tail_cap is required for right-tail splits")
        addr = tree.leaf_address[-1]
        node_lo, node_hi = float(tree.leaf_lo[-1]), float(tree.leaf_hi[-1])
        if tail_cap <= node_lo:
            raise ValueError(f"tail_cap {tail_cap} must exceed the top quantile {node_lo}")
        points = np.linspace(node_lo, tail_cap, n_right_tail + 2)[1:-1]
        for x in points:
            if not node_lo < x < node_hi:
                continue
            splits.append(Split(addr, node_lo, node_hi, float(x)))
            addr, node_lo = addr + "1", float(x)

    tree = DyadicTree(splits)
    if len(tree) < requested:
        logger.warning("quantile tree: %d of %d requested splits realised", len(tree), requested)
    return tree


@dataclass
class SplitCounts:
    """Binomial counts per split and vertex: ``attempts[k, v]`` and left-child ``successes[k, v]``."""

    attempts: np.ndarray
    successes: np.ndarray
    leaf_counts: np.ndarray
    n_clamped: int = 0

    @property
    def n_splits(self) -> int:
        return self.attempts.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.attempts.shape[1]

    def restrict(self, keep_vertices) -> "SplitCounts":
        """Copy with every vertex outside ``keep_vertices`` (bool mask) emptied."""
        keep = np.asarray(keep_vertices, dtype=bool)
        return SplitCounts(
            self.attempts * keep, self.successes * keep, self.leaf_counts * keep[:, None], self.n_clamped
        )


def bin_observations(tree: DyadicTree, n_vertices: int, vertex, values) -> SplitCounts:
    """Count observations ``values[i]`` at vertex ``vertex[i]`` into every split.

    Values at or above the root's upper edge are clamped into the last leaf
    (``n_clamped`` reports how many).

    Raises
    ------
    ValueError
        If a value lies below the root's lower edge or a vertex index is out of range.
    """
    vertex = np.asarray(vertex, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if vertex.shape != values.shape:
        raise ValueError("vertex and values must have the same length")
    below = np.flatnonzero(values < tree.root.lo)
    if below.size:
        raise ValueError(f"observation {below[0]} ({values[below[0]]}) is below the support {tree.root.lo}")
    bad = np.flatnonzero((vertex < 0) | (vertex >= n_vertices))
    if bad.size:
        raise ValueError(f"observation {bad[0]} has invalid vertex {vertex[bad[0]]}")
    n_clamped = int(np.count_nonzero(values >= tree.root.hi))
    if n_clamped:
        logger.info("clamped %d observation(s) into the last leaf", n_clamped)
    leaf = tree.leaf_of(values)
    L = tree.n_leaves
    leaf_counts = np.bincount(vertex * L + leaf, minlength=n_vertices * L).reshape(n_vertices, L)
    cum = np.concatenate([np.zeros((n_vertices, 1), dtype=np.int64), np.cumsum(leaf_counts, axis=1)], axis=1)
    a, m, b = tree._range.T
    attempts = (cum[:, b] - cum[:, a]).T
    successes = (cum[:, m] - cum[:, a]).T
    return SplitCounts(attempts.astype(np.int64), successes.astype(np.int64), leaf_counts, n_clamped)


def leaf_probabilities(tree: DyadicTree, beta) -> np.ndarray:
    """Leaf masses ``(n_vertices, n_leaves)`` from split log-odds ``beta[k, v]``.

    Each leaf's mass is the product, along its root-to-leaf path, of the
    left-child probability ``sigmoid(beta)`` or its complement.
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=np.float64))
    if beta.shape[0] != tree.n_splits:
        raise ValueError(f"expected {tree.n_splits} split fields, got {beta.shape[0]}")
    left = expit(beta)
    right = expit(-beta)
    probs = np.ones((beta.shape[1], tree.n_leaves))
    for k in range(tree.n_splits):
        a, m, b = tree._range[k]
        probs[:, a:m] *= left[k][:, None]
        probs[:, m:b] *= right[k][:, None]
    return probs


class DensityModel:
    """Per-vertex piecewise-uniform densities on the leaves of ``tree``."""

    def __init__(self, tree: DyadicTree, beta):
        self.tree = tree
        self.beta = np.atleast_2d(np.asarray(beta, dtype=np.float64))
        self.probs = leaf_probabilities(tree, self.beta)

    @property
    def n_vertices(self) -> int:
        return self.probs.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.tree.leaf_hi - self.tree.leaf_lo

    def log_density(self, vertex, values) -> np.ndarray:
        """Log of the piecewise-constant density at ``values`` (clamped to the end leaves)."""
        leaf = self.tree.leaf_of(values)
        mass = self.probs[np.asarray(vertex), leaf]
        with np.errstate(divide="ignore"):
            return np.log(mass) - np.log(self.widths[leaf])

    def tail_probability(self, threshold: float, vertices=None) -> np.ndarray:
        """Mass strictly above ``threshold``, uniform within the straddling leaf."""
        p = self._rows(vertices)
        frac = np.clip((self.tree.leaf_hi - threshold) / self.widths, 0.0, 1.0)
        return p @ frac

    def quantile(self, alpha: float, vertices=None) -> np.ndarray:
        """Smallest value whose cumulative mass reaches ``alpha``."""
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        p = self._rows(vertices)
        cum = np.cumsum(p, axis=1)
        # tolerate round-off in the running sum so alpha=0.5 on exact halves lands on the edge
        k = np.argmax(cum >= alpha - 1e-12, axis=1)
        k = np.where(cum[:, -1] >= alpha - 1e-12, k, p.shape[1] - 1)
        rows = np.arange(p.shape[0])
        before = np.where(k > 0, cum[rows, k - 1], 0.0)
        mass = p[rows, k]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(mass > 0, (alpha - before) / mass, 0.0)
        frac = np.clip(frac, 0.0, 1.0)
        return self.tree.leaf_lo[k] + frac * self.widths[k]

    def iqr(self, vertices=None) -> np.ndarray:
        return self.quantile(0.75, vertices) - self.quantile(0.25, vertices)

    def mean(self, vertices=None) -> np.ndarray:
        mid = 0.5 * (self.tree.leaf_lo + self.tree.leaf_hi)
        return self._rows(vertices) @ mid

    def query(self, kind: str, vertices=None, **params) -> np.ndarray:
        if kind == "tail_probability":
            return self.tail_probability(params["threshold"], vertices)
        if kind == "quantile":
            return self.quantile(params["alpha"], vertices)
        if kind == "iqr":
            return self.iqr(vertices)
        if kind == "mean":
            return self.mean(vertices)
        raise ValueError(f"unknown query kind {kind!r}")

    def _rows(self, vertices):
        return self.probs if vertices is None else self.probs[np.atleast_1d(vertices)]

    def write_csv(self, path) -> None:
        """Write ``vertex,leaf_lo,leaf_hi,mass`` rows; floats use round-trip repr."""
        lo, hi = self.tree.leaf_lo.tolist(), self.tree.leaf_hi.tolist()
        with open(path, "w", newline="") as fh:
            fh.write("vertex,leaf_lo,leaf_hi,mass\n")
            for v in range(self.n_vertices):
                row = self.probs[v].tolist()
                fh.writelines(f"{v},{lo[k]!r},{hi[k]!r},{row[k]!r}\n" for k in range(len(row)))


def reconstruct_density(beta, tree: DyadicTree) -> DensityModel:
    return DensityModel(tree, beta)
