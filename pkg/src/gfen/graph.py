"""Spatiotemporal graphs (locations x time slots) and their trail decompositions."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

SPATIAL = "spatial"
TEMPORAL = "temporal"


@dataclass(frozen=True, eq=False)
class SpatioTemporalGraph:
    """Undirected graph on ``locations x range(times)``.

    Vertex ``(s, t)`` has index ``s * times + t``, so the temporal slice of
    one location is a contiguous block.  ``adjacency`` holds location index
    pairs; the spatial edges repeat it in every time slice.  Temporal edges
    join consecutive hours of a location, plus a wrap edge from the last to
    the first slot when ``cyclic``.
    """

    locations: tuple
    times: int
    adjacency: np.ndarray
    cyclic: bool = True
    dropped: tuple = ()
    spatial_edges: np.ndarray = field(init=False, repr=False)
    temporal_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S, T = len(self.locations), self.times
        adj = np.asarray(self.adjacency, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "adjacency", adj)
        t = np.arange(T)
        sp = (adj[:, None, :] * T + t[None, :, None]).transpose(1, 0, 2).reshape(-1, 2)
        n_t = T if self.cyclic else T - 1
        base = np.arange(S)[:, None] * T
        tmp = np.stack(
            [base + np.arange(n_t)[None, :], base + (np.arange(n_t)[None, :] + 1) % T],
            axis=-1,
        ).reshape(-1, 2)
        object.__setattr__(self, "spatial_edges", sp)
        object.__setattr__(self, "temporal_edges", tmp)

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def n_vertices(self) -> int:
        return len(self.locations) * self.times

    @property
    def edges(self) -> np.ndarray:
        return np.vstack([self.spatial_edges, self.temporal_edges])

    def vertex(self, location_index, t):
        return np.asarray(location_index) * self.times + np.asarray(t)

    def split_vertex(self, v):
        """Return ``(location_index, time)`` for vertex index ``v``."""
        return np.divmod(v, self.times)

    def location_index(self) -> dict:
        return {loc: i for i, loc in enumerate(self.locations)}

    def to_json(self) -> dict:
        return {
            "locations": list(self.locations),
            "times": self.times,
            "cyclic": self.cyclic,
            "dropped": list(self.dropped),
            "adjacency": self.adjacency.tolist(),
            "vertices": [[loc, t] for loc in self.locations for t in range(self.times)],
            "spatial_edges": self.spatial_edges.tolist(),
            "temporal_edges": self.temporal_edges.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SpatioTemporalGraph":
        return cls(
            locations=tuple(data["locations"]),
            times=int(data["times"]),
            adjacency=np.asarray(data["adjacency"], dtype=np.int64).reshape(-1, 2),
            cyclic=bool(data.get("cyclic", True)),
            dropped=tuple(data.get("dropped", ())),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "SpatioTemporalGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_graph(
    locations: Sequence,
    spatial_adjacency: Sequence[tuple],
    times: int,
    cyclic: bool = True,
) -> SpatioTemporalGraph:
    """Build the spatiotemporal graph for ``locations`` over ``times`` slots.

    Locations outside the largest connected component of the adjacency are
    dropped with a warning; the dropped ids are kept on ``graph.dropped``.

    Raises
    ------
    ValueError
        On unknown locations, self-loops, duplicate pairs (in either
        orientation), duplicate location ids or ``times < 2``.
    """
    if times < 2:
        raise ValueError(f"times must be >= 2, got {times}")
    locations = list(locations)
    index = {loc: i for i, loc in enumerate(locations)}
    if len(index) != len(locations):
        raise ValueError("duplicate location ids")
    if not locations:
        raise ValueError("no locations")

    pairs = []
    seen = set()
    for a, b in spatial_adjacency:
        if a not in index or b not in index:
            missing = a if a not in index else b
            raise ValueError(f"adjacency references unknown location {missing!r}")
        if a == b:
            raise ValueError(f"self-loop at location {a!r}")
        key = frozenset((a, b))
        if key in seen:
            raise ValueError(f"duplicate adjacency pair ({a!r}, {b!r})")
        seen.add(key)
        pairs.append((index[a], index[b]))

    S = len(locations)
    adj = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    mat = coo_matrix((np.ones(len(adj)), (adj[:, 0], adj[:, 1])), shape=(S, S))
    _, labels = connected_components(mat, directed=False)
    sizes = np.bincount(labels)
    # argmax picks the component holding the lowest location index on ties
    keep_label = int(np.argmax(sizes))
    keep = labels == keep_label
    dropped = tuple(loc for loc, k in zip(locations, keep) if not k)
    if dropped:
        warnings.warn(
            f"dropping {len(dropped)} location(s) disconnected from the largest "
            f"component: {list(dropped)}",
            stacklevel=2,
        )
        remap = -np.ones(S, dtype=np.int64)
        remap[keep] = np.arange(keep.sum())
        locations = [loc for loc, k in zip(locations, keep) if k]
        adj = remap[adj]
        adj = adj[(adj >= 0).all(axis=1)]
    return SpatioTemporalGraph(
        locations=tuple(locations), times=int(times), adjacency=adj, cyclic=cyclic, dropped=dropped
    )


def grid_graph(n_space: int, n_time: int, cyclic: bool = False) -> SpatioTemporalGraph:
    """Chain of ``n_space`` locations over ``n_time`` slots (simulation grids)."""
    adjacency = [(i, i + 1) for i in range(n_space - 1)]
    return build_graph(range(n_space), adjacency, n_time, cyclic=cyclic)


def read_locations_csv(path) -> list:
    with open(path, newline="") as fh:
        return [row["loc_id"] for row in csv.DictReader(fh)]


def read_adjacency_csv(path) -> list:
    with open(path, newline="") as fh:
        return [(row["loc_a"], row["loc_b"]) for row in csv.DictReader(fh)]


@dataclass
class TrailDecomposition:
    """Edge-disjoint trails, each made only of spatial or only of temporal edges."""

    trails: list
    kinds: list

    def __post_init__(self):
        self.trails = [np.asarray(t, dtype=np.int64) for t in self.trails]
        if len(self.trails) != len(self.kinds):
            raise ValueError("one kind per trail required")
        for k in self.kinds:
            if k not in (SPATIAL, TEMPORAL):
                raise ValueError(f"unknown trail kind {k!r}")

    def __len__(self):
        return len(self.trails)

    def edges(self) -> np.ndarray:
        """All consecutive vertex pairs, trail by trail."""
        out = [np.stack([t[:-1], t[1:]], axis=1) for t in self.trails if len(t) > 1]
        if not out:
            return np.zeros((0, 2), dtype=np.int64)
        return np.vstack(out)

    def of_kind(self, kind: str) -> list:
        return [t for t, k in zip(self.trails, self.kinds) if k == kind]


def _greedy_trails(n_nodes: int, edges: np.ndarray) -> list:
    """Cover ``edges`` by edge-disjoint trails.

    Each trail starts at the lowest-index unused edge and is extended at its
    tail, then at its head, always through the lowest-index unused incident
    edge, until both ends are stuck.
    """
    m = len(edges)
    incident = [[] for _ in range(n_nodes)]
    for e, (a, b) in enumerate(edges):
        incident[a].append(e)
        incident[b].append(e)
    pointer = [0] * n_nodes
    used = np.zeros(m, dtype=bool)

    def next_edge(node):
        lst = incident[node]
        p = pointer[node]
        while p < len(lst) and used[lst[p]]:
            p += 1
        pointer[node] = p
        return lst[p] if p < len(lst) else -1

    def extend(path):
        while True:
            node = path[-1]
            e = next_edge(node)
            if e < 0:
                return
            used[e] = True
            a, b = edges[e]
            path.append(b if a == node else a)

    trails = []
    for e0 in range(m):
        if used[e0]:
            continue
        used[e0] = True
        a, b = (int(x) for x in edges[e0])
        forward = [a, b]
        extend(forward)
        backward = [a]
        extend(backward)
        trails.append(backward[::-1] + forward[1:])
    return trails


def decompose_trails(graph: SpatioTemporalGraph) -> TrailDecomposition:
    """Edge-disjoint trail cover of ``graph``.

    The spatial slice is decomposed once and replicated in every time slot.
    Each location's temporal chain is one trail; for cyclic graphs it starts
    at slot 0 and ends with the wrap edge back to slot 0.
    """
    T = graph.times
    slice_trails = _greedy_trails(graph.n_locations, graph.adjacency)
    trails, kinds = [], []
    for t in range(T):
        for tr in slice_trails:
            trails.append(np.asarray(tr, dtype=np.int64) * T + t)
            kinds.append(SPATIAL)
    steps = np.arange(T + 1) if graph.cyclic else np.arange(T)
    for s in range(graph.n_locations):
        trails.append(s * T + steps % T)
        kinds.append(TEMPORAL)
    return TrailDecomposition(trails, kinds)


def chain_trails(n: int, kind: str = SPATIAL) -> TrailDecomposition:
    """A single trail ``0 - 1 - ... - n-1``."""
    return TrailDecomposition([np.arange(n)], [kind])
