"""Trip records to per-vertex productivity observations.

Each trip of a driver is paired with the same driver's next trip.  With
``w`` the idle time from dropoff to the next dispatch, ``rho`` the time to
reach the next pickup and ``d`` the next trip's duration, the productivity
is the next fare over ``w + rho + d`` in dollars per hour, credited to the
dropoff zone and hour-of-week of the first trip.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .graph import SpatioTemporalGraph

logger = logging.getLogger(__name__)

HOURS_PER_WEEK = 168
MAX_IDLE_HOURS = 1.0

DEFAULT_COLUMNS = {
    "driver": "driver_id",
    "dispatched": "dispatched_at",
    "started": "started_at",
    "ended": "ended_at",
    "pickup": "pickup_taz",
    "dropoff": "dropoff_taz",
    "fare": "fare",
}


@dataclass
class IngestConfig:
    """Column mapping and filters for :func:`compute_productivity`.

    ``timezone`` is the civil zone used for hour-of-week.  Naive timestamps
    are read as local time in that zone; aware ones are converted.
    ``start``/``end`` bound the first trip's end time (``end`` exclusive).
    """

    columns: dict = field(default_factory=lambda: dict(DEFAULT_COLUMNS))
    timezone: str = "UTC"
    start: str | None = None
    end: str | None = None
    max_idle_hours: float = MAX_IDLE_HOURS
    known_zones: frozenset | None = None

    @classmethod
    def from_dict(cls, d: dict | None) -> "IngestConfig":
        d = dict(d or {})
        cols = dict(DEFAULT_COLUMNS)
        cols.update(d.pop("columns", {}) or {})
        unknown = set(cols) - set(DEFAULT_COLUMNS)
        if unknown:
            raise ValueError(f"unknown column roles: {sorted(unknown)}")
        zones = d.pop("known_zones", None)
        cfg = cls(columns=cols, known_zones=None if zones is None else frozenset(map(str, zones)), **d)
        return cfg


@dataclass
class IngestReport:
    """Counts of what happened to each record and pair."""

    trips: int = 0
    pairs: int = 0
    emitted: int = 0
    rejected: Counter = field(default_factory=Counter)

    def as_dict(self) -> dict:
        return {"trips": self.trips, "pairs": self.pairs, "emitted": self.emitted, "rejected": dict(self.rejected)}


def hour_of_week(ts: pd.Series) -> np.ndarray:
    """Hour index ``0..167`` with the week starting at midnight Sunday.

    >>> hour_of_week(pd.Series(pd.to_datetime(["2017-01-02 00:30"])))  # a Monday
    array([24])
    """
    return (((ts.dt.dayofweek + 1) % 7) * 24 + ts.dt.hour).to_numpy(dtype=np.int64)


def _localize(col: pd.Series, tz: str) -> pd.Series:
    ts = pd.to_datetime(col)
    if ts.dt.tz is None:
        return ts.dt.tz_localize(tz, ambiguous="NaT", nonexistent="NaT")
    return ts.dt.tz_convert(tz)


def _hours(delta: pd.Series) -> np.ndarray:
    return delta.dt.total_seconds().to_numpy() / 3600.0


def compute_productivity(trips: pd.DataFrame, config: IngestConfig | None = None) -> tuple[pd.DataFrame, IngestReport]:
    """Productivity observations ``taz, hour, productivity`` from raw trips.

    Trips are sorted per driver by dispatch time.  A trip is rejected (and
    cannot take part in any pair) when it has a missing or inverted
    timestamp, a negative fare, or an unknown zone.  A pair is rejected when
    the idle time is negative (overlapping trips), dropped when idle time is
    at least ``max_idle_hours``, and rejected when the resulting rate is not
    positive and finite.  ``report.rejected`` counts each reason.
    """
    cfg = config or IngestConfig()
    c = cfg.columns
    missing_cols = [v for v in c.values() if v not in trips.columns]
    if missing_cols:
        raise ValueError(f"trip table lacks columns {missing_cols}")
    report = IngestReport(trips=len(trips))
    trips = trips.reset_index(drop=True)
    df = pd.DataFrame({
        "driver": trips[c["driver"]].astype(str),
        "dispatched": _localize(trips[c["dispatched"]], cfg.timezone),
        "started": _localize(trips[c["started"]], cfg.timezone),
        "ended": _localize(trips[c["ended"]], cfg.timezone),
        "pickup": trips[c["pickup"]].astype(str),
        "dropoff": trips[c["dropoff"]].astype(str),
        "fare": pd.to_numeric(trips[c["fare"]], errors="coerce").astype(float),
    })

    bad = pd.Series("", index=df.index)

    def flag(mask, reason):
        mask = np.asarray(mask) & (bad == "").to_numpy()
        bad[mask] = reason

    flag(df[["dispatched", "started", "ended"]].isna().any(axis=1), "missing_timestamp")
    flag(df["started"] < df["dispatched"], "negative_reach")
    flag(df["ended"] < df["started"], "negative_duration")
    flag(~np.isfinite(df["fare"]) | (df["fare"] < 0), "bad_fare")
    if cfg.known_zones is not None:
        flag(~df["dropoff"].isin(cfg.known_zones) | ~df["pickup"].isin(cfg.known_zones), "unknown_taz")
    for reason, n in bad[bad != ""].value_counts().items():
        report.rejected[reason] += int(n)
        logger.warning("rejected %d trip(s): %s", n, reason)
    df["valid"] = (bad == "").to_numpy()

    df = df.sort_values(["driver", "dispatched", "started"], kind="stable").reset_index(drop=True)
    nxt = df.groupby("driver", sort=False).shift(-1)
    has_next = nxt["valid"].notna().to_numpy()
    pair = has_next & df["valid"].to_numpy() & nxt["valid"].eq(True).to_numpy()
    report.pairs = int(has_next.sum())
    report.rejected["invalid_partner"] += int((has_next & ~pair).sum())

    w = _hours(nxt["dispatched"] - df["ended"])
    rho = _hours(nxt["started"] - nxt["dispatched"])
    d = _hours(nxt["ended"] - nxt["started"])
    with np.errstate(divide="ignore", invalid="ignore"):
        pi = nxt["fare"].to_numpy(dtype=float) / (w + rho + d)

    neg_idle = pair & (w < 0)
    report.rejected["negative_idle"] += int(neg_idle.sum())
    long_idle = pair & ~neg_idle & (w >= cfg.max_idle_hours)
    report.rejected["idle_over_limit"] += int(long_idle.sum())
    keep = pair & ~neg_idle & ~long_idle
    bad_rate = keep & ~(np.isfinite(pi) & (pi > 0))
    report.rejected["nonpositive_rate"] += int(bad_rate.sum())
    keep &= ~bad_rate

    ended = df["ended"]
    if cfg.start is not None:
        in_range = (ended >= pd.Timestamp(cfg.start, tz=cfg.timezone)).to_numpy()
        report.rejected["out_of_range"] += int((keep & ~in_range).sum())
        keep &= in_range
    if cfg.end is not None:
        in_range = (ended < pd.Timestamp(cfg.end, tz=cfg.timezone)).to_numpy()
        report.rejected["out_of_range"] += int((keep & ~in_range).sum())
        keep &= in_range

    report.rejected = Counter({k: v for k, v in report.rejected.items() if v})
    out = pd.DataFrame({
        "taz": df["dropoff"].to_numpy()[keep],
        "hour": hour_of_week(ended[keep]),
        "productivity": pi[keep],
    })
    report.emitted = len(out)
    return out, report


def read_trips(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype=str, keep_default_na=True)


def write_observations(obs: pd.DataFrame, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("taz,hour,productivity\n")
        fh.writelines(f"{z},{int(h)},{float(p)!r}\n" for z, h, p in obs[["taz", "hour", "productivity"]].itertuples(index=False))


def read_observations(path) -> pd.DataFrame:
    obs = pd.read_csv(path, dtype={"taz": str}, float_precision="round_trip")
    missing = {"taz", "hour", "productivity"} - set(obs.columns)
    if missing:
        raise ValueError(f"observation file lacks columns {sorted(missing)}")
    return obs


@dataclass
class BinnedObservations:
    vertex: np.ndarray
    values: np.ndarray
    excluded: int

    def counts(self, n_vertices: int) -> np.ndarray:
        return np.bincount(self.vertex, minlength=n_vertices)


def bin_to_graph(obs: pd.DataFrame, graph: SpatioTemporalGraph) -> BinnedObservations:
    """Map observations to graph vertices; zones not in the graph are excluded and counted.

    Raises
    ------
    ValueError
        If an hour index is outside the graph's time range.
    """
    index = graph.location_index()
    taz = obs["taz"].astype(str).to_numpy()
    hour = obs["hour"].to_numpy(dtype=np.int64)
    T = graph.times
    if hour.size and (hour.min() < 0 or hour.max() >= T):
        raise ValueError(f"hour index outside 0..{T - 1}")
    loc = np.array([index.get(z, -1) for z in taz], dtype=np.int64)
    ok = loc >= 0
    excluded = int((~ok).sum())
    if excluded:
        logger.warning("excluded %d observation(s) in zones outside the graph", excluded)
    vertex = loc[ok] * T + hour[ok]
    values = obs["productivity"].to_numpy(dtype=float)[ok]
    return BinnedObservations(vertex, values, excluded)
