"""Command-line entry point: ``gfen <command> [--config run.yaml] [flags]``.

Settings come from built-in defaults, then the YAML config, then flags.
Logs go to stderr; every result is a file.  Exit status is 0 on success,
2 for input or configuration errors and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .admm import AdmmOptions, PenaltyConfig, TrailLayout, fit_map, NodeLoss
from .graph import SpatioTemporalGraph, build_graph, decompose_trails, read_adjacency_csv, read_locations_csv
from .tree import DensityModel, DyadicTree, bin_observations, build_quantile_tree

logger = logging.getLogger("gfen")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

PRESETS = {
    "living-wage": (18.56, 21.64, 32.73, 34.74),
    "quantiles": (0.1, 0.25, 0.5, 0.75, 0.9),
}
QUERY_KINDS = ("tail_probability", "quantile", "iqr", "mean")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "ingest": {"timezone": "UTC", "start": None, "end": None, "columns": {}},
    "graph": {"times": 168, "cyclic": True},
    "tree": {"depth": 5, "tail_cap": 100.0, "n_left_tail": 1, "n_right_tail": 5, "support": None},
    "penalties": None,
    "tuning": {"generations": 48, "candidates": 6, "folds": 5, "per_split": True},
    "solver": {"tol": 1e-6, "max_iter": 5000},
    "mcmc": {"iters": 5000, "burn_in": 4000, "thin": 1, "mode": "sweep", "perturbation": 1.0},
    "query": {"kind": "tail_probability", "threshold": None, "alpha": None, "preset": None, "hour": None, "level": 0.9},
    "simulate": {"n": 15, "spatial": "pw_constant", "temporal": "pw_constant", "sigma": 0.2,
                 "missing": 0.1, "samples": 10, "outliers": False},
    "bench": {"n": 15, "replicates": 8, "n_lambda": 12, "tol": 1e-4},
}


class InputError(Exception):
    """Bad input or configuration (exit 2)."""


class NumericalError(Exception):
    """Solver or sampler failure (exit 3)."""


# ----------------------------------------------------------------------------
# configuration and provenance


def _merge(base: dict, upd: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in (upd or {}).items():
        if k not in out:
            raise InputError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and k not in ("penalties",) and k != "columns":
            if not isinstance(v, dict):
                raise InputError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge(out[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as err:
        raise InputError(f"cannot read config: {err}") from err
    except yaml.YAMLError as err:
        raise InputError(f"malformed config {path}: {err}") from err
    if not isinstance(data, dict):
        raise InputError(f"config {path} must be a mapping")
    data.pop("paths", None)
    return _merge(DEFAULTS, data)


def config_paths(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    paths = data.get("paths") or {}
    base = Path(path).parent
    return {k: str(base / v) for k, v in paths.items()}


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {"gfen": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, final_dir: Path | None = None) -> None:
    """Record config, versions, input hashes and hashes of every file written to ``out_dir``."""
    outputs = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            outputs[p.relative_to(out_dir).as_posix()] = sha256(p)
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": sha256(v)} for k, v in sorted(inputs.items())},
        "outputs": outputs,
        "versions": _versions(),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)


class Staging:
    """Write into a sibling temporary directory; move into place only on success."""

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.tmp, self.target)
        return False


def _require(path, what):
    if path is None:
        raise InputError(f"missing required input: {what}")
    if not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    return path


# ----------------------------------------------------------------------------
# shared loaders


def _load_graph(path) -> SpatioTemporalGraph:
    try:
        return SpatioTemporalGraph.load(_require(path, "graph"))
    except (KeyError, ValueError, json.JSONDecodeError) as err:
        raise InputError(f"invalid graph file {path}: {err}") from err


def _load_tree(path) -> DyadicTree:
    try:
        return DyadicTree.load(_require(path, "tree"))
    except (KeyError, ValueError, json.JSONDecodeError) as err:
        raise InputError(f"invalid tree file {path}: {err}") from err


def _load_binned(path, graph):
    from .ingest import bin_to_graph, read_observations

    try:
        obs = read_observations(_require(path, "observations"))
        return bin_to_graph(obs, graph)
    except (ValueError, KeyError) as err:
        raise InputError(f"invalid observations {path}: {err}") from err


def _counts(tree, graph, binned):
    try:
        return bin_observations(tree, graph.n_vertices, binned.vertex, binned.values)
    except ValueError as err:
        raise InputError(str(err)) from err


def _options(cfg) -> AdmmOptions:
    s = cfg["solver"]
    if not (s["tol"] > 0 and int(s["max_iter"]) > 0):
        raise InputError("solver.tol and solver.max_iter must be positive")
    return AdmmOptions(tol=float(s["tol"]), max_iter=int(s["max_iter"]))


def _penalties_for(spec, n_splits):
    """Per-split list of PenaltyConfig from a shared dict, a list, or a split-keyed mapping."""
    try:
        if isinstance(spec, dict) and set(spec) <= set(PenaltyConfig.names()):
            return [PenaltyConfig.from_dict(spec)] * n_splits
        if isinstance(spec, dict):
            if "shared" in spec:
                return [PenaltyConfig.from_dict(spec["shared"])] * n_splits
            out = [PenaltyConfig.from_dict(spec[str(k)] if str(k) in spec else spec[k]) for k in range(n_splits)]
            return out
        if isinstance(spec, list):
            if len(spec) != n_splits:
                raise InputError(f"{len(spec)} penalty entries for {n_splits} splits")
            return [PenaltyConfig.from_dict(d) for d in spec]
    except (KeyError, TypeError, ValueError) as err:
        raise InputError(f"invalid penalties: {err}") from err
    raise InputError("penalties must be given (config 'penalties', --penalties or --lambda)")


def _vertex_keys(graph: SpatioTemporalGraph):
    loc, t = graph.split_vertex(np.arange(graph.n_vertices))
    return [graph.locations[i] for i in loc], t


# ----------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg):
    from .ingest import IngestConfig, compute_productivity, read_trips, write_observations

    icfg = dict(cfg["ingest"])
    for k in ("timezone", "start", "end"):
        if getattr(args, k, None) is not None:
            icfg[k] = getattr(args, k)
    if args.locations:
        icfg["known_zones"] = read_locations_csv(_require(args.locations, "locations"))
    try:
        conf = IngestConfig.from_dict(icfg)
        trips = read_trips(_require(args.trips, "trips"))
        obs, report = compute_productivity(trips, conf)
    except (ValueError, TypeError, KeyError) as err:
        raise InputError(str(err)) from err
    out = Path(_out(args))
    with Staging(out) as tmp:
        write_observations(obs, tmp / "observations.csv")
        with open(tmp / "report.json", "w") as fh:
            json.dump(report.as_dict(), fh, indent=1, sort_keys=True)
        inputs = {"trips": args.trips} | ({"locations": args.locations} if args.locations else {})
        write_manifest(tmp, "ingest", cfg | {"ingest": icfg | {"known_zones": None}}, inputs)
    logger.info("emitted %d observation(s) from %d trip(s)", report.emitted, report.trips)


def cmd_graph(args, cfg):
    g = dict(cfg["graph"])
    if args.times is not None:
        g["times"] = args.times
    if args.no_cyclic:
        g["cyclic"] = False
    try:
        locs = read_locations_csv(_require(args.locations, "locations"))
        adj = read_adjacency_csv(_require(args.adjacency, "adjacency"))
        graph = build_graph(locs, adj, int(g["times"]), cyclic=bool(g["cyclic"]))
    except (ValueError, KeyError) as err:
        raise InputError(str(err)) from err
    out = Path(_out(args))
    with Staging(out) as tmp:
        graph.save(tmp / "graph.json")
        write_manifest(tmp, "graph", cfg | {"graph": g}, {"locations": args.locations, "adjacency": args.adjacency})
    logger.info("graph: %d vertices, %d edges, %d dropped location(s)", graph.n_vertices, len(graph.edges), len(graph.dropped))


def _tree_settings(args, cfg):
    t = dict(cfg["tree"])
    if args.depth is not None:
        t["depth"] = args.depth
    if args.tail_cap is not None:
        t["tail_cap"] = args.tail_cap
    return t


def cmd_tree(args, cfg):
    from .ingest import read_observations

    t = _tree_settings(args, cfg)
    try:
        obs = read_observations(_require(args.observations, "observations"))
        tree = build_quantile_tree(
            obs["productivity"].to_numpy(dtype=float), int(t["depth"]), tail_cap=t["tail_cap"],
            n_left_tail=int(t["n_left_tail"]), n_right_tail=int(t["n_right_tail"]),
            support=None if t["support"] is None else tuple(t["support"]),
        )
    except (ValueError, KeyError) as err:
        raise InputError(str(err)) from err
    out = Path(_out(args))
    with Staging(out) as tmp:
        tree.save(tmp / "tree.json")
        write_manifest(tmp, "tree", cfg | {"tree": t}, {"observations": args.observations})
    logger.info("tree with %d splits", len(tree))


def cmd_tune(args, cfg):
    from .selection import ALL_DIMS, assign_folds, tune, write_best, write_tuning_log

    tcfg = dict(cfg["tuning"])
    for k in ("generations", "candidates", "folds"):
        if getattr(args, k) is not None:
            tcfg[k] = getattr(args, k)
    if args.shared:
        tcfg["per_split"] = False
    graph = _load_graph(args.graph)
    tree = _load_tree(args.tree)
    counts = _counts(tree, graph, _load_binned(args.observations, graph))
    opts = _options(cfg)
    try:
        folds = assign_folds(graph.n_vertices, int(tcfg["folds"]), cfg["seed"])
    except ValueError as err:
        raise InputError(str(err)) from err
    layout = TrailLayout(decompose_trails(graph), graph.n_vertices)
    try:
        res = tune(counts, layout, folds, generations=int(tcfg["generations"]), n_candidates=int(tcfg["candidates"]),
                   seed=cfg["seed"], per_split=bool(tcfg["per_split"]), active=ALL_DIMS, options=opts,
                   threads=int(cfg["threads"]))
    except FloatingPointError as err:
        raise NumericalError(str(err)) from err
    out = Path(_out(args))
    with Staging(out) as tmp:
        write_tuning_log(res.log, tmp / "tuning_log.csv")
        write_best(res.best, tmp / "penalties.json")
        write_manifest(tmp, "tune", cfg | {"tuning": tcfg},
                       {"graph": args.graph, "tree": args.tree, "observations": args.observations})


def _fit_all(counts, layout, penalties, opts, threads):
    def one(k):
        return fit_map(NodeLoss.binomial(counts.attempts[k], counts.successes[k]), layout, penalties[k], opts)

    ks = range(counts.n_splits)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, ks))
    return [one(k) for k in ks]


def _resolve_fit(args, cfg):
    """Inputs and penalties for ``fit``, either from flags/config or from a previous manifest."""
    inputs = {"graph": args.graph, "tree": args.tree, "observations": args.observations}
    if args.manifest:
        try:
            with open(_require(args.manifest, "manifest")) as fh:
                man = json.load(fh)
            if man.get("command") != "fit":
                raise InputError(f"{args.manifest} is not a fit manifest")
            cfg = _merge(DEFAULTS, man["config"])
            recorded = {k: v["path"] for k, v in man["inputs"].items()}
        except (OSError, KeyError, json.JSONDecodeError) as err:
            raise InputError(f"invalid manifest: {err}") from err
        for k, v in recorded.items():
            if inputs.get(k) is None:
                inputs[k] = v
            want = man["inputs"][k]["sha256"]
            if Path(inputs[k]).is_file() and sha256(inputs[k]) != want:
                raise InputError(f"{k} input {inputs[k]} differs from the manifest's content hash")
        return cfg, inputs, cfg["penalties"]
    if args.penalties:
        try:
            with open(_require(args.penalties, "penalties")) as fh:
                spec = json.load(fh)
        except json.JSONDecodeError as err:
            raise InputError(f"invalid penalties file: {err}") from err
        inputs["penalties"] = args.penalties
    elif args.lam is not None:
        spec = dict(zip(PenaltyConfig.names(), args.lam))
    else:
        spec = cfg["penalties"]
    return cfg, inputs, spec


def cmd_fit(args, cfg):
    cfg, inputs, spec = _resolve_fit(args, cfg)
    for k in ("graph", "tree", "observations"):
        _require(inputs.get(k), k)
    graph = _load_graph(inputs["graph"])
    tree = _load_tree(inputs["tree"])
    counts = _counts(tree, graph, _load_binned(inputs["observations"], graph))
    penalties = _penalties_for(spec, counts.n_splits)
    opts = _options(cfg)
    layout = TrailLayout(decompose_trails(graph), graph.n_vertices)
    try:
        fields = _fit_all(counts, layout, penalties, opts, int(cfg["threads"]))
    except FloatingPointError as err:
        raise NumericalError(str(err)) from err
    bad = [k for k, f in enumerate(fields) if not f.converged]
    if bad and not args.allow_nonconverged:
        raise NumericalError(f"ADMM did not converge for split(s) {bad}")
    model = DensityModel(tree, np.array([f.beta for f in fields]))
    out = Path(_out(args))
    with Staging(out) as tmp:
        graph.save(tmp / "graph.json")
        tree.save(tmp / "tree.json")
        (tmp / "fields").mkdir()
        for k, f in enumerate(fields):
            with open(tmp / "fields" / f"split_{k:02d}.csv", "w") as fh:
                fh.write("vertex,beta\n")
                fh.writelines(f"{v},{b!r}\n" for v, b in enumerate(f.beta.tolist()))
        with open(tmp / "penalties.json", "w") as fh:
            json.dump({str(k): p.as_dict() for k, p in enumerate(penalties)}, fh, indent=1)
        with open(tmp / "convergence.csv", "w") as fh:
            fh.write("split,converged,iterations,primal_res,dual_res,objective\n")
            fh.writelines(
                f"{k},{int(f.converged)},{f.iterations},{float(f.primal_residual)!r},{float(f.dual_residual)!r},{float(f.objective)!r}\n"
                for k, f in enumerate(fields)
            )
        model.write_csv(tmp / "density.csv")
        rec = cfg | {"penalties": {str(k): p.as_dict() for k, p in enumerate(penalties)}}
        write_manifest(tmp, "fit", rec, {k: v for k, v in inputs.items() if v is not None})
    logger.info("fitted %d split(s); %d not converged", len(fields), len(bad))


def load_model(path):
    d = Path(path)
    if not (d / "manifest.json").is_file():
        raise InputError(f"{d} is not a fitted model directory")
    graph = _load_graph(d / "graph.json")
    tree = _load_tree(d / "tree.json")
    beta = []
    for k in range(tree.n_splits):
        p = d / "fields" / f"split_{k:02d}.csv"
        if not p.is_file():
            raise InputError(f"missing field {p}")
        beta.append(np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)[:, 1])
    return graph, tree, np.array(beta)


def cmd_sample(args, cfg):
    from .mcmc import ARSError, Neighborhood, run_chain, write_samples, write_summary

    m = dict(cfg["mcmc"])
    for k in ("iters", "burn_in", "thin", "mode"):
        if getattr(args, k) is not None:
            m[k] = getattr(args, k)
    graph, tree, beta = load_model(args.model)
    binned = _load_binned(args.observations, graph)
    counts = _counts(tree, graph, binned)
    with open(Path(args.model) / "penalties.json") as fh:
        penalties = _penalties_for(json.load(fh), tree.n_splits)
    splits = range(tree.n_splits) if args.splits is None else args.splits
    if int(m["burn_in"]) >= int(m["iters"]):
        raise InputError("mcmc.burn_in must be smaller than mcmc.iters")
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(tree.n_splits)

    def one(k):
        nb = Neighborhood.from_graph(graph, penalties[k])
        return run_chain(counts.attempts[k], counts.successes[k], nb, None, beta[k],
                         iters=int(m["iters"]), burn_in=int(m["burn_in"]), seed=seeds[k],
                         thin=int(m["thin"]), perturbation=float(m["perturbation"]), mode=m["mode"])

    try:
        if int(cfg["threads"]) > 1:
            with ThreadPoolExecutor(int(cfg["threads"])) as pool:
                chains = dict(zip(splits, pool.map(one, splits)))
        else:
            chains = {k: one(k) for k in splits}
    except ARSError as err:
        raise NumericalError(str(err)) from err
    except ValueError as err:
        raise InputError(str(err)) from err
    out = Path(_out(args))
    with Staging(out) as tmp:
        for k, res in chains.items():
            write_summary(res, tmp / f"summary_split_{k:02d}.csv")
            write_samples(res, tmp / f"samples_split_{k:02d}.csv")
        write_manifest(tmp, "sample", cfg | {"mcmc": m},
                       {"observations": args.observations, "model": Path(args.model) / "manifest.json"})


def _query_params(args, cfg):
    q = dict(cfg["query"])
    for k in ("kind", "preset", "hour", "level"):
        if getattr(args, k, None) is not None:
            q[k] = getattr(args, k)
    if args.threshold:
        q["threshold"] = args.threshold
    if args.alpha:
        q["alpha"] = args.alpha
    kind = q["kind"]
    if kind not in QUERY_KINDS:
        raise InputError(f"unknown query kind {kind!r}")
    if q["preset"] is not None:
        if q["preset"] not in PRESETS:
            raise InputError(f"unknown preset {q['preset']!r}; known: {sorted(PRESETS)}")
        vals = PRESETS[q["preset"]]
    elif kind == "tail_probability":
        vals = q["threshold"]
    elif kind == "quantile":
        vals = q["alpha"]
    else:
        vals = [None]
    if vals is None:
        raise InputError(f"{kind} needs a threshold, alpha or preset")
    vals = [vals] if np.isscalar(vals) else list(vals)
    if kind == "quantile" and any(not 0 < float(a) < 1 for a in vals):
        raise InputError("alpha must lie in (0, 1)")
    return q, vals


def _param_kw(kind, val):
    if kind == "tail_probability":
        return {"threshold": float(val)}
    if kind == "quantile":
        return {"alpha": float(val)}
    return {}


def _bands(args, tree, kind, kw, level):
    import csv

    from .mcmc import density_bands

    d = Path(args.samples)
    per = []
    for k in range(tree.n_splits):
        p = d / f"samples_split_{k:02d}.csv"
        if not p.is_file():
            raise InputError(f"credible bands need samples for every split; missing {p}")
        with open(p) as fh:
            rows = list(csv.reader(fh))[1:]
        it = np.array([int(r[0]) for r in rows])
        v = np.array([int(r[1]) for r in rows])
        b = np.array([float(r[2]) for r in rows])
        n_v = v.max() + 1
        per.append(b.reshape(len(np.unique(it)), n_v))
    draws = min(len(x) for x in per)
    arr = np.stack([x[:draws] for x in per])
    return density_bands(tree, arr, lambda m: m.query(kind, **kw), level)


def cmd_query(args, cfg):
    q, vals = _query_params(args, cfg)
    graph, tree, beta = load_model(args.model)
    model = DensityModel(tree, beta)
    taz, hour = _vertex_keys(graph)
    if q["hour"] is not None and not 0 <= int(q["hour"]) < graph.times:
        raise InputError(f"hour {q['hour']} outside 0..{graph.times - 1}")
    keep = np.ones(graph.n_vertices, dtype=bool) if q["hour"] is None else hour == int(q["hour"])
    out = Path(_out(args))
    multi = len(vals) > 1
    results = []
    for val in vals:
        kw = _param_kw(q["kind"], val)
        value = model.query(q["kind"], **kw)
        bands = _bands(args, tree, q["kind"], kw, float(q["level"])) if args.samples else None
        results.append((val, value, bands))
    def write(path, value, bands):
        with open(path, "w") as fh:
            fh.write("taz,hour,value" + (",lo,median,hi" if bands is not None else "") + "\n")
            for v in np.flatnonzero(keep):
                extra = f",{float(bands[0][v])!r},{float(bands[1][v])!r},{float(bands[2][v])!r}" if bands is not None else ""
                fh.write(f"{taz[v]},{hour[v]},{float(value[v])!r}{extra}\n")

    if multi:
        with Staging(out) as tmp:
            for val, value, bands in results:
                write(tmp / f"{q['kind']}_{val}.csv", value, bands)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(f".{out.name}.tmp")
        write(tmp, results[0][1], results[0][2])
        os.replace(tmp, out)


def cmd_simulate(args, cfg):
    from .sim import SimTask, sample_task

    s = dict(cfg["simulate"])
    for k in ("n", "spatial", "temporal", "sigma", "missing", "samples"):
        if getattr(args, k, None) is not None:
            s[k] = getattr(args, k)
    if args.outliers:
        s["outliers"] = True
    try:
        task = SimTask(int(s["n"]), s["spatial"], s["temporal"], float(s["sigma"]), float(s["missing"]),
                       int(s["samples"]), bool(s["outliers"]), int(cfg["seed"]))
        data = sample_task(task)
    except ValueError as err:
        raise InputError(str(err)) from err
    n = task.n
    out = Path(_out(args))
    with Staging(out) as tmp:
        with open(tmp / "locations.csv", "w") as fh:
            fh.write("loc_id\n" + "".join(f"{i}\n" for i in range(n)))
        with open(tmp / "adjacency.csv", "w") as fh:
            fh.write("loc_a,loc_b\n" + "".join(f"{i},{i + 1}\n" for i in range(n - 1)))
        with open(tmp / "observations.csv", "w") as fh:
            fh.write("taz,hour,productivity\n")
            s_idx, t_idx = np.divmod(data.vertex, n)
            fh.writelines(f"{a},{b},{float(y)!r}\n" for a, b, y in zip(s_idx, t_idx, data.values))
        with open(tmp / "truth.csv", "w") as fh:
            fh.write("taz,hour,mean_1,mean_2,missing\n")
            for v in range(n * n):
                a, b = divmod(v, n)
                fh.write(f"{a},{b},{float(data.means[0, v])!r},{float(data.means[1, v])!r},{int(data.missing[v])}\n")
        np.savetxt(tmp / "eval.csv", data.eval_values, delimiter=",", fmt="%.17g")
        write_manifest(tmp, "simulate", cfg | {"simulate": s}, {})


def cmd_bench(args, cfg):
    from .sim import run_suite, summarize, write_replicates, write_summary

    b = dict(cfg["bench"])
    for k in ("n", "replicates", "n_lambda"):
        if getattr(args, k, None) is not None:
            b[k] = getattr(args, k)
    if args.full_scale:
        b.update(n=30, replicates=48, n_lambda=24)
    opts = AdmmOptions(tol=float(b["tol"]), max_iter=int(cfg["solver"]["max_iter"]))
    try:
        rows = run_suite(int(b["n"]), int(b["replicates"]), int(b["n_lambda"]), int(cfg["seed"]), opts,
                         threads=int(cfg["threads"]))
    except RuntimeError as err:
        raise NumericalError(str(err)) from err
    out = Path(_out(args))
    with Staging(out) as tmp:
        write_replicates(rows, tmp / "replicates.csv")
        write_summary(summarize(rows), tmp / "summary.csv")
        write_manifest(tmp, "bench", cfg | {"bench": b}, {})


def cmd_prox(args, cfg):
    from .tv import tv1_prox, tv2_prox

    y = np.array(args.values, dtype=float)
    z = (tv1_prox if args.p == 1 else tv2_prox)(y, args.lam)
    sys.stdout.write(",".join(repr(float(v)) for v in z) + "\n")


def _out(args):
    if not args.out:
        raise InputError("--out is required")
    return args.out


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gfen {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap for inner job pools")
    common.add_argument("--tol", type=float, help="ADMM tolerance")
    common.add_argument("--max-iter", type=int, help="ADMM iteration cap")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="trips to productivity observations")
    s.add_argument("--trips")
    s.add_argument("--locations", help="known zone ids (loc_id column)")
    s.add_argument("--timezone")
    s.add_argument("--start")
    s.add_argument("--end")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("graph", parents=[common], help="build the spatiotemporal graph")
    s.add_argument("--locations")
    s.add_argument("--adjacency")
    s.add_argument("--times", type=int)
    s.add_argument("--no-cyclic", action="store_true")
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("tree", parents=[common], help="build the dyadic tree")
    s.add_argument("--observations")
    s.add_argument("--depth", type=int)
    s.add_argument("--tail-cap", type=float)
    s.set_defaults(func=cmd_tree)

    s = sub.add_parser("tune", parents=[common], help="select penalties by cross-validation")
    for a in ("--observations", "--graph", "--tree"):
        s.add_argument(a)
    s.add_argument("--generations", type=int)
    s.add_argument("--candidates", type=int)
    s.add_argument("--folds", type=int)
    s.add_argument("--shared", action="store_true", help="one configuration for all splits")
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("fit", parents=[common], help="MAP fit of every split")
    for a in ("--observations", "--graph", "--tree", "--penalties", "--manifest"):
        s.add_argument(a)
    s.add_argument("--lambda", dest="lam", type=float, nargs=4, metavar=("S1", "S2", "T1", "T2"))
    s.add_argument("--allow-nonconverged", action="store_true")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("sample", parents=[common], help="Gibbs sampling around a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--observations")
    s.add_argument("--iters", type=int)
    s.add_argument("--burn-in", type=int)
    s.add_argument("--thin", type=int)
    s.add_argument("--mode", choices=("sweep", "async"))
    s.add_argument("--splits", type=int, nargs="+")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("query", parents=[common], help="per-vertex density summaries")
    s.add_argument("--model", required=True)
    s.add_argument("--kind", choices=QUERY_KINDS)
    s.add_argument("--threshold", type=float, nargs="+")
    s.add_argument("--alpha", type=float, nargs="+")
    s.add_argument("--preset")
    s.add_argument("--hour", type=int)
    s.add_argument("--samples", help="sample directory for credible bands")
    s.add_argument("--level", type=float)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("simulate", parents=[common], help="write a simulated task")
    s.add_argument("--n", type=int)
    s.add_argument("--spatial")
    s.add_argument("--temporal")
    s.add_argument("--sigma", type=float)
    s.add_argument("--missing", type=float)
    s.add_argument("--samples", type=int)
    s.add_argument("--outliers", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("bench", parents=[common], help="GFL / GFEN / GMRF comparison suite")
    s.add_argument("--n", type=int)
    s.add_argument("--replicates", type=int)
    s.add_argument("--n-lambda", type=int)
    s.add_argument("--full-scale", action="store_true", help="30x30 grid, 48 replicates, 24 draws")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("prox", parents=[common], help="debug: 1D prox of a vector to stdout")
    s.add_argument("values", type=float, nargs="+")
    s.add_argument("--lam", type=float, required=True)
    s.add_argument("-p", type=int, choices=(1, 2), default=1)
    s.set_defaults(func=cmd_prox)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_INPUT if err.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        for k in ("seed", "threads"):
            if getattr(args, k) is not None:
                cfg[k] = getattr(args, k)
        if args.tol is not None:
            cfg["solver"]["tol"] = args.tol
        if args.max_iter is not None:
            cfg["solver"]["max_iter"] = args.max_iter
        paths = config_paths(args.config)
        for k, v in paths.items():
            if hasattr(args, k) and getattr(args, k) is None:
                setattr(args, k, v)
        args.func(args, cfg)
    except InputError as err:
        logger.error("%s", err)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError) as err:
        logger.error("numerical failure: %s", err)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
