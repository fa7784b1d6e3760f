"""Turn a configuration into strategy runs, reports and landscape exports.

Layout of ``<out>/<run_id>/``::

    config.toml                       snapshot of the merged configuration
    cells/<strategy>/seed_<r>/        one directory per (strategy, replicate)
        report.json                   metrics, accuracy matrix, drift, timing
        snapshots/task_<t>_mode_<i>.params
        task_<t>/mode_<i>_epoch_<e>.params, task_<t>/selection.json   (mota)
        trajectory.npz                (strategies with landscape export)
    references/<name>/seed_<r>/       multi-task references for the trade-off
    landscape/<strategy>/seed_<r>/    loss grids and projected trajectories
    metrics.csv, report.json, figures/

A cell counts as done once its ``report.json`` exists; reruns skip done cells
unless forced.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import landscape as ls
from .. import nn_core as nn
from ..baselines import make_learner, run_sequential
from ..metrics import (CapacityError, DriftTrace, average_task_drift, metric_bundle,
                       tradeoff_report)
from ..mota_core import InvariantViolation
from ..task_stream import TaskStream, make_stream
from ..training import DataAccessViolation, Pool, TrainSettings, derive_rng, derive_seed, fit
from . import config as C

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["strategy", "seed", "avg_acc", "bwt", "fwt", "remembering", "forgetting", "drift_raw",
                  "drift_norm", "capacity_params"]
HARD_FAILURES = (InvariantViolation, DataAccessViolation, CapacityError)


# ---------------------------------------------------------------- building blocks

def build_stream(cfg: dict, replicate: int) -> TaskStream:
    st = cfg["stream"]
    seed = derive_seed(cfg["experiment"]["seed"], "stream", replicate)
    # generators need two tasks; a one-task experiment keeps the first
    stream = make_stream(st["kind"], max(st["n_tasks"], 2), st["classes_per_task"], st["samples_per_class"],
                         seed, st["input_dim"], st["cluster_std"], st["mean_range"], tuple(st["fractions"]))
    return stream.truncated(st["n_tasks"]) if st["n_tasks"] < 2 else stream


def initial_params(cfg: dict, replicate: int, spec: nn.NetworkSpec, which: str) -> nn.ParamSet:
    """Shared starting point of every strategy using ``spec`` in this replicate."""
    master = cfg["experiment"]["seed"]
    net = cfg["network"]
    params = nn.init_params(spec, derive_rng(master, "init", which, replicate), net["zero_readout"])
    if net["pretrain_epochs"] > 0:
        st = cfg["stream"]
        pretext = make_stream("instance_il", 2, spec.output_dim, st["samples_per_class"],
                              derive_seed(master, "pretext", replicate), st["input_dim"], st["cluster_std"],
                              st["mean_range"])
        settings = TrainSettings(net["pretrain_epochs"], cfg["train"]["lr"], cfg["train"]["batch_size"])
        params = fit(params, Pool.from_datasets([pretext.tasks[0].train]), settings,
                     lambda e: derive_seed(master, "pretext", replicate, e))
        if net["zero_readout"]:
            params.weights[-1][:] = 0.0
            params.biases[-1][:] = 0.0
    return params


def learner_kwargs(cfg: dict, replicate: int, stream: TaskStream) -> dict:
    big, small = C.network_specs(cfg, stream.n_classes)
    m, b, tr = cfg["mota"], cfg["baselines"], cfg["train"]
    return dict(big=big, small=small, settings=TrainSettings(tr["epochs"], tr["lr"], tr["batch_size"]),
                master_seed=cfg["experiment"]["seed"], replicate=replicate,
                init_big=initial_params(cfg, replicate, big, "single"),
                init_small=initial_params(cfg, replicate, small, "modes"),
                n_modes=m["n_modes"], beta_max=m["beta_max"], beta_min=m["beta_min"], lam=b["lam"],
                drift_weight=m["drift_weight"], enumeration_cap=m["enumeration_cap"],
                fisher_samples=m["fisher_samples"], selection_distance=m["selection_distance"],
                joint_fisher=m["joint_fisher"], zero_readout=cfg["network"]["zero_readout"])


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _json_float(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- one cell

def cell_dir(root: Path, strategy: str, replicate: int, reference: bool = False) -> Path:
    return root / ("references" if reference else "cells") / strategy / f"seed_{replicate}"


def _reference_strategy(name: str) -> tuple[str, str]:
    # reference name -> (strategy, architecture)
    return {"mtl_modes": ("multi_task", "small"), "mtl_single": ("multi_task", "big")}[name]


def run_cell(cfg: dict, root: str | Path, strategy: str, replicate: int, reference: bool = False) -> dict:
    """Train one strategy on one replicate's stream and write its directory."""
    root = Path(root)
    out = cell_dir(root, strategy, replicate, reference)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    t0 = time.perf_counter()
    stream = build_stream(cfg, replicate)
    kw = learner_kwargs(cfg, replicate, stream)
    name = strategy
    if reference:
        name, arch = _reference_strategy(strategy)
        if arch == "small":
            kw = dict(kw, big=kw["small"], init_big=kw["init_small"])
    record = (not reference and cfg["landscape"]["enabled"] and strategy in cfg["landscape"]["strategies"])
    keep = name == "mota" and cfg["mota"]["save_checkpoints"]
    learner = make_learner(name, keep_checkpoints=keep, record_trajectory=record, **kw)
    run = run_sequential(learner, stream, masked=cfg["metrics"]["masked"])
    elapsed = time.perf_counter() - t0

    snap_dir = out / "snapshots"
    snap_dir.mkdir()
    for t, modes in enumerate(run.snapshots, start=1):
        for i, p in enumerate(modes):
            nn.save_params(p, snap_dir / f"task_{t}_mode_{i}.params")
    if keep:
        for t, per_mode in learner.checkpoints.items():
            d = out / f"task_{t}"
            d.mkdir()
            for i, history in enumerate(per_mode):
                for e, p in history:
                    nn.save_params(p, d / f"mode_{i}_epoch_{e}.params")
            sel = learner.selections[t]
            write_json(d / "selection.json", {"epochs": sel.epochs, "objective": sel.objective,
                                              "drift_weight": sel.drift_weight, "exhaustive": sel.exhaustive})

    report = {"strategy": strategy, "seed": replicate, "status": "ok", "n_modes": len(run.snapshots[0]),
              "capacity_params": run.capacity, "accuracy": run.accuracy.to_json(),
              "metrics": {k: v for k, v in metric_bundle(run.accuracy, name).items()},
              "selections": run.selections}
    if run.n_tasks >= 2:
        trace = DriftTrace.from_snapshots(run.snapshots)
        report["drift_raw"] = average_task_drift(trace)
        report["drift_per_transition"] = trace.distances.tolist()
    else:
        report["drift_raw"] = float("nan")
    if record:
        tags = np.array([(t, e, m) for t, e, m, _ in run.trajectory], dtype=np.int64)
        vecs = np.stack([v for *_, v in run.trajectory])
        np.savez(out / "trajectory.npz", tags=tags, vectors=vecs)
        t1 = time.perf_counter()
        report["landscape"] = export_landscape(cfg, root, strategy, replicate, stream, run.snapshots[-1][0],
                                               tags, vecs)
        elapsed += time.perf_counter() - t1
    report["_timing_s"] = elapsed
    write_json(out / "report.json", report)
    return report


def export_landscape(cfg: dict, root: Path, strategy: str, replicate: int, stream: TaskStream,
                     like: nn.ParamSet, tags: np.ndarray, vectors: np.ndarray) -> dict:
    store = ls.TrajectorySnapshotStore(strategy)
    for (t, e, m), v in zip(tags, vectors):
        store.add(t, e, m, v)
    datasets = [task.split_named(cfg["landscape"]["split"]) for task in stream.tasks]
    views = ls.landscape_views(store, datasets, like, cfg["landscape"]["steps"])
    dest = root / "landscape" / strategy / f"seed_{replicate}"
    if dest.exists():
        shutil.rmtree(dest)
    ls.export_views(dest, views, like)
    out = {"views": [v.name or "." for v in views],
           "explained": {v.name or ".": v.basis.explained.tolist() for v in views}}
    if len(views[0].grids) >= 2:
        out["basin_shifted"] = {v.name or ".": ls.basin_shifted(v.grids) for v in views}
    return out


def _safe_cell(args):
    cfg, root, strategy, replicate, reference = args
    try:
        return run_cell(cfg, root, strategy, replicate, reference)
    except HARD_FAILURES:
        raise
    except Exception as exc:  # recorded, the remaining cells still run
        log.exception("cell %s/%s failed", strategy, replicate)
        out = cell_dir(Path(root), strategy, replicate, reference)
        out.mkdir(parents=True, exist_ok=True)
        report = {"strategy": strategy, "seed": replicate, "status": "failed", "error": repr(exc)}
        write_json(out / "failed.json", report)
        return report


# ---------------------------------------------------------------- experiment

def planned_cells(cfg: dict) -> list[tuple[str, int, bool]]:
    ex = cfg["experiment"]
    cells = [(s, r, False) for s in ex["strategies"] for r in ex["replicates"]]
    if wants_tradeoff(cfg):
        refs = ["mtl_modes"] + ([] if "multi_task" in ex["strategies"] else ["mtl_single"])
        cells += [(name, r, True) for name in refs for r in ex["replicates"]]
    return cells


def wants_tradeoff(cfg: dict) -> bool:
    s = cfg["experiment"]["strategies"]
    return (cfg["metrics"]["tradeoff"] and "mota" in s and cfg["metrics"]["tradeoff_single"] in s
            and cfg["stream"]["n_tasks"] >= 2)


def run_experiment(cfg: dict, out: str | Path | None = None, force: bool = False, jobs: int = 1) -> dict:
    out = Path(out if out is not None else cfg["experiment"]["out"])
    root = out / C.run_id(cfg)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.toml").write_text(C.to_toml(cfg))
    todo = []
    for strategy, replicate, reference in planned_cells(cfg):
        done = (cell_dir(root, strategy, replicate, reference) / "report.json").exists()
        if force or not done:
            todo.append((cfg, str(root), strategy, replicate, reference))
    log.info("run %s: %d cells to compute", root.name, len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_safe_cell, todo))
    else:
        for args in todo:
            _safe_cell(args)
    return aggregate(cfg, root)


def _load_snapshots(d: Path, activation: str = "relu") -> list[list[nn.ParamSet]]:
    out = []
    t = 1
    while (d / f"task_{t}_mode_0.params").exists():
        modes = []
        i = 0
        while (d / f"task_{t}_mode_{i}.params").exists():
            modes.append(nn.load_params(d / f"task_{t}_mode_{i}.params", activation))
            i += 1
        out.append(modes)
        t += 1
    return out


def _read_cell(root: Path, strategy: str, replicate: int, reference: bool = False) -> dict:
    d = cell_dir(root, strategy, replicate, reference)
    for name in ("report.json", "failed.json"):
        if (d / name).exists():
            return json.loads((d / name).read_text())
    return {"strategy": strategy, "seed": replicate, "status": "missing"}


def _num(v):
    return float("nan") if v is None else float(v)


def aggregate(cfg: dict, root: Path) -> dict:
    """Merge cell reports into ``metrics.csv``, ``report.json`` and figures."""
    ex = cfg["experiment"]
    cells = {s: {r: _read_cell(root, s, r) for r in ex["replicates"]} for s in ex["strategies"]}
    ref = cfg["metrics"]["drift_reference"]
    rows = []
    for s in ex["strategies"]:
        for r in ex["replicates"]:
            c = cells[s][r]
            if c["status"] != "ok":
                rows.append({"strategy": s, "seed": r, **{k: float("nan") for k in METRIC_COLUMNS[2:]}})
                continue
            raw = _num(c.get("drift_raw"))
            base = cells.get(ref, {}).get(r, {})
            base_raw = _num(base.get("drift_raw")) if base.get("status") == "ok" else float("nan")
            if math.isnan(base_raw) or math.isnan(raw):
                norm = float("nan")
            elif base_raw == 0:
                norm = 0.0 if raw == 0 else float("inf")
            else:
                norm = raw / base_raw
            c["drift_norm"] = norm
            m = c["metrics"]
            rows.append({"strategy": s, "seed": r, "avg_acc": _num(m["avg_acc"]), "bwt": _num(m["bwt"]),
                         "fwt": _num(m["fwt"]), "remembering": _num(m["remembering"]),
                         "forgetting": _num(m["forgetting"]), "drift_raw": raw, "drift_norm": norm,
                         "capacity_params": c["capacity_params"]})
    write_metrics_csv(root / "metrics.csv", rows)

    tradeoff = {}
    if wants_tradeoff(cfg):
        single = cfg["metrics"]["tradeoff_single"]
        for r in ex["replicates"]:
            tradeoff[str(r)] = _tradeoff_cell(cfg, root, single, r, cells)

    report = {
        "header": {"deviations": C.DEVIATIONS,
                   "note": "desk-scale reproduction; directions of effect, not absolute numbers"},
        "run_id": root.name,
        "config_hash": C.config_hash(cfg),
        "config": cfg,
        "cells": {s: {str(r): {k: v for k, v in c.items() if not k.startswith("_")}
                      for r, c in per.items()} for s, per in cells.items()},
        "aggregate": _aggregate_table(rows),
        "votes": _votes(rows, ex["strategies"]),
        "tradeoff": tradeoff,
        "timings": {s: {str(r): c.get("_timing_s") for r, c in per.items()} for s, per in cells.items()},
    }
    write_json(root / "report.json", report)
    try:
        from .figures import render
        render(root, rows, ex["strategies"])
    except ImportError:  # pragma: no cover - matplotlib missing
        log.warning("matplotlib unavailable; figures skipped")
    return report


def _tradeoff_cell(cfg, root, single, r, cells) -> dict:
    if cells["mota"][r]["status"] != "ok" or cells[single][r]["status"] != "ok":
        return {"status": "skipped"}
    ref_single = (cell_dir(root, "multi_task", r) if "multi_task" in cfg["experiment"]["strategies"]
                  else cell_dir(root, "mtl_single", r, reference=True))
    try:
        rep = tradeoff_report(_load_snapshots(cell_dir(root, "mota", r) / "snapshots"),
                              _load_snapshots(cell_dir(root, single, r) / "snapshots"),
                              _load_snapshots(cell_dir(root, "mtl_modes", r, True) / "snapshots")[-1][0],
                              _load_snapshots(ref_single / "snapshots")[-1][0],
                              {int(t): e for t, e in cells["mota"][r]["selections"].items()},
                              cfg["metrics"]["capacity_tolerance"])
    except FileNotFoundError:
        return {"status": "missing reference"}
    return {"status": "ok", "single_mode": single, **rep.to_json()}


def write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row[k] if k in ("strategy", "seed", "capacity_params") else repr(float(row[k]))
                        for k in METRIC_COLUMNS])


def _aggregate_table(rows):
    out = {}
    for s in dict.fromkeys(r["strategy"] for r in rows):
        sub = [r for r in rows if r["strategy"] == s]
        out[s] = {}
        for k in METRIC_COLUMNS[2:-1]:
            vals = np.array([r[k] for r in sub], dtype=float)
            vals = vals[np.isfinite(vals)]
            out[s][k] = {"mean": float(vals.mean()) if vals.size else None,
                         "std": float(vals.std()) if vals.size else None, "n": int(vals.size)}
    return out


def _votes(rows, strategies):
    """``votes[metric][a][b]``: replicates where ``a`` scored strictly above ``b``."""
    by = {(r["strategy"], r["seed"]): r for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    out = {}
    for k in ("avg_acc", "forgetting", "drift_norm"):
        out[k] = {a: {b: sum(1 for sd in seeds if by[(a, sd)][k] > by[(b, sd)][k])
                      for b in strategies if b != a} for a in strategies}
    return out


def rebuild_landscape(root: Path, strategy: str, replicates=None) -> list[Path]:
    """Recompute landscape exports of a finished run from saved trajectories."""
    cfg = C.load(root / "config.toml")
    replicates = cfg["experiment"]["replicates"] if replicates is None else replicates
    done = []
    for r in replicates:
        d = cell_dir(root, strategy, r)
        traj = d / "trajectory.npz"
        if not traj.exists():
            raise FileNotFoundError(f"{traj} missing; enable the landscape for {strategy} and rerun")
        data = np.load(traj)
        stream = build_stream(cfg, r)
        like = _load_snapshots(d / "snapshots", cfg["network"]["activation"])[-1][0]
        export_landscape(cfg, root, strategy, r, stream, like, data["tags"], data["vectors"])
        done.append(root / "landscape" / strategy / f"seed_{r}")
    return done
