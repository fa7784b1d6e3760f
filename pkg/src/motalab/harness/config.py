"""Experiment configuration: a TOML file with one table per module.

Every key has a default (the shipped ``default.toml`` spells them out). Unknown
tables or keys, wrong types and unfair capacity splits are rejected with a
``ConfigError`` naming the offending field.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .. import nn_core as nn
from ..baselines import STRATEGIES, check_capacity_fairness
from ..metrics import CapacityError
from ..task_stream import SHIFT_KINDS

DEFAULTS = {
    "experiment": {"seed": 3407, "replicates": list(range(10)), "strategies": list(STRATEGIES), "out": "runs"},
    "stream": {"kind": "task_il", "n_tasks": 5, "classes_per_task": 2, "samples_per_class": 200,
               "input_dim": 16, "cluster_std": 1.0, "mean_range": 1.0, "fractions": [0.7, 0.1, 0.2]},
    "network": {"hidden": [32, 32], "mode_hidden": [19, 19], "activation": "relu", "zero_readout": True,
                "pretrain_epochs": 0},
    "train": {"epochs": 40, "batch_size": 64, "lr": 0.1},
    "mota": {"n_modes": 2, "beta_max": 100.0, "beta_min": 1000.0, "drift_weight": 0.1,
             "enumeration_cap": 4096, "fisher_samples": 200, "selection_distance": "fisher",
             "joint_fisher": True, "save_checkpoints": True},
    "baselines": {"lam": 1000.0, "ensemble_modes": 2},
    "metrics": {"masked": True, "drift_reference": "naive_sequential", "tradeoff": True,
                "tradeoff_single": "ewc", "capacity_tolerance": 0.10},
    "landscape": {"enabled": True, "strategies": ["naive_sequential", "mota"], "steps": 41, "split": "test"},
}

# keys that never change results
NOT_HASHED = {("experiment", "out")}

MULTI_MODE = ("mota", "ensemble_distmax", "ensemble_seeds")

# Desk-scale departures from the reference training recipe, printed in every report.
DEVIATIONS = [
    "epochs 200 -> 40, batch 512 -> 64",
    "AdamW with a 1cycle schedule -> constant-rate gradient descent",
    "ResNet50 on image benchmarks -> MLP on synthetic Gaussian task streams",
    "EWC penalty applied as an exact proximal step (stable for any lambda)",
    "diversity step during initialisation keeps per-layer norms (retraction)",
    "multi-mode Fisher taken on the averaged prediction",
    "readout layer initialised at zero",
]


class ConfigError(ValueError):
    pass


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def merge(raw: dict) -> dict:
    """Defaults overlaid with ``raw``; rejects unknown tables/keys and bad types."""
    cfg = copy.deepcopy(DEFAULTS)
    for section, table in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in table.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            if not _type_ok(value, DEFAULTS[section][key]):
                raise ConfigError(f"{section}.{key} has the wrong type: {value!r}")
            if isinstance(DEFAULTS[section][key], float):
                value = float(value)
            cfg[section][key] = value
    validate(cfg)
    return cfg


def _positive(cfg, section, key, allow_zero=False):
    v = cfg[section][key]
    if v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(f"{section}.{key} must be {'>= 0' if allow_zero else '> 0'}, got {v}")


def network_specs(cfg: dict, n_classes: int) -> tuple[nn.NetworkSpec, nn.NetworkSpec]:
    net, d = cfg["network"], cfg["stream"]["input_dim"]
    big = nn.NetworkSpec(d, tuple(net["hidden"]), n_classes, net["activation"])
    small = nn.NetworkSpec(d, tuple(net["mode_hidden"]), n_classes, net["activation"])
    return big, small


def n_classes(cfg: dict) -> int:
    s = cfg["stream"]
    return s["classes_per_task"] * s["n_tasks"] if s["kind"] == "task_il" else s["classes_per_task"]


def validate(cfg: dict) -> None:
    ex, st, net = cfg["experiment"], cfg["stream"], cfg["network"]
    for s in ex["strategies"]:
        if s not in STRATEGIES:
            raise ConfigError(f"experiment.strategies: unknown strategy {s!r}")
    if not ex["strategies"]:
        raise ConfigError("experiment.strategies is empty")
    if len(set(ex["strategies"])) != len(ex["strategies"]):
        raise ConfigError("experiment.strategies has duplicates")
    reps = ex["replicates"]
    if not reps or any(not isinstance(r, int) or isinstance(r, bool) or r < 0 for r in reps):
        raise ConfigError("experiment.replicates must be a non-empty list of non-negative integers")
    if len(set(reps)) != len(reps):
        raise ConfigError("experiment.replicates has duplicates")
    if st["kind"] not in SHIFT_KINDS:
        raise ConfigError(f"stream.kind must be one of {SHIFT_KINDS}, got {st['kind']!r}")
    if st["n_tasks"] < 1:
        raise ConfigError("stream.n_tasks must be >= 1")
    if st["classes_per_task"] < 2:
        raise ConfigError("stream.classes_per_task must be >= 2")
    if st["samples_per_class"] < 30:
        raise ConfigError("stream.samples_per_class must be >= 30")
    for key in ("input_dim", "cluster_std", "mean_range"):
        _positive(cfg, "stream", key)
    fr = st["fractions"]
    if len(fr) != 3 or any(not isinstance(f, (int, float)) or f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
        raise ConfigError("stream.fractions must be three non-negative numbers summing to 1")
    for key in ("hidden", "mode_hidden"):
        if not net[key] or any(not isinstance(h, int) or h < 1 for h in net[key]):
            raise ConfigError(f"network.{key} must list positive integer widths")
    if net["activation"] not in ("relu", "tanh"):
        raise ConfigError(f"network.activation must be relu or tanh, got {net['activation']!r}")
    _positive(cfg, "network", "pretrain_epochs", allow_zero=True)
    _positive(cfg, "train", "epochs", allow_zero=True)
    _positive(cfg, "train", "batch_size")
    _positive(cfg, "train", "lr")
    m = cfg["mota"]
    if m["n_modes"] < 1:
        raise ConfigError("mota.n_modes must be >= 1")
    for key in ("beta_max", "beta_min", "drift_weight"):
        _positive(cfg, "mota", key, allow_zero=True)
    _positive(cfg, "mota", "enumeration_cap")
    _positive(cfg, "mota", "fisher_samples")
    if m["selection_distance"] not in ("fisher", "euclidean"):
        raise ConfigError("mota.selection_distance must be fisher or euclidean")
    _positive(cfg, "baselines", "lam", allow_zero=True)
    if cfg["baselines"]["ensemble_modes"] < 1:
        raise ConfigError("baselines.ensemble_modes must be >= 1")
    met = cfg["metrics"]
    if met["drift_reference"] not in STRATEGIES:
        raise ConfigError(f"metrics.drift_reference: unknown strategy {met['drift_reference']!r}")
    if met["tradeoff_single"] not in ("naive_sequential", "ewc"):
        raise ConfigError("metrics.tradeoff_single must be naive_sequential or ewc")
    if not 0 <= met["capacity_tolerance"] < 1:
        raise ConfigError("metrics.capacity_tolerance must lie in [0, 1)")
    ls = cfg["landscape"]
    for s in ls["strategies"]:
        if s not in STRATEGIES:
            raise ConfigError(f"landscape.strategies: unknown strategy {s!r}")
    if ls["steps"] < 1 or ls["steps"] % 2 == 0:
        raise ConfigError("landscape.steps must be a positive odd integer")
    if ls["split"] not in ("train", "val", "test"):
        raise ConfigError("landscape.split must be train, val or test")
    # equal total capacity for every multi-mode strategy
    big, small = network_specs(cfg, n_classes(cfg))
    modes = {"mota": m["n_modes"], "ensemble_distmax": cfg["baselines"]["ensemble_modes"],
             "ensemble_seeds": cfg["baselines"]["ensemble_modes"]}
    for s in ex["strategies"]:
        if s in MULTI_MODE:
            try:
                check_capacity_fairness(modes[s] * small.n_params(), big.n_params(),
                                        met["capacity_tolerance"])
            except CapacityError as exc:
                raise ConfigError(f"network.mode_hidden ({s}): {exc}") from exc


def load(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Read a TOML file (the shipped default when ``path`` is None)."""
    if path is None:
        text = resources.files("motalab.harness").joinpath("default.toml").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        raw.setdefault(section, {})[key] = value
    return merge(raw)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form; key order never matters."""
    hashed = {s: {k: v for k, v in t.items() if (s, k) not in NOT_HASHED} for s, t in cfg.items()}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def run_id(cfg: dict) -> str:
    return f"{config_hash(cfg)[:12]}-{cfg['experiment']['seed']}"


def to_toml(cfg: dict) -> str:
    """Snapshot writer for the flat two-level layout used here."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return str(v)

    lines = []
    for section in DEFAULTS:
        lines.append(f"[{section}]")
        lines += [f"{k} = {fmt(v)}" for k, v in cfg[section].items()]
        lines.append("")
    return "\n".join(lines)
