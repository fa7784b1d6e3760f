import csv
import json
from importlib import resources

import numpy as np
import pytest

from motalab import nn_core as nn
from motalab.harness import cli
from motalab.harness import config as C
from motalab.harness import runner
from motalab.training import Learner, TrainSettings

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def default_toml():
    return resources.files("motalab.harness").joinpath("default.toml")


def test_default_config_matches_defaults():
    cfg = C.load()
    assert cfg == C.DEFAULTS
    assert cfg["experiment"]["seed"] == 3407
    assert cfg["baselines"]["lam"] == 1000.0 and cfg["mota"]["beta_max"] == 100.0


def test_to_toml_round_trip():
    cfg = C.load()
    assert C.merge(tomllib.loads(C.to_toml(cfg))) == cfg


@pytest.mark.parametrize("raw, field", [
    ({"bogus": {}}, "bogus"),
    ({"train": {"epoch": 3}}, "train.epoch"),
    ({"train": {"lr": "fast"}}, "train.lr"),
    ({"experiment": {"strategies": ["mota", "sgd"]}}, "experiment.strategies"),
    ({"stream": {"kind": "video"}}, "stream.kind"),
    ({"landscape": {"steps": 40}}, "landscape.steps"),
    ({"network": {"mode_hidden": [40, 40]}}, "network.mode_hidden"),
])
def test_config_errors_name_the_field(raw, field):
    with pytest.raises(C.ConfigError, match=field.replace(".", r"\.")):
        C.merge(raw)


def test_config_hash_ignores_key_order_and_output_dir():
    a = C.merge({"train": {"epochs": 5, "lr": 0.2}, "experiment": {"out": "x"}})
    b = C.merge({"experiment": {"out": "y"}, "train": {"lr": 0.2, "epochs": 5}})
    assert C.config_hash(a) == C.config_hash(b)
    assert C.config_hash(a) != C.config_hash(C.load())
    assert C.run_id(a).endswith("-3407") and len(C.run_id(a)) == 17


def test_small_experiment_end_to_end(small_config, tmp_path):
    cfg = C.load(small_config)
    report = runner.run_experiment(cfg, tmp_path)
    root = tmp_path / report["run_id"]
    with open(root / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 2
    assert {(r["strategy"], r["seed"]) for r in rows} == {(s, str(r)) for s in cfg["experiment"]["strategies"]
                                                          for r in (0, 1)}
    naive = [r for r in rows if r["strategy"] == "naive_sequential"]
    assert all(float(r["drift_norm"]) == 1.0 for r in naive)
    assert report["tradeoff"]["0"]["status"] == "ok"
    assert (root / "figures" / "accuracy.png").exists() and (root / "figures" / "drift.png").exists()
    assert (root / "landscape" / "naive_sequential" / "seed_1" / "task_3.csv").exists()
    assert (root / "cells" / "mota" / "seed_0" / "task_2" / "selection.json").exists()
    assert report["header"]["deviations"]

    # rerunning skips finished cells and reproduces the aggregate
    before = (root / "metrics.csv").read_bytes()
    mtime = (root / "cells" / "ewc" / "seed_0" / "report.json").stat().st_mtime_ns
    again = runner.run_experiment(cfg, tmp_path)
    assert (root / "cells" / "ewc" / "seed_0" / "report.json").stat().st_mtime_ns == mtime
    assert (root / "metrics.csv").read_bytes() == before
    strip = lambda r: {k: v for k, v in r.items() if k != "timings"}  # noqa: E731
    assert json.loads(json.dumps(strip(again))) == json.loads(json.dumps(strip(report)))

    # forcing recomputes with identical results
    runner.run_experiment(cfg, tmp_path, force=True)
    assert (root / "metrics.csv").read_bytes() == before


def test_one_task_multi_task_cell(tmp_path):
    cfg = C.merge({"experiment": {"replicates": [0], "strategies": ["multi_task"]},
                   "stream": {"n_tasks": 1, "samples_per_class": 40}, "train": {"epochs": 2},
                   "landscape": {"enabled": False}})
    report = runner.run_experiment(cfg, tmp_path)
    cell = report["cells"]["multi_task"]["0"]
    assert list(report["cells"]) == ["multi_task"] and list(report["cells"]["multi_task"]) == ["0"]
    assert cell["metrics"]["avg_acc"] == cell["accuracy"]["acc"][0][0]


def test_cli_validate_config(tmp_path, capsys):
    assert cli.main(["validate-config", str(default_toml())]) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment]\nstrategies = ['mota', 'sgd']\n")
    assert cli.main(["validate-config", str(bad)]) == 1
    assert "experiment.strategies" in capsys.readouterr().err
    assert cli.main(["validate-config", str(tmp_path / "missing.toml")]) == 1


def test_cli_unknown_flag_is_config_error(capsys):
    assert cli.main(["run", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_cli_gen_stream_is_byte_identical(tmp_path):
    args = ["gen-stream", "--kind", "task_il", "--tasks", "5", "--seed", "3407", "--samples-per-class", "30"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 16
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert cli.main(["gen-stream", "--tasks", "1", "--out", str(tmp_path / "c")]) == 1


def test_cli_run_compare_landscape(small_config, tmp_path, capsys):
    out = tmp_path / "runs"
    assert cli.main(["run", str(small_config), "--out", str(out), "--jobs", "2"]) == 0
    run_id = C.run_id(C.load(small_config))
    capsys.readouterr()
    merged = tmp_path / "merged.csv"
    assert cli.main(["compare", run_id, "--out", str(out), "--csv", str(merged)]) == 0
    assert "capacity" in capsys.readouterr().err
    rows = merged.read_text().splitlines()
    assert rows[0].startswith("run_id,strategy") and len(rows) - 1 == 4 * 2
    target = out / run_id / "landscape" / "naive_sequential" / "seed_0" / "task_1.csv"
    before = target.read_bytes()
    target.unlink()
    assert cli.main(["landscape", run_id, "--strategy", "naive_sequential", "--replicate", "0",
                     "--out", str(out)]) == 0
    assert target.read_bytes() == before
    assert cli.main(["compare", "nope", "--out", str(out)]) == 2
    assert cli.main(["run", str(small_config), "--out", str(out), "--seed", "12"]) == 0
    assert (out / C.run_id(C.load(small_config, {"experiment.seed": 12}))).is_dir()


def test_cli_parallel_run_matches_serial(small_config, tmp_path):
    assert cli.main(["run", str(small_config), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["run", str(small_config), "--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    rid = C.run_id(C.load(small_config))
    assert (tmp_path / "s" / rid / "metrics.csv").read_bytes() == (tmp_path / "p" / rid / "metrics.csv").read_bytes()


class Peeker(Learner):
    name = "naive_sequential"

    def __init__(self, spec, **_):
        super().__init__(spec, TrainSettings(1), 0, 0)
        self.modes = [nn.zero_params(spec)]

    def learn(self, feed):
        if feed.t >= 2:
            feed.task(feed.t - 1)


def test_cli_data_access_violation_exits_3(small_config, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(runner, "make_learner", lambda name, big, **kw: Peeker(big))
    assert cli.main(["run", str(small_config), "--out", str(tmp_path)]) == 3
    assert "task 1 requested" in capsys.readouterr().err
