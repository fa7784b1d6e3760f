import numpy as np
import pytest

from motalab import nn_core as nn
from motalab.task_stream import make_stream
from motalab.training import TrainSettings

SMALL_CONFIG = """
[experiment]
seed = 11
replicates = [0, 1]
strategies = ["naive_sequential", "multi_task", "ewc", "mota"]

[stream]
n_tasks = 3
samples_per_class = 40

[train]
epochs = 3

[landscape]
strategies = ["naive_sequential"]
steps = 5
"""


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_stream():
    return make_stream("task_il", 3, 2, 40, seed=5)


@pytest.fixture
def tiny_spec():
    return nn.NetworkSpec(4, (5,), 6)


@pytest.fixture
def quick_settings():
    return TrainSettings(epochs=3, lr=0.1, batch_size=32)


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_CONFIG)
    return path


_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """``criterion(ok, detail)`` records the verdict of one acceptance criterion.

    The number comes from the test name (``test_criterion_07_...``). A test
    that dies before recording is reported as a failure.
    """
    number = int(request.node.name.split("_")[2])
    results = request.config.stash[_RESULTS]

    def record(ok: bool, detail: str) -> None:
        results[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    yield record
    results.setdefault(number, (False, "error before a verdict was reached"))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
