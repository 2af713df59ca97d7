import re
import time

import pytest

from stableflow.data import Dataset
from stableflow.fixtures import make_demo, multitask_demos
from stableflow.training import TrainConfig, train

# Fixture hyperparameters are pinned here; every suite trains the same four
# policies once per session. Wall-clock training time is recorded so the
# acceptance runtime budgets stay honest under fixture reuse.
LINE_CONFIG = TrainConfig(n_systems=3, epochs=500, learning_rate=1e-3, seed=0)
SINE_CONFIG = TrainConfig(n_systems=5, epochs=800, learning_rate=1e-3, seed=0)
ONEHOT_CONFIG = TrainConfig(n_systems=5, epochs=1000, learning_rate=1e-3, seed=0)
IMAGE_CONFIG = TrainConfig(n_systems=5, epochs=1000, learning_rate=1e-3, seed=0,
                           net="conv")


@pytest.fixture(scope="session")
def train_timings():
    return {}


def _timed_train(dataset, config, timings, key):
    start = time.monotonic()
    ckpt = train(dataset, config)
    timings[key] = time.monotonic() - start
    return ckpt


@pytest.fixture(scope="session")
def line_demo():
    return make_demo("line")


@pytest.fixture(scope="session")
def sine_demo():
    return make_demo("sine")


@pytest.fixture(scope="session")
def line_dataset(line_demo):
    return Dataset.from_trajectories([line_demo])


@pytest.fixture(scope="session")
def sine_dataset(sine_demo):
    return Dataset.from_trajectories([sine_demo])


@pytest.fixture(scope="session")
def onehot_dataset():
    return Dataset.from_trajectories(multitask_demos("onehot"))


@pytest.fixture(scope="session")
def image_dataset():
    return Dataset.from_trajectories(multitask_demos("image"))


@pytest.fixture(scope="session")
def trained_line(line_dataset, train_timings):
    return _timed_train(line_dataset, LINE_CONFIG, train_timings, "line")


@pytest.fixture(scope="session")
def trained_sine(sine_dataset, train_timings):
    return _timed_train(sine_dataset, SINE_CONFIG, train_timings, "sine")


@pytest.fixture(scope="session")
def trained_onehot(onehot_dataset, train_timings):
    return _timed_train(onehot_dataset, ONEHOT_CONFIG, train_timings, "onehot")


@pytest.fixture(scope="session")
def trained_image(image_dataset, train_timings):
    return _timed_train(image_dataset, IMAGE_CONFIG, train_timings, "image")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    rows = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance" not in rep.nodeid or rep.when != "call":
                continue
            m = re.search(r"test_(c\d+)_(\w+)", rep.nodeid)
            if not m:
                continue
            rows.append((m.group(1).upper(), m.group(2).replace("_", " "),
                         label, rep.duration))
    if not rows:
        return
    rows.sort(key=lambda r: int(r[0][1:]))
    terminalreporter.write_sep("=", "acceptance criteria")
    for crit, desc, label, duration in rows:
        terminalreporter.write_line(
            f"{crit:<4} {desc:<52} {label}  ({duration:.1f}s)")
