import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from srlab import tensor as T  # noqa: E402
from srlab.data import BEHAVIOR_PARAMS, split, synth_freq_dataset  # noqa: E402
from srlab.training import behavior_config, behavior_spec, train  # noqa: E402

BEHAVIOR_SEEDS = (0, 1, 2)
BEHAVIOR_KINDS = ("natural", "at", "sar", "sarwa")
BEHAVIOR_TRAIN_N = 800
BEHAVIOR_TEST_N = 400


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def behavior_data(seed):
    full = synth_freq_dataset(BEHAVIOR_TRAIN_N, seed=seed, params=BEHAVIOR_PARAMS)
    tr, va = split(full, seed=seed)
    test = synth_freq_dataset(BEHAVIOR_TEST_N, seed=100 + seed, params=BEHAVIOR_PARAMS)
    return tr, va, test


class _Zoo:
    """Lazily trained desk models, shared by every test in the session."""

    def __init__(self):
        self._results = {}
        self._data = {}

    def data(self, seed):
        if seed not in self._data:
            self._data[seed] = behavior_data(seed)
        return self._data[seed]

    def result(self, kind, seed):
        key = (kind, seed)
        if key not in self._results:
            tr, va, _ = self.data(seed)
            self._results[key] = train(behavior_config(kind, seed), tr, va, spec=behavior_spec())
        return self._results[key]

    def net(self, kind, seed):
        # final-epoch weights: best-by-validation picks are not what is compared
        return self.result(kind, seed).net

    def test_set(self, seed):
        return self.data(seed)[2]


@pytest.fixture(scope="session")
def zoo():
    return _Zoo()


def pytest_terminal_summary(terminalreporter):
    import gate

    if not gate.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in gate.lines():
        terminalreporter.write_line(line)
