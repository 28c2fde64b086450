import time
from dataclasses import dataclass

import numpy as np
import pytest

from lhuc.model import NetworkParams
from lhuc.synth import ClusterTaskSpec, gen_multicluster
from lhuc.trainer import SatConfig, TrainConfig, train_sat, train_si

# network init and SGD shuffling seed shared by the seeded classification runs
FIXTURE_SEED = 1
TOPOLOGY_HIDDEN = [64, 64]


@dataclass
class Trained:
    params: object
    bank: object
    seconds: float


@pytest.fixture(scope="session")
def task():
    spec = ClusterTaskSpec()
    train, test = gen_multicluster(spec)
    return spec, train, test


def _p0(train):
    return NetworkParams.initialize([train.dim, *TOPOLOGY_HIDDEN, train.n_classes], seed=FIXTURE_SEED)


@pytest.fixture(scope="session")
def si_model(task):
    _, train, _ = task
    t0 = time.perf_counter()
    params, _ = train_si(train, _p0(train), TrainConfig(seed=FIXTURE_SEED))
    return Trained(params, None, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def sat_model(task):
    _, train, _ = task
    t0 = time.perf_counter()
    params, bank, _ = train_sat(train, _p0(train), TrainConfig(seed=FIXTURE_SEED),
                                SatConfig(gamma=0.5, seed=FIXTURE_SEED), kind="exp")
    return Trained(params, bank, time.perf_counter() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict[int, str] = {}


def record_criterion(config, number: int, line: str):
    _CRITERIA[number] = line
    reporter = config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        reporter.write_line("")
        reporter.write_line(line)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
