import functools

import numpy as np
import pytest
import torch

from urm import dataset as ds
from urm.training import TrainConfig

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@functools.lru_cache(maxsize=None)
def small_bench(seed=0, n_train=8, n_val=4, n_test=6):
    return ds.make_benchmark(seed=seed, n_train=n_train, n_val=n_val, n_test=n_test)


@pytest.fixture
def bench():
    return small_bench()


@pytest.fixture
def toy_cfg():
    return TrainConfig(preset="toy", epochs=1, lr=1e-3, augment=("hflip", "color_jitter"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
