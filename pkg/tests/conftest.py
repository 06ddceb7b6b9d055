from __future__ import annotations

import numpy as np
import pytest
import torch

from qlossbench.experiment import NoiseParams, sample_dataset
from qlossbench.lattice import build_layout


@pytest.fixture(scope="session")
def layout3():
    return build_layout(3)


@pytest.fixture(scope="session")
def layout5():
    return build_layout(5)


@pytest.fixture(scope="session")
def noisy3(layout3):
    """Small noisy d=3 dataset shared by the cheaper tests."""
    return sample_dataset(layout3, NoiseParams.uniform(0.01), 4, "Z", 300, seed=17)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            lines.extend(v for k, v in rep.user_properties if k == "acceptance")
    if lines:
        terminalreporter.section("acceptance summary")
        for line in lines:
            terminalreporter.write_line(line)
