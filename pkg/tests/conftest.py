import sys

import numpy as np
import pytest

from unitary_forge.agent import TrainConfig, dvnu_task, train_dvnu
from unitary_forge.env import EnvConfig


@pytest.fixture(scope="session")
def trained_1q():
    """A 1-qubit value net trained to depth 8, shared by the search and CLI tests."""
    cfg = TrainConfig(iterations=40, depth_cap=8)
    env = EnvConfig()
    net, _ = train_dvnu(cfg, env, np.random.default_rng(11), hidden=(256, 128))
    return net, dvnu_task(cfg, env)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
