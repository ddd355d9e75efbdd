import sys

import pytest

from safeshed.grid_env import FaultTask, load_grid_config
from safeshed.safety import RewardConfig

TRAIN_TASKS = tuple(FaultTask(b, d) for b in (4, 15, 21) for d in (0.0, 0.15, 0.28))
HELDOUT = FaultTask(7, 0.15)


@pytest.fixture(scope="session")
def grid():
    return load_grid_config()


@pytest.fixture(scope="session")
def reward_cfg():
    return RewardConfig()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        ok, detail = mod.RESULTS.get(n, (False, "not run"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
