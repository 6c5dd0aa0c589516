import numpy as np
import pytest

from robustpref.env import random_env, tabular_env

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE = {}


def record(criterion: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[criterion] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[k]
        mark = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{mark}] {k:2d}. {title}: {detail}")


@pytest.fixture
def small_env():
    return random_env(3, 5, 4, seed=11, reward_scale=1.5, sft_scale=0.5)


@pytest.fixture
def ladder_env():
    """One prompt, eight tabular actions with evenly spaced rewards."""
    return tabular_env([np.linspace(-1.5, 1.5, 8)])


def zero_sum(gen, d, scale=1.0):
    v = gen.normal(scale=scale, size=d)
    return v - v.mean()
