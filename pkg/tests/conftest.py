import numpy as np
import pytest

from scene_action_vad import synth


@pytest.fixture(scope="session")
def world0():
    return synth.generate_world(5, 8, 0.3, seed=1, noise_level=0.0)


@pytest.fixture(scope="session")
def small_ds(world0):
    return synth.sample_dataset(world0, 10, 8, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
