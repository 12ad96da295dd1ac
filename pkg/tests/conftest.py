import numpy as np
import pytest

from attrdebias.gradcheck import small_model
from attrdebias.world import AttributeSpec, WorldSpec, make_world


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    """D = 4, two cross-attention blocks, ~1k parameters."""
    return small_model(seed=3)


@pytest.fixture(scope="session")
def gender_world():
    spec = WorldSpec(2, [AttributeSpec("gender", ["male", "female"])], {"worker": {"gender": [0.8, 0.2]}})
    return make_world(spec, seed=0)


@pytest.fixture(scope="session")
def two_attr_world():
    spec = WorldSpec(
        4,
        [AttributeSpec("gender", ["male", "female"]), AttributeSpec("race", ["a", "b", "c", "d"])],
        {"worker": {"gender": [0.8, 0.2], "race": [0.7, 0.1, 0.1, 0.1]}},
    )
    return make_world(spec, seed=0)


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[n] = line
        print(line)
        assert ok, line
    return record
