import numpy as np
import pytest

from shrl.geometry import RoadParams, straight_road


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def three_lanes():
    return straight_road(3, RoadParams(road_length=300.0))


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Records one PASS/FAIL line for an acceptance criterion and asserts it."""
    def record(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line, flush=True)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
