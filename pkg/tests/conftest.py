import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from objboot.config import AugConfig, SceneConfig

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def scene_cfg():
    return SceneConfig()


@pytest.fixture
def aug_cfg():
    return AugConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one summary line per acceptance criterion and fail the test if it did not hold."""
    def record(number, ok: bool, detail: str):
        line = f"criterion {number:>3}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
