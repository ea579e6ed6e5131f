import numpy as np
import pytest

from ttalab.harness.training import train_source_model
from ttalab.streamgen import make_dataset


@pytest.fixture(scope="session")
def dataset():
    return make_dataset()


@pytest.fixture(scope="session")
def source_model(dataset):
    return train_source_model(dataset, rng=np.random.default_rng(0))


@pytest.fixture
def model(source_model):
    """Fresh copy per test so mutations never leak."""
    return source_model.copy()


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def record():
    """Log one pass/fail line for an acceptance criterion; the lines are repeated in the run summary."""
    def _record(number, name, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
