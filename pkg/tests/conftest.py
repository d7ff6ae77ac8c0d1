import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from smokerecon.grid import GridDims, StaggeredField

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_field(dims: GridDims, rng) -> StaggeredField:
    return StaggeredField.from_flat(dims, rng.standard_normal(dims.n_faces))


def blob(shape, center, radius):
    idx = np.indices(shape).astype(float)
    r2 = sum((idx[a] - center[a]) ** 2 for a in range(3))
    return np.exp(-r2 / (2.0 * radius**2))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
