import sys
from pathlib import Path

import pytest

from smpdefault.paths import IntensitySpec, TimeGrid, build_filtration_batch

sys.path.insert(0, str(Path(__file__).parent))

SEED = 20240601


@pytest.fixture(scope="session")
def small_batch():
    """2000 paths, 20 steps, intensity 0.8 so that many paths default."""
    return build_filtration_batch(TimeGrid.uniform(1.0, 20), IntensitySpec.constant(0.8), SEED, 2000)


@pytest.fixture(scope="session")
def medium_batch():
    return build_filtration_batch(TimeGrid.uniform(1.0, 25), IntensitySpec.constant(0.3), SEED, 8000)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    """Per-criterion result lines, echoed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
