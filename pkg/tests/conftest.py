import numpy as np
import pytest

from smbea.zoo import build_model, default_spec


@pytest.fixture(scope="session")
def micro_models():
    """Six untrained, frozen 4-layer saliency models for 8x8 inputs."""
    return [build_model(default_spec(1, seed=s, name=f"micro{s}")).freeze() for s in range(6)]


@pytest.fixture
def micro_images():
    rng = np.random.default_rng(5)
    clean = rng.random((4, 3, 8, 8))
    guide = rng.random((4, 3, 8, 8))
    guide_target = rng.random((4, 1, 8, 8))
    return clean, guide, guide_target


VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(pytestconfig):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    return pytestconfig.stash.setdefault(VERDICTS, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
