import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynmpi.core import Grid3
from dynmpi.scanner import ScannerModel

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_scanner():
    return ScannerModel(
        gradient=np.array([0.5, 0.5, 1.0]),
        drive_amplitudes=(0.014, 0.014),
        divisors=(17, 16),
        receive_coils=np.eye(3)[:, :2],
    )


@pytest.fixture(scope="session")
def desk_grid():
    return Grid3.centered((16, 16, 1), (1e-3, 1e-3, 1e-3))


@pytest.fixture(scope="session")
def scanner3d():
    # small 3D scanner: lcm(5, 4, 3) = 60 samples per cycle
    return ScannerModel(
        gradient=np.array([0.5, 0.5, 1.0]),
        drive_amplitudes=(0.014, 0.014, 0.014),
        divisors=(5, 4, 3),
    )


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
