from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flatnmpc.flat_model import VehicleParams

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def params():
    return VehicleParams.firefly()


@pytest.fixture
def unit_params():
    return VehicleParams(mass=1.0, inertia=np.diag([0.01, 0.01, 0.02]), gravity=9.81)


def pytest_terminal_summary(terminalreporter):
    import report

    out = report.lines()
    if out:
        terminalreporter.section("acceptance criteria")
        for line in out:
            terminalreporter.write_line(line)
