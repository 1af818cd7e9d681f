import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hrcpose.geometry import Pose, quaternion_to_matrix

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def make_pose(rng, extents=(0.1, 0.1, 0.1)):
    R = quaternion_to_matrix(rng.normal(size=4))
    return Pose.from_matrix(R, rng.uniform(-0.3, 0.3, 3), np.asarray(extents) * rng.uniform(0.8, 1.2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def record(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
