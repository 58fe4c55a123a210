import math

import numpy as np
import pytest
from hypothesis import settings

from canonslice.phantoms import make_phantom
from canonslice.se3core import RigidTransform, random_rotation

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_transform(rng, trans=50.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-trans, trans, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def blobs64():
    return make_phantom("blobs", 64, 1.0, 0)


@pytest.fixture(scope="session")
def gradient32():
    return make_phantom("gradient", 32, 1.0)


def deg(x):
    return math.radians(x)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
