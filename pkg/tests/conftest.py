import os

os.environ.setdefault("NUMBA_NUM_THREADS", "8")

import numpy as np
import pytest

import sparsesplat  # noqa: F401  (sets the numba threading layer before numba loads)
from sparsesplat.geometry import Camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_camera(width=32, height=32, f=32.0, center=(0.0, 0.0, 0.0), index=0):
    pose = np.hstack([np.eye(3), -np.asarray(center, float)[:, None]])
    return Camera(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height, world_to_cam=pose, view_index=index)


@pytest.fixture
def camera():
    return make_camera()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
