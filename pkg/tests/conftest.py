import numpy as np
import pytest

from bev2dsup.geometry import Camera, Intrinsics, RigidTransform
from bev2dsup.scenegen import RigConfig, generate_dataset, write_dataset

SMALL_RIG = RigConfig(width=160, height=90)


def pinhole(width=1000, height=1000, f=1000.0, c=500.0, transform=None, cam_id="cam"):
    return Camera(cam_id, Intrinsics(f, f, c, c), transform or RigidTransform.identity(), width, height)


@pytest.fixture
def cam():
    return pinhole()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(3, 6, 0.5, rig=SMALL_RIG)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory, small_dataset):
    path = tmp_path_factory.mktemp("ds")
    write_dataset(small_dataset, path)
    return path


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
