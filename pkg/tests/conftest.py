import sys

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from egomotion.geom import AbsolutePose, RelativePose


def random_abs(rng) -> AbsolutePose:
    q = rng.normal(size=4)
    return AbsolutePose(rng.uniform(-10, 10, 3), q / np.linalg.norm(q))


def random_rel(rng, max_pitch: float = np.pi / 2 - 0.1) -> RelativePose:
    r = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-max_pitch, max_pitch), rng.uniform(-np.pi, np.pi)])
    return RelativePose(rng.uniform(-3, 3, 3), r)


def homog_abs(p: AbsolutePose) -> np.ndarray:
    """4x4 oracle built with scipy (scalar-last quaternion)."""
    w, x, y, z = p.q
    T = np.eye(4)
    T[:3, :3] = Rotation.from_quat([x, y, z, w]).as_matrix()
    T[:3, 3] = p.t
    return T


def homog_rel(r: RelativePose) -> np.ndarray:
    roll, pitch, yaw = r.r
    T = np.eye(4)
    T[:3, :3] = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
    T[:3, 3] = r.t
    return T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance pass/fail lines at the end of the run."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {n} {detail}")
