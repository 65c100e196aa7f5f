import sys

import numpy as np
import pytest

from anatomy_da.skeleton import SkeletonSpec, default_skeleton, skeleton_from_edges


@pytest.fixture(scope="session")
def spec():
    return default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain3():
    """A -> B -> C with one connected pair."""
    return skeleton_from_edges(["a", "b", "c"], [(0, 1), (1, 2)])


@pytest.fixture
def forked():
    """Centre joint with a left and a right bone forming one symmetric pair."""
    return SkeletonSpec(["c", "l", "r"], [(0, 1), (0, 2)], [(0, 1)], [], 0)


def random_pose(spec, rng, scale=0.3):
    """Nondegenerate random pose: random bone directions with lengths in [0.5, 1.5] * scale."""
    joints = np.zeros((spec.n_joints, 3))
    for p, c in spec.bones:
        d = rng.normal(size=3)
        joints[c] = joints[p] + scale * rng.uniform(0.5, 1.5) * d / np.linalg.norm(d)
    return joints


def pytest_terminal_summary(terminalreporter):
    lines = [line for name, mod in list(sys.modules.items())
             if name.endswith("test_acceptance") for line in getattr(mod, "RESULTS", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
