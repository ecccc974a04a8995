import numpy as np
import pytest

from egokit import handmodel as hm
from egokit import rotmath


def random_hands(rng, n, max_wrist_angle=np.pi, t_scale=0.3):
    """Random but valid hand vectors: curled fingers, any wrist rotation."""
    h = np.tile(hm.HandParams.rest().vector(), (n, 1))
    h[:, hm.THETA] = hm.finger_theta(rng.uniform(0, 1, (n, 15)), rng.normal(0, 0.15, (n, 5)))
    h[:, hm.BETA] = rng.normal(0, 1, (n, 10))
    h[:, hm.ROT] = rotmath.matrix_to_rot6d(rotmath.random_rotation(rng, n, max_wrist_angle))
    h[:, hm.TRANS] = rng.normal(0, t_scale, (n, 3))
    return h


@pytest.fixture(scope="session")
def asset():
    return hm.toy_asset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
