import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from uwaloc import waveguide  # noqa: E402


def isovelocity_env(depth=216.5, c=1500.0, bottom_density=1e6, bottom_c=1500.0, below=200.0):
    """Isovelocity water over a single homogeneous layer.

    A huge bottom density emulates a rigid seabed; density 1 with the
    water sound speed emulates no seabed at all.
    """
    return waveguide.Environment(
        water_depth_m=depth,
        ssp_depths_m=(0.0, depth),
        ssp_speeds_m_s=(c, c),
        sediment=(waveguide.SedimentLayer(below, bottom_density, bottom_c, bottom_c, 0.0),),
        termination_depth_m=depth + below,
    )


@pytest.fixture(scope="session")
def swellex_env():
    return waveguide.swellex_environment()


@pytest.fixture(scope="session")
def swellex_modes(swellex_env):
    return waveguide.solve_modes(swellex_env, 109.0)


@pytest.fixture(scope="session")
def array21():
    return waveguide.swellex_array()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


#: criterion number -> (passed, detail); filled by the acceptance module
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
