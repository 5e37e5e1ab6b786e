import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from clsreg.cpd import CpdConfig
from clsreg.geometry import voxel_downsample
from clsreg.shape_space import train_category
from clsreg.shapes import MUG, generate_family

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_family():
    """Six coarse mugs (about 100 points each); index 0 is the nominal instance."""
    clouds, params = generate_family(MUG, 6, seed=11, n_points=1500)
    return [voxel_downsample(c, 0.1) for c in clouds], params


@pytest.fixture(scope="session")
def small_model(small_family):
    clouds, _ = small_family
    return train_category(clouds[:5], canonical=0, cfg=CpdConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion and assert it.

    A criterion with a documented, analysed shortfall is reported as FAIL and
    then marked xfail instead of aborting the run.
    """
    def check(number: int, name: str, ok: bool, detail: str, known_shortfall: str | None = None):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if not ok and known_shortfall:
            pytest.xfail(known_shortfall)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
