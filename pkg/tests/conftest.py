import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scatterct.geometry import Detector, Grid2D, ScanGeometry, Source, default_geometry, paper_sources, perimeter_detectors
from scatterct.physics import EnergyBinning, Spectrum, kramers_spectrum

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_geometry(n=6, n_detectors=5, spectrum_step=10.0, scatter_bin=5.0, atten_bin=10.0):
    """Few-ray layout small enough for loop-based oracles."""
    grid = Grid2D(n, 20.0)
    return ScanGeometry(
        grid,
        paper_sources(grid),
        perimeter_detectors(grid, n_detectors),
        EnergyBinning.from_range(20.0, 120.0, atten_bin),
        EnergyBinning.from_range(20.0, 120.0, scatter_bin),
        {"default": kramers_spectrum(140.0, spectrum_step)},
    )


@pytest.fixture
def geom6():
    return small_geometry()


@pytest.fixture
def desk_geometry():
    return default_geometry(20, 21, atten_bin_kev=5.0, spectrum=kramers_spectrum(140.0, 5.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(k, ok, detail)`` records a PASS/FAIL line and asserts."""

    def record(k, ok, detail):
        _ACCEPTANCE[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[k])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
