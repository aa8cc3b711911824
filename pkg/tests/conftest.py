"""Pytest configuration and fixtures for the test suite."""

import numpy as np
import pytest

from src.bands import BandTable, reference_band_table, synthetic_band_table
from src.lattice import LatticeSpec, PotentialParams, build_lattice, make_potential
from src.mcwf import RateModel, channel_rates, gamma_to_rate


@pytest.fixture
def lattice() -> LatticeSpec:
    """Ni(111) triangular lattice, a = 2.581 Å."""
    return build_lattice()


@pytest.fixture
def reference_table(lattice: LatticeSpec) -> BandTable:
    """Tabulated H/Ni(111) branches on a 12x12 grid."""
    return reference_band_table(12, lattice)


@pytest.fixture
def reference_rates(reference_table: BandTable) -> RateModel:
    """Rates at T = 110 K and gamma = 1 for the reference table."""
    return channel_rates(gamma_to_rate(1.0, reference_table.upper_width), 110.0, reference_table)


@pytest.fixture
def two_level_table() -> BandTable:
    """Two flat branches 96 meV apart on a single k-point."""
    return synthetic_band_table([0.0, 96.0], [0.0, 0.0], 1, groups=((0,), (1,)))


@pytest.fixture
def test_potential(lattice: LatticeSpec) -> PotentialParams:
    """Moderate wells used wherever an actual potential is needed."""
    return make_potential(lattice, 400.0, 380.0, 0.6, 0.6)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
