"""Physical constants in the unit system used throughout the package.

Energies are in meV, lengths in Å, times in ps and temperatures in K.
"""

from __future__ import annotations

import math

from scipy import constants as _c

_MEV = 1e-3 * _c.e

HBAR_MEV_PS: float = _c.hbar / _MEV * 1e12
BOLTZMANN_MEV_K: float = _c.k / _MEV

# hbar^2 / (2 m_H) with the proton mass, in meV·Å².
KINETIC_PREFACTOR: float = _c.hbar**2 / (2.0 * _c.m_p) / _MEV * 1e20

NI111_LATTICE_CONSTANT: float = 2.581

A2_PER_PS_TO_A2_PER_S: float = 1e12

TWO_PI: float = 2.0 * math.pi

__all__ = [
    "A2_PER_PS_TO_A2_PER_S",
    "BOLTZMANN_MEV_K",
    "HBAR_MEV_PS",
    "KINETIC_PREFACTOR",
    "NI111_LATTICE_CONSTANT",
    "TWO_PI",
]
