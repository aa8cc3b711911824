"""Tests for the dense Lindblad reference and the unravelling comparison."""

import math

import numpy as np
import pytest

from src.bands import reference_band_table, synthetic_band_table
from src.constants import HBAR_MEV_PS
from src.errors import IntegratorError, InvalidArgumentError, InvalidInputError
from src.mcwf import StateVector, channel_rates, gamma_to_rate
from src.oracle import (
    DensityMatrix,
    LindbladGenerator,
    evolve_density,
    lindblad_rhs,
    mcwf_average,
    trace_distance,
    unravelling_report,
)


@pytest.fixture
def small_gap_table():
    """Six narrow branches 10 meV apart at a single k-point."""
    return synthetic_band_table([0.0, 0.001, 10.0, 10.001, 10.002, 10.003], [1e-4] * 6, 1)


def _random_density(dimension: int, seed: int) -> DensityMatrix:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dimension, dimension)) + 1j * rng.normal(size=(dimension, dimension))
    rho = a @ a.conj().T
    return DensityMatrix(rho / np.trace(rho).real)


def _explicit_rhs(rho: np.ndarray, rates, table) -> np.ndarray:
    """Sum over every (m1, m2, q) channel with dense jump operators."""
    L, M = table.L, table.n_branches
    dimension = M * L * L
    energies = table.energies.ravel()
    H = np.diag(energies)
    result = -1j / HBAR_MEV_PS * (H @ rho - rho @ H)
    for m1 in range(M):
        for m2 in range(M):
            rate = rates.channel_rate(m1, m2)
            for q1 in range(L):
                for q2 in range(L):
                    C = np.zeros((dimension, dimension))
                    for n1 in range(L):
                        for n2 in range(L):
                            row = m1 * L * L + ((n1 + q1) % L) * L + (n2 + q2) % L
                            C[row, m2 * L * L + n1 * L + n2] = math.sqrt(rate)
                    CdC = C.T @ C
                    result += C @ rho @ C.T - 0.5 * (CdC @ rho + rho @ CdC)
    return result


class TestDensityMatrix:
    """Tests for DensityMatrix helpers, mcwf_average and trace_distance."""

    def test_from_state_is_pure(self, small_gap_table) -> None:
        amplitudes = np.zeros((6, 1, 1), dtype=complex)
        amplitudes[0, 0, 0], amplitudes[3, 0, 0] = 1.0, 1.0j
        rho = DensityMatrix.from_state(StateVector(amplitudes))
        assert rho.trace == pytest.approx(1.0)
        assert np.trace(rho.rho @ rho.rho).real == pytest.approx(1.0)
        assert rho.group_populations(small_gap_table) == pytest.approx([0.5, 0.5])

    def test_check_flags_negative_eigenvalue(self) -> None:
        with pytest.raises(IntegratorError, match="not positive"):
            DensityMatrix(np.diag([1.2, -0.2]).astype(complex)).check()

    def test_average_of_orthogonal_states(self) -> None:
        first = StateVector(np.array([1.0, 0.0], dtype=complex).reshape(2, 1, 1))
        second = StateVector(np.array([0.0, 1.0], dtype=complex).reshape(2, 1, 1))
        mixed = mcwf_average([first, second])
        assert mixed.rho == pytest.approx(0.5 * np.eye(2))
        assert trace_distance(mixed, DensityMatrix.from_state(first)) == pytest.approx(0.5)
        assert trace_distance(DensityMatrix.from_state(first), DensityMatrix.from_state(second)) == pytest.approx(1.0)

    def test_empty_average(self) -> None:
        with pytest.raises(InvalidInputError):
            mcwf_average([])


class TestLindbladGenerator:
    """Tests for the master-equation right-hand side."""

    @pytest.fixture
    def table(self):
        return reference_band_table(3)

    @pytest.fixture
    def rates(self, table):
        return channel_rates(gamma_to_rate(1.0, table.upper_width), 300.0, table)

    def test_matches_dense_jump_operators(self, table, rates) -> None:
        rho = _random_density(54, 1)
        assert lindblad_rhs(rho, rates, table) == pytest.approx(_explicit_rhs(rho.rho, rates, table), abs=1e-10)

    def test_preserves_trace_and_hermiticity(self, table, rates) -> None:
        derivative = lindblad_rhs(_random_density(54, 2), rates, table)
        assert abs(np.trace(derivative)) < 1e-12
        assert derivative == pytest.approx(derivative.conj().T, abs=1e-12)

    def test_dimension_limit(self) -> None:
        table = reference_band_table(6)
        rates = channel_rates(1.0, 110.0, table)
        with pytest.raises(InvalidArgumentError, match="exceeds 100"):
            LindbladGenerator(rates, table)


class TestEvolveDensity:
    """Tests for evolve_density."""

    def test_relaxes_to_detailed_balance(self, small_gap_table) -> None:
        """Group populations approach the thermal 2+4 split."""
        rates = channel_rates(1.0, 110.0, small_gap_table)
        amplitudes = np.zeros((6, 1, 1), dtype=complex)
        amplitudes[0, 0, 0] = 1.0
        samples = evolve_density(DensityMatrix.from_state(StateVector(amplitudes)), rates, small_gap_table, 10.0)
        assert [s.time for s in samples] == [0.0, 10.0]
        populations = samples[-1].group_populations(small_gap_table)
        assert populations[1] == pytest.approx(rates.equilibrium_upper_fraction, abs=1e-6)
        assert samples[-1].diagnostics()["trace_error"] < 1e-10

    def test_sample_times_and_step_halving(self, small_gap_table) -> None:
        rates = channel_rates(1.0, 110.0, small_gap_table)
        samples = evolve_density(
            _random_density(6, 3), rates, small_gap_table, 0.5, sample_times=[0.1, 0.25], check_step=True
        )
        assert [s.time for s in samples] == pytest.approx([0.0, 0.1, 0.25, 0.5])

    def test_dimension_mismatch(self, small_gap_table) -> None:
        rates = channel_rates(1.0, 110.0, small_gap_table)
        with pytest.raises(InvalidInputError):
            evolve_density(_random_density(4, 0), rates, small_gap_table, 1.0)


class TestUnravelling:
    """Jump-ensemble averages against the master equation."""

    def test_small_ensembles_within_bounds(self, small_gap_table) -> None:
        rates = channel_rates(1.0, 110.0, small_gap_table)
        report = unravelling_report(rates, small_gap_table, [0.5, 1.0], [50, 200, 800], master_seed=9)
        assert report.within_bounds
        assert report.checkpoints == [0.5, 1.0]
        assert set(report.distances) == {50, 200, 800}
        assert report.to_dict()["trace_distances"]["800"] == report.distances[800]

    def test_deterministic(self, small_gap_table) -> None:
        rates = channel_rates(1.0, 110.0, small_gap_table)
        first = unravelling_report(rates, small_gap_table, [0.5], [20, 40], master_seed=3)
        second = unravelling_report(rates, small_gap_table, [0.5], [20, 40], master_seed=3)
        assert first.distances == second.distances

    @pytest.mark.slow
    def test_statistical_convergence(self) -> None:
        """Trace distance falls off as N^(-1/2) on the 3x3 reference grid."""
        table = reference_band_table(3)
        rates = channel_rates(gamma_to_rate(1.0, table.upper_width), 300.0, table)
        checkpoints = [c * rates.mean_jump_time for c in (0.5, 1.0, 2.0, 4.0)]
        report = unravelling_report(rates, table, checkpoints, [64, 256, 1024, 4096], master_seed=1)
        assert report.within_bounds
        assert report.passed()
