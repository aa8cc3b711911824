"""Unit tests for positions, MSD curves and the fits on top of them."""

import math

import numpy as np
import pytest

from src.constants import A2_PER_PS_TO_A2_PER_S, BOLTZMANN_MEV_K
from src.errors import InvalidInputError, InvalidWindowError, WraparoundError
from src.bands import reference_band_table
from src.mcwf import JumpEvent, JumpHistory, StateVector, TrajectoryRecord, channel_rates, evolve_coherent
from src.observables import (
    DiffusionResult,
    PositionTracker,
    arrhenius_fit,
    default_window,
    diffusion_coefficient,
    fit_line,
    gamma_scan,
    mean_velocity,
    msd_curve,
    position_moments,
    residence_statistics,
    semiclassical_msd_curve,
    tunnelling_lengths,
    trajectory_trace,
    upper_band_flights,
)


def _site_state(L: int, site: tuple[int, int], branch: int = 0, n_branches: int = 6) -> StateVector:
    """State localized on one supercell site."""
    n1, n2 = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    amplitudes = np.zeros((n_branches, L, L), dtype=complex)
    amplitudes[branch] = np.exp(-2j * math.pi * (n1 * site[0] + n2 * site[1]) / L) / L
    return StateVector(amplitudes)


def _record(seed: int, times: np.ndarray, spread_rate: float = 0.0, velocity=(0.0, 0.0), jumps=()) -> TrajectoryRecord:
    """Record of a packet that stays at the origin and spreads as <x²> = <y²> = spread_rate t."""
    n = times.size
    second = np.column_stack([spread_rate * times, spread_rate * times, np.zeros(n)])
    return TrajectoryRecord(
        seed=seed,
        times=times,
        positions=np.zeros((n, 2)),
        second_moments=second,
        occupations=np.column_stack([np.ones(n), np.zeros(n)]),
        drift=np.outer(times, velocity),
        jumps=list(jumps),
        final_time=float(times[-1]),
    )


def _event(time: float, kind: str, position=(0.0, 0.0), source: int = 0, target: int = 0) -> JumpEvent:
    return JumpEvent(time=time, source_branch=source, target_branch=target, q=(0, 0), kind=kind, pre_jump_position=position)


def _result(T: float, gamma: float, D: float) -> DiffusionResult:
    return DiffusionResult(
        D_xx=D, D_yy=D, D_xy=0.0, err_xx=0.01 * D, err_yy=0.01 * D, err_xy=0.0, fit_window=(0.0, 1.0), T=T, gamma=gamma
    )


class TestPositionMoments:
    """Tests for position_moments, PositionTracker and mean_velocity."""

    def test_localized_site(self, reference_table) -> None:
        moments = position_moments(_site_state(12, (2, 5)), reference_table)
        lattice = reference_table.lattice
        assert moments.mean == pytest.approx(2 * lattice.a1 + 5 * lattice.a2)
        assert moments.covariance == pytest.approx(np.zeros((2, 2)), abs=1e-9)
        assert moments.reduced_spread == pytest.approx(np.zeros(2), abs=1e-6)

    def test_unwraps_to_nearest_image(self, reference_table) -> None:
        """A site just across the boundary is taken next to the reference."""
        moments = position_moments(_site_state(12, (11, 0)), reference_table, reference=np.zeros(2))
        assert moments.reduced_mean == pytest.approx(np.array([-1.0, 0.0]))

    def test_tracker_follows_the_packet(self, reference_table) -> None:
        tracker = PositionTracker(reference_table)
        tracker.observe(_site_state(12, (0, 0)))
        moments = tracker.observe(_site_state(12, (11, 11)))
        assert moments.reduced_mean == pytest.approx(np.array([-1.0, -1.0]))

    def test_tracker_rejects_large_drift(self, reference_table) -> None:
        """Moving more than L/4 cells between samples makes the image ambiguous."""
        tracker = PositionTracker(reference_table)
        tracker.observe(_site_state(12, (0, 0)))
        with pytest.raises(WraparoundError, match="between samples"):
            tracker.observe(_site_state(12, (4, 0)))

    def test_tracker_accepts_drift_within_limit(self, reference_table) -> None:
        tracker = PositionTracker(reference_table)
        tracker.observe(_site_state(12, (0, 0)))
        moments = tracker.observe(_site_state(12, (3, 0)))
        assert moments.reduced_mean == pytest.approx(np.array([3.0, 0.0]))

    def test_phase_ramp_translates_by_a1(self, reference_table) -> None:
        """Multiplying b_k by exp(-i k·a1) moves <r> by exactly a1 and keeps the covariance."""
        L = 12
        l1, l2 = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
        psi = np.zeros((6, L, L), dtype=complex)
        psi[1] = np.exp(-((l1 - 5.0) ** 2 + (l2 - 6.0) ** 2) / 2.0) * np.exp(0.4j * l1)
        amplitudes = np.fft.fft2(psi, norm="ortho", axes=(-2, -1))
        n1 = np.arange(L)[:, None]
        ramp = np.exp(-2j * math.pi * n1 / L)[None, :, :]

        before = position_moments(StateVector(amplitudes), reference_table)
        after = position_moments(StateVector(amplitudes * ramp), reference_table)
        assert after.mean - before.mean == pytest.approx(reference_table.lattice.a1, abs=1e-9)
        assert after.covariance == pytest.approx(before.covariance, abs=1e-9)

    def test_delocalized_state_is_rejected(self, reference_table) -> None:
        """A single plane wave covers the whole supercell."""
        amplitudes = np.zeros((6, 12, 12), dtype=complex)
        amplitudes[0, 0, 0] = 1.0
        with pytest.raises(WraparoundError):
            position_moments(StateVector(amplitudes), reference_table)

    def test_mean_velocity(self, reference_table) -> None:
        amplitudes = np.zeros((6, 12, 12), dtype=complex)
        amplitudes[3, 2, 1] = 1.0
        velocity = mean_velocity(StateVector(amplitudes), reference_table)
        assert velocity == pytest.approx(reference_table.velocities[3, 2, 1])


class TestFitLine:
    """Tests for fit_line."""

    def test_exact_line(self) -> None:
        x = np.linspace(0.0, 4.0, 9)
        fit = fit_line(x, 3.0 * x + 1.0)
        assert fit.slope == pytest.approx(3.0)
        assert fit.intercept == pytest.approx(1.0)
        assert fit.slope_err == pytest.approx(0.0, abs=1e-9)
        assert fit.r2 == pytest.approx(1.0)

    def test_weighted_errors(self) -> None:
        """With σ given the slope error is 1/sqrt(Σ w (x - x̄)²)."""
        x = np.array([0.0, 1.0, 2.0, 3.0])
        sigma = np.full(4, 0.5)
        fit = fit_line(x, 2.0 * x, sigma)
        sxx = float(np.sum((x - x.mean()) ** 2 / sigma**2))
        assert fit.slope_err == pytest.approx(1.0 / math.sqrt(sxx))


class TestMsd:
    """Tests for msd_curve, semiclassical_msd_curve and diffusion_coefficient."""

    @pytest.fixture
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 10.0, 21)

    def test_spreading_packets(self, times) -> None:
        records = [_record(seed, times, spread_rate=0.4) for seed in range(3)]
        msd = msd_curve(records)
        assert msd.msd_xx == pytest.approx(0.4 * times)
        assert msd.msd_yy == pytest.approx(0.4 * times)
        assert msd.msd_xy == pytest.approx(np.zeros(times.size))
        assert msd.errors == pytest.approx(np.zeros((times.size, 3)))
        assert msd.n_traj == 3

    def test_moving_packet_counts_from_initial_position(self, times) -> None:
        moving = _record(0, times)
        moving.positions[:, 0] = 0.5 * times
        moving.second_moments[:, 0] = (0.5 * times) ** 2
        msd = msd_curve([moving, _record(1, times)])
        assert msd.msd_xx == pytest.approx(0.5 * (0.5 * times) ** 2)

    def test_bootstrap_errors_are_reproducible(self, times) -> None:
        records = [_record(seed, times, spread_rate=rate) for seed, rate in enumerate([0.2, 0.4, 0.9, 0.5])]
        first, second = msd_curve(records, seed=4), msd_curve(records, seed=4)
        assert np.array_equal(first.errors, second.errors)
        assert np.all(first.errors[1:, 0] > 0)

    def test_semiclassical_drift(self, times) -> None:
        records = [_record(seed, times, velocity=(0.3, -0.1)) for seed in range(2)]
        msd = semiclassical_msd_curve(records)
        assert msd.msd_xx == pytest.approx(0.09 * times**2)
        assert msd.msd_xy == pytest.approx(-0.03 * times**2)

    def test_needs_two_trajectories(self, times) -> None:
        with pytest.raises(InvalidInputError):
            msd_curve([_record(0, times)])

    def test_mismatched_grids(self, times) -> None:
        with pytest.raises(InvalidInputError):
            msd_curve([_record(0, times), _record(1, times[:-1])])

    def test_diffusion_coefficient(self, times) -> None:
        """MSD = 2 D t per axis gives D back, in Å²/ps and Å²/s."""
        msd = msd_curve([_record(seed, times, spread_rate=0.8) for seed in range(2)])
        result = diffusion_coefficient(msd, (2.0, 10.0), T=110.0, gamma=1.0)
        assert result.D == pytest.approx(0.4)
        assert result.isotropic
        payload = result.to_dict()
        assert payload["D_A2_per_s"] == pytest.approx(0.4 * A2_PER_PS_TO_A2_PER_S)
        assert payload["fit_window_ps"] == [2.0, 10.0]

    def test_semiclassical_matches_position_moments(self) -> None:
        """A narrow k-packet moves by <v> t, with the velocity from finite differences on the grid."""
        table = reference_band_table(24)
        L = table.L
        n = np.arange(L)
        d1 = (n - 6 + L // 2) % L - L // 2
        d2 = (n + L // 2) % L - L // 2
        envelope = np.exp(-(d1[:, None] ** 2 + d2[None, :] ** 2) / 8.0)
        center = np.exp(-2j * math.pi * (n[:, None] * 12 + n[None, :] * 12) / L)
        amplitudes = np.zeros((6, L, L), dtype=complex)
        amplitudes[3] = envelope * center
        state = StateVector(amplitudes).normalized()

        frozen = channel_rates(0.0, 110.0, table)
        t = 10.0
        tracker = PositionTracker(table)
        start = tracker.locate(state)
        shift = tracker.locate(evolve_coherent(state, frozen, table, t)) - start
        expected = mean_velocity(state, table) * t
        assert np.linalg.norm(expected) > 1.0
        assert np.linalg.norm(shift - expected) < 0.03 * np.linalg.norm(expected)

    def test_anisotropy_is_flagged(self, times) -> None:
        """Planted D_xx != D_yy is reported as not isotropic."""
        records = [_record(seed, times, spread_rate=0.8) for seed in range(2)]
        for record in records:
            record.second_moments[:, 1] = 0.2 * times
        result = diffusion_coefficient(msd_curve(records), (2.0, 10.0))
        assert result.D_xx == pytest.approx(0.4)
        assert result.D_yy == pytest.approx(0.1)
        assert not result.isotropic
        assert result.to_dict()["isotropic"] is False

    def test_default_window_skips_transient(self, times) -> None:
        msd = msd_curve([_record(seed, times) for seed in range(2)])
        assert default_window(msd, 0.5) == (5.0, 10.0)
        assert default_window(msd, None) == (5.0, 10.0)

    def test_window_outside_data(self, times) -> None:
        msd = msd_curve([_record(seed, times) for seed in range(2)])
        with pytest.raises(InvalidWindowError):
            diffusion_coefficient(msd, (5.0, 20.0))

    def test_window_with_too_few_points(self, times) -> None:
        msd = msd_curve([_record(seed, times) for seed in range(2)])
        with pytest.raises(InvalidWindowError, match="need 5"):
            diffusion_coefficient(msd, (9.0, 10.0))


class TestArrhenius:
    """Tests for arrhenius_fit and gamma_scan."""

    def test_recovers_activation(self) -> None:
        E_a, D0 = 98.0, 2.7e9 / A2_PER_PS_TO_A2_PER_S
        results = [_result(T, 1.0, D0 * math.exp(-E_a / (BOLTZMANN_MEV_K * T))) for T in (90.0, 110.0, 130.0, 150.0)]
        fit = arrhenius_fit(results)
        assert fit.E_a == pytest.approx(E_a, rel=1e-6)
        assert fit.D0 == pytest.approx(2.7e9, rel=1e-6)
        assert fit.temperature_range == (90.0, 150.0)
        assert fit.to_dict()["reference_comparison"]["measured"]["E_a_meV"] == 105.0

    def test_needs_four_temperatures(self) -> None:
        with pytest.raises(InvalidInputError):
            arrhenius_fit([_result(T, 1.0, 1e-4) for T in (90.0, 110.0, 130.0)])

    def test_rejects_mixed_gamma(self) -> None:
        results = [_result(T, g, 1e-4) for T, g in zip((90.0, 110.0, 130.0, 150.0), (1.0, 1.0, 1.0, 2.0))]
        with pytest.raises(InvalidInputError, match="mixes gamma"):
            arrhenius_fit(results)

    def test_rejects_non_positive_D(self) -> None:
        results = [_result(T, 1.0, 1e-4) for T in (90.0, 110.0, 130.0)] + [_result(150.0, 1.0, -1e-4)]
        with pytest.raises(InvalidInputError, match="positive"):
            arrhenius_fit(results)

    def test_gamma_exponent(self) -> None:
        """D ∝ 1/γ gives an exponent of -1."""
        results = [_result(110.0, g, 2e-4 / g) for g in (0.5, 1.0, 2.0, 4.0)]
        scan = gamma_scan(results)
        assert scan.exponent == pytest.approx(-1.0)
        assert scan.prefactor == pytest.approx(2e-4 * A2_PER_PS_TO_A2_PER_S)

    def test_gamma_scan_needs_three_values(self) -> None:
        with pytest.raises(InvalidInputError):
            gamma_scan([_result(110.0, g, 1e-4) for g in (1.0, 2.0)])


class TestTunnelling:
    """Tests for upper_band_flights and tunnelling_lengths."""

    @pytest.fixture
    def history(self) -> JumpHistory:
        jumps = (
            _event(1.0, "up", (0.0, 0.0), 0, 2),
            _event(2.0, "intra", (1.0, 0.0), 2, 3),
            _event(3.0, "down", (3.0, 4.0), 3, 0),
        )
        return JumpHistory(seed=1, final_time=5.0, initial_group=0, jumps=jumps)

    def test_group_interval(self, history) -> None:
        assert upper_band_flights(history) == pytest.approx([5.0])

    def test_collision_interval(self, history) -> None:
        assert upper_band_flights(history, "collision") == pytest.approx([1.0, math.sqrt(20.0)])

    def test_open_flight_is_dropped(self) -> None:
        history = JumpHistory(seed=0, final_time=5.0, initial_group=0, jumps=(_event(1.0, "up", source=0, target=2),))
        assert upper_band_flights(history) == []

    def test_histogram_bins(self, history) -> None:
        histogram = tunnelling_lengths([history], site_separation=1.5)
        assert histogram.bin_edges[1] == pytest.approx(0.75)
        assert int(histogram.counts.sum()) == 1
        assert histogram.counts[6] == 1
        assert histogram.decay_length is None

    def test_empty_histogram(self) -> None:
        histogram = tunnelling_lengths([JumpHistory(seed=0, final_time=1.0, initial_group=0)], site_separation=1.5)
        assert histogram.is_empty
        assert histogram.summary()["n_intervals"] == 0

    def test_exponential_tail(self) -> None:
        """Exponentially distributed flights give their decay length back."""
        rng = np.random.default_rng(5)
        histories = [
            JumpHistory(
                seed=i,
                final_time=2.0,
                initial_group=0,
                jumps=(_event(0.5, "up", (0.0, 0.0), 0, 2), _event(1.0, "down", (float(ell), 0.0), 2, 0)),
            )
            for i, ell in enumerate(rng.exponential(2.0, size=20_000))
        ]
        histogram = tunnelling_lengths(histories, site_separation=1.5)
        assert histogram.decay_length == pytest.approx(2.0, rel=0.1)
        assert histogram.tail_r2 > 0.9


class TestTraceAndResidence:
    """Tests for trajectory_trace and residence_statistics."""

    def test_trace_interleaves_jumps(self) -> None:
        times = np.arange(4.0)
        record = _record(0, times, jumps=[_event(1.5, "up", (0.2, 0.1), 0, 3)])
        trace = trajectory_trace(record)
        assert list(trace["t_ps"]) == [0.0, 1.0, 1.5, 2.0, 3.0]
        assert trace.loc[2, "kind"] == "up"
        assert trace.loc[2, "target_branch"] == 3

    def test_residence(self) -> None:
        jumps = (
            _event(2.0, "up", source=0, target=2),
            _event(3.0, "intra", source=2, target=4),
            _event(5.0, "down", source=4, target=1),
            _event(8.0, "up", source=1, target=3),
        )
        stats = residence_statistics([JumpHistory(seed=0, final_time=10.0, initial_group=0, jumps=jumps)])
        assert stats.upper_fraction == pytest.approx(0.5)
        assert stats.mean_lower_dwell_ps == pytest.approx(2.5)
        assert stats.excitations_per_ps == pytest.approx(0.2)
        assert stats.intra_collisions_per_flight == pytest.approx(0.5)
        assert stats.event_counts == {"intra": 1, "up": 2, "down": 1}
