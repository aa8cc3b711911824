"""Dense Lindblad integration on small grids, the reference for the jump ensemble.

The basis index of a density matrix is ``m * L² + n1 * L + n2``, the
row-major flattening of the ``(M, L, L)`` amplitude arrays used by ``mcwf``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .bands import BandTable
from .constants import HBAR_MEV_PS
from .errors import IntegratorError, InvalidArgumentError, InvalidInputError
from .mcwf import RateModel, StateVector, prepare_initial_state, propagate, trajectory_rng
from .observables import fit_line

logger = logging.getLogger(__name__)

MAX_ORACLE_DIMENSION = 100
HERMITICITY_TOLERANCE = 1e-10
TRACE_TOLERANCE = 1e-10
POSITIVITY_TOLERANCE = -1e-8
STEP_HALVING_TOLERANCE = 1e-8


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    rho: np.ndarray
    time: float = 0.0

    @property
    def dimension(self) -> int:
        return int(self.rho.shape[0])

    @property
    def trace(self) -> complex:
        return complex(np.trace(self.rho))

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.rho - self.rho.conj().T)))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.rho + self.rho.conj().T)).min())

    def diagnostics(self) -> dict[str, float]:
        return {
            "time_ps": self.time,
            "hermiticity_error": self.hermiticity_error(),
            "trace_error": abs(self.trace - 1.0),
            "min_eigenvalue": self.min_eigenvalue(),
        }

    def check(self) -> None:
        """Raise IntegratorError unless ρ is Hermitian, unit-trace and positive."""
        report = self.diagnostics()
        if report["hermiticity_error"] > HERMITICITY_TOLERANCE:
            raise IntegratorError(f"density matrix lost Hermiticity at t={self.time:g} ps: {report['hermiticity_error']:.2e}")
        if report["trace_error"] > TRACE_TOLERANCE:
            raise IntegratorError(f"density matrix trace drifted at t={self.time:g} ps: {report['trace_error']:.2e}")
        if report["min_eigenvalue"] < POSITIVITY_TOLERANCE:
            raise IntegratorError(f"density matrix not positive at t={self.time:g} ps: {report['min_eigenvalue']:.2e}")

    def branch_populations(self, n_branches: int) -> np.ndarray:
        return np.real(np.diag(self.rho)).reshape(n_branches, -1).sum(axis=1)

    def group_populations(self, bandtable: BandTable) -> np.ndarray:
        populations = self.branch_populations(bandtable.n_branches)
        return np.array([populations[list(bandtable.lower)].sum(), populations[list(bandtable.upper)].sum()])

    @classmethod
    def from_state(cls, state: StateVector) -> "DensityMatrix":
        psi = state.amplitudes.ravel() / math.sqrt(state.norm2())
        return cls(np.outer(psi, psi.conj()), state.time)


class LindbladGenerator:
    """Right-hand side ρ̇ = -(i/ħ)[H, ρ] + Σ_μ (C_μ ρ C_μ† - ½{C_μ†C_μ, ρ}).

    The q-summed jump term only fills the branch-diagonal blocks and depends
    on a block's entries through its diagonal sums s(d) = Σ_p ρ[p, p + d].
    """

    def __init__(self, rates: RateModel, bandtable: BandTable) -> None:
        self.n_branches = bandtable.n_branches
        self.L = bandtable.L
        self.n_q = self.L * self.L
        self.dimension = self.n_branches * self.n_q
        if self.dimension > MAX_ORACLE_DIMENSION:
            raise InvalidArgumentError(
                f"oracle dimension {self.dimension} exceeds {MAX_ORACLE_DIMENSION}; use a smaller grid"
            )
        energies = bandtable.energies.ravel()
        decay = np.repeat(rates.decay_rates, self.n_q)
        self.coherent = -1j / HBAR_MEV_PS * (energies[:, None] - energies[None, :]) - 0.5 * (decay[:, None] + decay[None, :])
        self.transfer = rates.branch_rates / self.n_q

        n = np.indices((self.L, self.L)).reshape(2, -1).T
        summed = (n[:, None, :] + n[None, :, :]) % self.L
        difference = (n[None, :, :] - n[:, None, :]) % self.L
        self.shift = summed[..., 0] * self.L + summed[..., 1]
        self.difference = difference[..., 0] * self.L + difference[..., 1]
        self.rows = np.arange(self.n_q)[:, None]

    def _blocks(self, rho: np.ndarray) -> np.ndarray:
        blocks = rho.reshape(self.n_branches, self.n_q, self.n_branches, self.n_q)
        return blocks[np.arange(self.n_branches), :, np.arange(self.n_branches), :]

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        derivative = self.coherent * rho
        sums = self._blocks(rho)[:, self.rows, self.shift].sum(axis=1)
        jumps = self.transfer @ sums
        view = derivative.reshape(self.n_branches, self.n_q, self.n_branches, self.n_q)
        for m in range(self.n_branches):
            view[m, :, m, :] += jumps[m][self.difference]
        return derivative


def lindblad_rhs(rho: DensityMatrix, rates: RateModel, bandtable: BandTable) -> np.ndarray:
    return LindbladGenerator(rates, bandtable)(rho.rho)


def suggest_timestep(rates: RateModel, bandtable: BandTable) -> float:
    """dt = 0.01 / max(fastest Bohr frequency, fastest decay rate)."""

    spread = float(bandtable.energies.max() - bandtable.energies.min())
    fastest = max(spread / HBAR_MEV_PS, float(rates.decay_rates.max()))
    return 0.01 / fastest if fastest > 0 else 1.0


def _rk4(generator: LindbladGenerator, rho: np.ndarray, span: float, dt: float) -> np.ndarray:
    n_steps = max(1, math.ceil(span / dt - 1e-9))
    h = span / n_steps
    for _ in range(n_steps):
        k1 = generator(rho)
        k2 = generator(rho + 0.5 * h * k1)
        k3 = generator(rho + 0.5 * h * k2)
        k4 = generator(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
    return rho


def evolve_density(
    rho0: DensityMatrix,
    rates: RateModel,
    bandtable: BandTable,
    t_max: float,
    dt: float | None = None,
    *,
    sample_times: Sequence[float] | None = None,
    check_step: bool = False,
) -> list[DensityMatrix]:
    """Fourth-order Runge-Kutta integration, ρ re-Hermitized after every step.

    Returns ρ at ``sample_times`` (default: start and ``t_max``), each one
    checked for Hermiticity, unit trace and positivity. With ``check_step``
    the final state is recomputed at dt/2 and must agree to 1e-8.
    """

    if t_max < 0:
        raise InvalidArgumentError(f"t_max must be non-negative, got {t_max}")
    generator = LindbladGenerator(rates, bandtable)
    if rho0.dimension != generator.dimension:
        raise InvalidInputError(f"density matrix has dimension {rho0.dimension}, basis has {generator.dimension}")
    dt = dt or suggest_timestep(rates, bandtable)
    times = sorted({rho0.time, *(sample_times or ()), rho0.time + t_max})

    samples: list[DensityMatrix] = []
    rho, now = rho0.rho.astype(complex), rho0.time
    for t in times:
        if t > now:
            rho = _rk4(generator, rho, t - now, dt)
            now = t
        sample = DensityMatrix(rho.copy(), now)
        sample.check()
        samples.append(sample)

    if check_step and t_max > 0:
        halved = _rk4(generator, rho0.rho.astype(complex), t_max, dt / 2.0)
        change = float(np.max(np.abs(halved - samples[-1].rho)))
        logger.info("step-halving check at t=%.4g ps changed rho by %.2e", now, change)
        if change > STEP_HALVING_TOLERANCE:
            raise IntegratorError(f"step halving changed rho(t_max) by {change:.2e}; reduce dt below {dt:.3g} ps")
    return samples


def mcwf_average(states: Sequence[StateVector]) -> DensityMatrix:
    """σ̄ = (1/N) Σ_i |Ψ_i⟩⟨Ψ_i|."""

    if not states:
        raise InvalidInputError("cannot average an empty ensemble")
    shapes = {s.amplitudes.shape for s in states}
    if len(shapes) > 1:
        raise InvalidInputError(f"ensemble mixes state shapes {sorted(shapes)}")
    psi = np.stack([s.amplitudes.ravel() / math.sqrt(s.norm2()) for s in states])
    return DensityMatrix(psi.T @ psi.conj() / len(states), states[0].time)


def trace_distance(rho_a: DensityMatrix, rho_b: DensityMatrix) -> float:
    if rho_a.rho.shape != rho_b.rho.shape:
        raise InvalidInputError(f"shape mismatch {rho_a.rho.shape} vs {rho_b.rho.shape}")
    difference = rho_a.rho - rho_b.rho
    return 0.5 * float(np.abs(np.linalg.eigvalsh(0.5 * (difference + difference.conj().T))).sum())


@dataclass
class UnravellingReport:
    """Trace distances between jump-ensemble averages and the master equation."""

    T: float
    gamma: float
    checkpoints: list[float]
    ensemble_sizes: list[int]
    distances: dict[int, list[float]]
    exponents: list[float]
    diagnostics: list[dict[str, float]]
    bounds: dict[int, float] = field(default_factory=dict)

    @property
    def within_bounds(self) -> bool:
        return all(d < self.bounds[n] for n, row in self.distances.items() for d in row)

    @property
    def mean_exponent(self) -> float:
        return float(np.mean(self.exponents)) if self.exponents else math.nan

    def passed(self, exponent_range: tuple[float, float] = (-0.65, -0.35)) -> bool:
        low, high = exponent_range
        return self.within_bounds and low <= self.mean_exponent <= high

    def to_dict(self) -> dict[str, Any]:
        return {
            "T_K": self.T,
            "gamma": self.gamma,
            "checkpoints_ps": self.checkpoints,
            "ensemble_sizes": self.ensemble_sizes,
            "trace_distances": {str(n): row for n, row in self.distances.items()},
            "bounds": {str(n): b for n, b in self.bounds.items()},
            "n_scaling_exponents": self.exponents,
            "mean_n_scaling_exponent": self.mean_exponent,
            "within_bounds": self.within_bounds,
            "passed": self.passed(),
            "density_diagnostics": self.diagnostics,
        }


def unravelling_report(
    rates: RateModel,
    bandtable: BandTable,
    checkpoints: Sequence[float],
    ensemble_sizes: Sequence[int],
    master_seed: int,
    *,
    mode: str = "event",
    check_step: bool = False,
) -> UnravellingReport:
    """Compare σ̄_N with ρ_S(t) at each checkpoint for nested ensembles.

    All trajectories start from one ground packet; the ensemble of size N is
    the first N trajectories of the largest one.
    """

    _, init_rng = trajectory_rng(master_seed, 2**32)
    initial = prepare_initial_state(bandtable, "ground-packet", init_rng)
    times = sorted(float(t) for t in checkpoints)
    sizes = sorted(int(n) for n in ensemble_sizes)

    snapshots: list[list[StateVector]] = [[] for _ in times]
    for index in range(sizes[-1]):
        _, rng = trajectory_rng(master_seed, index)
        state = initial.copy()
        for slot, t in enumerate(times):
            state = propagate(state, rates, bandtable, t, rng, mode=mode).state
            snapshots[slot].append(state.copy())

    exact = evolve_density(
        DensityMatrix.from_state(initial), rates, bandtable, times[-1], sample_times=times, check_step=check_step
    )
    exact_at = {round(sample.time, 12): sample for sample in exact}

    distances = {
        n: [trace_distance(mcwf_average(snapshots[slot][:n]), exact_at[round(t, 12)]) for slot, t in enumerate(times)]
        for n in sizes
    }
    exponents: list[float] = []
    if len(sizes) >= 2:
        for slot in range(len(times)):
            row = np.array([distances[n][slot] for n in sizes])
            if np.all(row > 0):
                exponents.append(fit_line(np.log(sizes), np.log(row)).slope)
    report = UnravellingReport(
        T=rates.T,
        gamma=rates.gamma,
        checkpoints=times,
        ensemble_sizes=sizes,
        distances=distances,
        exponents=exponents,
        diagnostics=[sample.diagnostics() for sample in exact],
        bounds={n: 3.0 / math.sqrt(n) + 1e-3 for n in sizes},
    )
    logger.info(
        "unravelling check T=%g K gamma=%g: max distance %.3g, N exponent %.2f",
        rates.T,
        rates.gamma,
        max(max(row) for row in distances.values()),
        report.mean_exponent,
    )
    return report


__all__ = [
    "DensityMatrix",
    "LindbladGenerator",
    "UnravellingReport",
    "evolve_density",
    "lindblad_rhs",
    "mcwf_average",
    "suggest_timestep",
    "trace_distance",
    "unravelling_report",
]
