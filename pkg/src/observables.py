"""Positions, mean-square displacement and the fits built on them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Literal, Sequence, TYPE_CHECKING

import numpy as np
import pandas as pd
from scipy import fft
from sklearn.linear_model import LinearRegression

from .bands import BandTable
from .constants import A2_PER_PS_TO_A2_PER_S, BOLTZMANN_MEV_K
from .errors import InvalidInputError, InvalidWindowError, WraparoundError

if TYPE_CHECKING:
    from .mcwf import JumpHistory, StateVector, TrajectoryRecord

logger = logging.getLogger(__name__)

N_BOOTSTRAP = 200
TRANSIENT_JUMP_TIMES = 10.0
MIN_WINDOW_POINTS = 5

# Low-temperature measurements and the published full-scale simulation, D0 in Å²/s.
MEASURED_ACTIVATION = {"E_a_meV": 105.0, "D0_A2_per_s": 2.4e9}
PUBLISHED_ACTIVATION = {"E_a_meV": 98.1, "D0_A2_per_s": 2.71e9}


# --- position -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PositionMoments:
    mean: np.ndarray
    second: np.ndarray
    reduced_mean: np.ndarray
    reduced_spread: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.second - np.outer(self.mean, self.mean)


def site_probabilities(state: "StateVector") -> np.ndarray:
    """|ψ(l)|² on the L×L supercell, summed over branches."""
    psi = fft.ifft2(state.amplitudes, norm="ortho", axes=(-2, -1))
    probabilities = np.sum((psi * psi.conj()).real, axis=0)
    return probabilities / probabilities.sum()


def position_moments(
    state: "StateVector",
    bandtable: BandTable,
    reference: np.ndarray | None = None,
) -> PositionMoments:
    """<r> and <r rᵀ> with the position operator taken band-diagonal.

    Site coordinates are unwrapped per reduced axis to the image nearest
    ``reference`` (reduced units); without a reference the most probable
    site is used.
    """

    p = site_probabilities(state)
    L = p.shape[0]
    if reference is None:
        reference = np.array(np.unravel_index(int(np.argmax(p)), p.shape), dtype=float)
    sites = np.arange(L, dtype=float)
    l1 = sites + L * np.round((reference[0] - sites) / L)
    l2 = sites + L * np.round((reference[1] - sites) / L)
    p1, p2 = p.sum(axis=1), p.sum(axis=0)

    mean = np.array([p1 @ l1, p2 @ l2])
    second = np.array([[p1 @ (l1 * l1), l1 @ p @ l2], [l1 @ p @ l2, p2 @ (l2 * l2)]])
    spread = np.sqrt(np.maximum(np.diag(second) - mean * mean, 0.0))
    if np.any(spread > L / 4.0):
        raise WraparoundError(
            f"packet spread {spread.max():.2f} cells exceeds a quarter of the {L}x{L} supercell"
        )

    direct = bandtable.lattice.direct
    return PositionMoments(
        mean=mean @ direct,
        second=direct.T @ second @ direct,
        reduced_mean=mean,
        reduced_spread=spread,
    )


class PositionTracker:
    """Keeps the unwrapping reference of one trajectory between samples.

    Consecutive observations may move the mean by at most L/4 cells along
    each reduced axis; beyond that the minimal image is ambiguous.
    """

    def __init__(self, bandtable: BandTable) -> None:
        self.bandtable = bandtable
        self.reference: np.ndarray | None = None

    def observe(self, state: "StateVector") -> PositionMoments:
        moments = position_moments(state, self.bandtable, self.reference)
        if self.reference is not None:
            drift = np.abs(moments.reduced_mean - self.reference)
            limit = self.bandtable.L / 4.0
            if np.any(drift > limit):
                raise WraparoundError(
                    f"packet moved {drift.max():.2f} cells between samples, more than a quarter "
                    f"of the {self.bandtable.L}x{self.bandtable.L} supercell"
                )
        self.reference = moments.reduced_mean
        return moments

    def locate(self, state: "StateVector") -> np.ndarray:
        return self.observe(state).mean


def mean_velocity(state: "StateVector", bandtable: BandTable) -> np.ndarray:
    """Σ |b_{k,m}|² v_{k,m} for the normalized state, in Å/ps."""
    weights = (state.amplitudes * state.amplitudes.conj()).real
    return np.einsum("mij,mijd->d", weights, bandtable.velocities) / weights.sum()


# --- linear fits ----------------------------------------------------------


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    slope_err: float
    intercept_err: float
    r2: float


def fit_line(x: np.ndarray, y: np.ndarray, errors: np.ndarray | None = None) -> LineFit:
    """Least-squares line, weighted by 1/σ² when every σ is positive.

    Weighted fits report the parameter errors implied by σ; unweighted fits
    report the residual-based errors.
    """

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    weighted = errors is not None and np.all(np.asarray(errors) > 0)
    w = 1.0 / np.asarray(errors, dtype=float) ** 2 if weighted else np.ones_like(x)

    model = LinearRegression()
    model.fit(x[:, None], y, sample_weight=w)
    slope, intercept = float(model.coef_[0]), float(model.intercept_)
    r2 = float(model.score(x[:, None], y, sample_weight=w)) if np.ptp(y) > 0 else 1.0

    x_bar = np.sum(w * x) / np.sum(w)
    sxx = float(np.sum(w * (x - x_bar) ** 2))
    if weighted:
        scale = 1.0
    elif x.size > 2:
        residuals = y - (slope * x + intercept)
        scale = float(np.sum(residuals**2)) / (x.size - 2)
    else:
        scale = 0.0
    slope_err = math.sqrt(scale / sxx)
    intercept_err = math.sqrt(scale * float(np.sum(w * x * x)) / (float(np.sum(w)) * sxx))
    return LineFit(slope=slope, intercept=intercept, slope_err=slope_err, intercept_err=intercept_err, r2=r2)


# --- MSD ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MsdCurve:
    """Ensemble MSD; columns of ``msd`` and ``errors`` are xx, yy, xy."""

    times: np.ndarray
    msd: np.ndarray
    errors: np.ndarray
    n_traj: int

    @property
    def msd_xx(self) -> np.ndarray:
        return self.msd[:, 0]

    @property
    def msd_yy(self) -> np.ndarray:
        return self.msd[:, 1]

    @property
    def msd_xy(self) -> np.ndarray:
        return self.msd[:, 2]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t_ps": self.times,
                "msd_xx_A2": self.msd[:, 0],
                "msd_yy_A2": self.msd[:, 1],
                "msd_xy_A2": self.msd[:, 2],
                "err_xx_A2": self.errors[:, 0],
                "err_yy_A2": self.errors[:, 1],
                "err_xy_A2": self.errors[:, 2],
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, n_traj: int) -> "MsdCurve":
        return cls(
            times=frame["t_ps"].to_numpy(dtype=float),
            msd=frame[["msd_xx_A2", "msd_yy_A2", "msd_xy_A2"]].to_numpy(dtype=float),
            errors=frame[["err_xx_A2", "err_yy_A2", "err_xy_A2"]].to_numpy(dtype=float),
            n_traj=n_traj,
        )


def _common_times(records: Sequence["TrajectoryRecord"]) -> np.ndarray:
    if len(records) < 2:
        raise InvalidInputError(f"need at least 2 trajectories, got {len(records)}")
    times = records[0].times
    for record in records[1:]:
        if record.times.shape != times.shape or not np.allclose(record.times, times, rtol=0, atol=1e-9):
            raise InvalidInputError(f"trajectory {record.seed} is sampled on a different time grid")
    return times


def _bootstrap_mean(per_traj: np.ndarray, n_bootstrap: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean and bootstrap standard error over the leading axis."""

    n = per_traj.shape[0]
    rng = np.random.default_rng(seed)
    counts = np.stack([np.bincount(rng.integers(0, n, size=n), minlength=n) for _ in range(n_bootstrap)])
    flat = per_traj.reshape(n, -1)
    resampled = counts @ flat / n
    mean = flat.mean(axis=0)
    error = resampled.std(axis=0, ddof=1) if n_bootstrap > 1 else np.zeros_like(mean)
    return mean.reshape(per_traj.shape[1:]), error.reshape(per_traj.shape[1:])


def msd_curve(
    records: Sequence["TrajectoryRecord"],
    *,
    n_bootstrap: int = N_BOOTSTRAP,
    seed: int = 0,
) -> MsdCurve:
    """Mean over trajectories of <(x_α - <x_α>₀)(x_β - <x_β>₀)>(t)."""

    times = _common_times(records)
    per_traj = np.empty((len(records), times.size, 3))
    for i, record in enumerate(records):
        x, y = record.positions[:, 0], record.positions[:, 1]
        x0, y0 = record.positions[0]
        xx, yy, xy = record.second_moments.T
        per_traj[i, :, 0] = xx - 2.0 * x0 * x + x0 * x0
        per_traj[i, :, 1] = yy - 2.0 * y0 * y + y0 * y0
        per_traj[i, :, 2] = xy - x0 * y - y0 * x + x0 * y0
    mean, error = _bootstrap_mean(per_traj, n_bootstrap, seed)
    return MsdCurve(times=times, msd=mean, errors=error, n_traj=len(records))


def semiclassical_msd_curve(
    records: Sequence["TrajectoryRecord"],
    *,
    n_bootstrap: int = N_BOOTSTRAP,
    seed: int = 0,
) -> MsdCurve:
    """MSD of the displacement obtained by integrating the band group velocity."""

    times = _common_times(records)
    per_traj = np.empty((len(records), times.size, 3))
    for i, record in enumerate(records):
        d = record.drift - record.drift[0]
        per_traj[i] = np.column_stack([d[:, 0] ** 2, d[:, 1] ** 2, d[:, 0] * d[:, 1]])
    mean, error = _bootstrap_mean(per_traj, n_bootstrap, seed)
    return MsdCurve(times=times, msd=mean, errors=error, n_traj=len(records))


# --- diffusion ------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionResult:
    """Diffusion tensor in Å²/ps."""

    D_xx: float
    D_yy: float
    D_xy: float
    err_xx: float
    err_yy: float
    err_xy: float
    fit_window: tuple[float, float]
    T: float = math.nan
    gamma: float = math.nan

    @property
    def D(self) -> float:
        return 0.5 * (self.D_xx + self.D_yy)

    @property
    def err(self) -> float:
        return 0.5 * math.hypot(self.err_xx, self.err_yy)

    @property
    def isotropic(self) -> bool:
        combined = math.hypot(self.err_xx, self.err_yy)
        return abs(self.D_xy) < 0.05 * abs(self.D_xx) and abs(self.D_xx - self.D_yy) <= 3.0 * combined

    def to_dict(self) -> dict[str, Any]:
        return {
            "T_K": self.T,
            "gamma": self.gamma,
            "D_xx_A2_per_ps": self.D_xx,
            "D_yy_A2_per_ps": self.D_yy,
            "D_xy_A2_per_ps": self.D_xy,
            "err_xx_A2_per_ps": self.err_xx,
            "err_yy_A2_per_ps": self.err_yy,
            "err_xy_A2_per_ps": self.err_xy,
            "D_A2_per_s": self.D * A2_PER_PS_TO_A2_PER_S,
            "err_A2_per_s": self.err * A2_PER_PS_TO_A2_PER_S,
            "fit_window_ps": list(self.fit_window),
            "isotropic": self.isotropic,
        }


def default_window(msd: MsdCurve, mean_jump_time: float | None) -> tuple[float, float]:
    """Skip 10 mean jump times, or the first half of the curve when the jump time is unknown."""
    end = float(msd.times[-1])
    if mean_jump_time is None or not math.isfinite(mean_jump_time):
        return 0.5 * end, end
    return TRANSIENT_JUMP_TIMES * mean_jump_time, end


def diffusion_coefficient(
    msd: MsdCurve,
    window: tuple[float, float] | None = None,
    *,
    mean_jump_time: float | None = None,
    T: float = math.nan,
    gamma: float = math.nan,
) -> DiffusionResult:
    window = window or default_window(msd, mean_jump_time)
    start, end = window
    if start < msd.times[0] - 1e-12 or end > msd.times[-1] + 1e-12 or start >= end:
        raise InvalidWindowError(
            f"fit window ({start:g}, {end:g}) ps lies outside the data ({msd.times[0]:g}, {msd.times[-1]:g}) ps"
        )
    inside = (msd.times >= start - 1e-12) & (msd.times <= end + 1e-12)
    if int(inside.sum()) < MIN_WINDOW_POINTS:
        raise InvalidWindowError(
            f"fit window ({start:g}, {end:g}) ps holds {int(inside.sum())} points, need {MIN_WINDOW_POINTS}"
        )

    fits = [fit_line(msd.times[inside], msd.msd[inside, c], msd.errors[inside, c]) for c in range(3)]
    result = DiffusionResult(
        D_xx=fits[0].slope / 2.0,
        D_yy=fits[1].slope / 2.0,
        D_xy=fits[2].slope / 2.0,
        err_xx=fits[0].slope_err / 2.0,
        err_yy=fits[1].slope_err / 2.0,
        err_xy=fits[2].slope_err / 2.0,
        fit_window=(float(start), float(end)),
        T=T,
        gamma=gamma,
    )
    if not result.isotropic:
        logger.warning(
            "diffusion tensor is not isotropic: D_xx=%.4g D_yy=%.4g D_xy=%.4g A2/ps",
            result.D_xx,
            result.D_yy,
            result.D_xy,
        )
    return result


@dataclass(frozen=True)
class ArrheniusFit:
    E_a: float
    E_a_err: float
    D0: float
    D0_err: float
    residuals: list[float]
    temperature_range: tuple[float, float]
    gamma: float
    n_points: int

    def reference_comparison(self) -> dict[str, dict[str, float]]:
        return {
            name: {
                "E_a_meV": reference["E_a_meV"],
                "D0_A2_per_s": reference["D0_A2_per_s"],
                "E_a_ratio": self.E_a / reference["E_a_meV"],
                "D0_ratio": self.D0 / reference["D0_A2_per_s"],
            }
            for name, reference in (("measured", MEASURED_ACTIVATION), ("published_simulation", PUBLISHED_ACTIVATION))
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "gamma": self.gamma,
            "E_a_meV": self.E_a,
            "E_a_err_meV": self.E_a_err,
            "D0_A2_per_s": self.D0,
            "D0_err_A2_per_s": self.D0_err,
            "residuals_lnD": list(self.residuals),
            "T_range_K": list(self.temperature_range),
            "n_points": self.n_points,
            "reference_comparison": self.reference_comparison(),
        }


def _check_positive(results: Sequence[DiffusionResult]) -> None:
    for result in results:
        if not result.D > 0:
            raise InvalidInputError(f"D must be positive for a log fit, got {result.D:g} at T={result.T:g} K")


def arrhenius_fit(results: Sequence[DiffusionResult], *, min_points: int = 4) -> ArrheniusFit:
    """ln D against 1/k_BT; E_a is minus the slope, D0 the exponentiated intercept."""

    temperatures = sorted({r.T for r in results})
    if len(temperatures) < min_points:
        raise InvalidInputError(f"Arrhenius fit needs {min_points} temperatures, got {len(temperatures)}")
    gammas = {round(r.gamma, 12) for r in results}
    if len(gammas) > 1:
        raise InvalidInputError(f"Arrhenius fit mixes gamma values {sorted(gammas)}")
    _check_positive(results)

    beta = np.array([1.0 / (BOLTZMANN_MEV_K * r.T) for r in results])
    log_d = np.log([r.D for r in results])
    errors = np.array([r.err / r.D for r in results])
    line = fit_line(beta, log_d, errors)
    d0 = math.exp(line.intercept) * A2_PER_PS_TO_A2_PER_S
    return ArrheniusFit(
        E_a=-line.slope,
        E_a_err=line.slope_err,
        D0=d0,
        D0_err=d0 * line.intercept_err,
        residuals=[float(v) for v in log_d - (line.slope * beta + line.intercept)],
        temperature_range=(temperatures[0], temperatures[-1]),
        gamma=results[0].gamma,
        n_points=len(results),
    )


@dataclass(frozen=True)
class GammaScan:
    exponent: float
    exponent_err: float
    prefactor: float
    T: float
    n_points: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "T_K": self.T,
            "exponent": self.exponent,
            "exponent_err": self.exponent_err,
            "prefactor_A2_per_s": self.prefactor,
            "n_points": self.n_points,
        }


def gamma_scan(results: Sequence[DiffusionResult], *, min_points: int = 3) -> GammaScan:
    """Power-law exponent of D against γ at one temperature."""

    gammas = sorted({r.gamma for r in results})
    if len(gammas) < min_points:
        raise InvalidInputError(f"gamma scan needs {min_points} gamma values, got {len(gammas)}")
    temperatures = {round(r.T, 9) for r in results}
    if len(temperatures) > 1:
        raise InvalidInputError(f"gamma scan mixes temperatures {sorted(temperatures)}")
    _check_positive(results)

    log_gamma = np.log([r.gamma for r in results])
    log_d = np.log([r.D for r in results])
    line = fit_line(log_gamma, log_d, np.array([r.err / r.D for r in results]))
    return GammaScan(
        exponent=line.slope,
        exponent_err=line.slope_err,
        prefactor=math.exp(line.intercept) * A2_PER_PS_TO_A2_PER_S,
        T=results[0].T,
        n_points=len(results),
    )


# --- tunnelling and event statistics ----------------------------------------


@dataclass(frozen=True)
class TunnellingHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    lengths: np.ndarray
    decay_length: float | None = None
    decay_length_err: float | None = None
    tail_r2: float | None = None
    tail_monotone: bool | None = None

    @property
    def is_empty(self) -> bool:
        return self.lengths.size == 0

    @property
    def probabilities(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else self.counts.astype(float)

    @classmethod
    def empty(cls) -> "TunnellingHistogram":
        return cls(bin_edges=np.zeros(1), counts=np.zeros(0, dtype=int), lengths=np.zeros(0))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "l_min_A": self.bin_edges[:-1],
                "l_max_A": self.bin_edges[1:],
                "count": self.counts,
                "probability": self.probabilities,
            }
        )

    def summary(self) -> dict[str, Any]:
        return {
            "empty": self.is_empty,
            "n_intervals": int(self.lengths.size),
            "mean_length_A": float(self.lengths.mean()) if self.lengths.size else None,
            "decay_length_A": self.decay_length,
            "decay_length_err_A": self.decay_length_err,
            "tail_r2": self.tail_r2,
            "tail_monotone": self.tail_monotone,
        }


def _group_timeline(record: "TrajectoryRecord | JumpHistory") -> list[tuple[float, int, Any]]:
    """(time, group entered, event) transitions, starting with the initial group."""

    group = record.initial_group
    timeline: list[tuple[float, int, Any]] = [(0.0, group, None)]
    for event in record.jumps:
        if event.kind == "up":
            group = 1
        elif event.kind == "down":
            group = 0
        timeline.append((event.time, group, event))
    return timeline


def upper_band_flights(
    record: "TrajectoryRecord | JumpHistory",
    interval: Literal["group", "collision"] = "group",
) -> list[float]:
    """Distances covered while in the upper group.

    ``group`` intervals run from an excitation to the next de-excitation;
    ``collision`` intervals also end (and restart) at every collision inside
    the upper group. Intervals still open at the end of the record are dropped.
    """

    lengths: list[float] = []
    entry: np.ndarray | None = None
    for _, group, event in _group_timeline(record)[1:]:
        position = np.asarray(event.pre_jump_position)
        if entry is not None and (event.kind == "down" or interval == "collision"):
            lengths.append(float(np.linalg.norm(position - entry)))
            entry = None
        if group == 1 and (event.kind == "up" or interval == "collision"):
            entry = position
    return lengths


def tunnelling_lengths(
    records: Sequence["TrajectoryRecord | JumpHistory"],
    site_separation: float,
    *,
    interval: Literal["group", "collision"] = "group",
) -> TunnellingHistogram:
    """Histogram of upper-group flight lengths with bins of half a site separation.

    Bins beyond two site separations are fitted with an exponential whose
    decay length is reported together with the fit R² and whether the tail
    decreases monotonically.
    """

    lengths = np.array([ell for record in records for ell in upper_band_flights(record, interval)])
    if lengths.size == 0:
        return TunnellingHistogram.empty()

    bin_width = site_separation / 2.0
    n_bins = int(math.floor(lengths.max() / bin_width)) + 1
    edges = np.arange(n_bins + 1) * bin_width
    counts = np.histogram(lengths, bins=edges)[0]
    histogram = TunnellingHistogram(bin_edges=edges, counts=counts, lengths=lengths)

    centers = 0.5 * (edges[:-1] + edges[1:])
    tail = (centers > 2.0 * site_separation) & (counts > 0)
    if int(tail.sum()) < 3:
        return histogram
    last = int(np.nonzero(counts)[0][-1])
    tail_range = (centers > 2.0 * site_separation) & (np.arange(n_bins) <= last)
    probabilities = histogram.probabilities
    line = fit_line(centers[tail], np.log(probabilities[tail]), 1.0 / np.sqrt(counts[tail]))
    decay = -1.0 / line.slope if line.slope < 0 else math.inf
    return TunnellingHistogram(
        bin_edges=edges,
        counts=counts,
        lengths=lengths,
        decay_length=decay,
        decay_length_err=line.slope_err / line.slope**2 if line.slope != 0 else math.inf,
        tail_r2=line.r2,
        tail_monotone=bool(np.all(np.diff(probabilities[tail_range]) < 0)),
    )


def trajectory_trace(record: "TrajectoryRecord") -> pd.DataFrame:
    """Plot-ready <r>(t) polyline with the jumps interleaved as tagged rows."""

    samples = pd.DataFrame(
        {
            "t_ps": record.times,
            "x_A": record.positions[:, 0],
            "y_A": record.positions[:, 1],
            "kind": "sample",
            "source_branch": -1,
            "target_branch": -1,
        }
    )
    events = pd.DataFrame(
        {
            "t_ps": [e.time for e in record.jumps],
            "x_A": [e.pre_jump_position[0] for e in record.jumps],
            "y_A": [e.pre_jump_position[1] for e in record.jumps],
            "kind": [e.kind for e in record.jumps],
            "source_branch": [e.source_branch for e in record.jumps],
            "target_branch": [e.target_branch for e in record.jumps],
        }
    )
    frames = [samples, events] if record.jumps else [samples]
    trace = pd.concat(frames, ignore_index=True)
    return trace.sort_values("t_ps", kind="stable").reset_index(drop=True)


@dataclass(frozen=True)
class ResidenceStatistics:
    upper_fraction: float
    mean_lower_dwell_ps: float
    excitations_per_ps: float
    intra_collisions_per_flight: float
    n_trajectories: int
    total_time_ps: float
    event_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "upper_fraction": self.upper_fraction,
            "mean_lower_dwell_ps": self.mean_lower_dwell_ps,
            "excitations_per_ps": self.excitations_per_ps,
            "intra_collisions_per_flight": self.intra_collisions_per_flight,
            "n_trajectories": self.n_trajectories,
            "total_time_ps": self.total_time_ps,
            "event_counts": dict(self.event_counts),
        }


def residence_statistics(records: Sequence["TrajectoryRecord | JumpHistory"]) -> ResidenceStatistics:
    """How trajectories share their time between the lower and upper groups."""

    upper_time = total_time = 0.0
    lower_dwells: list[float] = []
    flights = 0
    upper_intra = 0
    counts = {"intra": 0, "up": 0, "down": 0}
    for record in records:
        timeline = _group_timeline(record) + [(record.final_time, -1, None)]
        for (start, group, _), (end, _, following) in zip(timeline[:-1], timeline[1:]):
            if group == 1:
                upper_time += end - start
            if following is None:
                continue
            counts[following.kind] += 1
            if following.kind == "up":
                flights += 1
            if following.kind == "intra" and group == 1:
                upper_intra += 1
        # completed lower-group stays: from entering the lower group to the next excitation
        entered = 0.0 if timeline[0][1] == 0 else None
        for time, group, event in timeline[1:-1]:
            if event.kind == "up" and entered is not None:
                lower_dwells.append(time - entered)
                entered = None
            elif event.kind == "down":
                entered = time
        total_time += record.final_time

    return ResidenceStatistics(
        upper_fraction=upper_time / total_time if total_time > 0 else 0.0,
        mean_lower_dwell_ps=float(np.mean(lower_dwells)) if lower_dwells else math.inf,
        excitations_per_ps=flights / total_time if total_time > 0 else 0.0,
        intra_collisions_per_flight=upper_intra / flights if flights else 0.0,
        n_trajectories=len(records),
        total_time_ps=total_time,
        event_counts=counts,
    )


__all__ = [
    "ArrheniusFit",
    "DiffusionResult",
    "GammaScan",
    "LineFit",
    "MsdCurve",
    "PositionMoments",
    "PositionTracker",
    "ResidenceStatistics",
    "TunnellingHistogram",
    "arrhenius_fit",
    "default_window",
    "diffusion_coefficient",
    "fit_line",
    "gamma_scan",
    "mean_velocity",
    "msd_curve",
    "position_moments",
    "residence_statistics",
    "semiclassical_msd_curve",
    "site_probabilities",
    "trajectory_trace",
    "tunnelling_lengths",
    "upper_band_flights",
]
