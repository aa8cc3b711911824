"""Quantum-jump propagation of the adatom wave function in the Bloch basis.

The non-Hermitian Hamiltonian is diagonal in the Bloch basis once the
collision operators are summed over momentum transfer, so coherent evolution
between jumps is an exact phase rotation with a per-branch decay. A jump
``(m1, m2, q)`` moves the content of branch ``m2`` to branch ``m1`` shifted by
``q`` and discards every other branch.

State amplitudes are stored as ``b[m, n1, n2]`` for k = (n1 b1 + n2 b2) / L.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Sequence

import numpy as np
import pandas as pd
from scipy import optimize

from .bands import BandTable
from .constants import BOLTZMANN_MEV_K, HBAR_MEV_PS
from .errors import InvalidArgumentError, InvalidJumpError, StepSizeError
from .observables import PositionTracker, mean_velocity

logger = logging.getLogger(__name__)

JumpKind = Literal["intra", "up", "down"]
Locator = Callable[["StateVector"], np.ndarray]

MAX_STEP_PROBABILITY = 0.1
LOWER, UPPER = 0, 1
GROUP_LABELS = ("A", "E")


@dataclass
class StateVector:
    amplitudes: np.ndarray
    time: float = 0.0

    @property
    def n_branches(self) -> int:
        return int(self.amplitudes.shape[0])

    @property
    def L(self) -> int:
        return int(self.amplitudes.shape[1])

    def norm2(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def occupations(self) -> np.ndarray:
        """Unnormalized branch weights Σ_k |b_{k,m}|²."""
        return np.einsum("mij,mij->m", self.amplitudes.conj(), self.amplitudes).real

    def group_occupations(self, bandtable: BandTable) -> np.ndarray:
        weights = self.occupations() / self.norm2()
        return np.array([weights[list(bandtable.lower)].sum(), weights[list(bandtable.upper)].sum()])

    def normalized(self) -> "StateVector":
        return StateVector(self.amplitudes / math.sqrt(self.norm2()), self.time)

    def copy(self) -> "StateVector":
        return StateVector(self.amplitudes.copy(), self.time)


def bose_occupation(energy: float, T: float) -> float:
    """n = 1 / (exp(E / k_B T) - 1), stable for E >> k_B T."""

    if not T > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {T}")
    x = energy / (BOLTZMANN_MEV_K * T)
    return float(np.exp(-x) / -np.expm1(-x))


def gamma_to_rate(gamma: float, upper_width: float) -> float:
    """Γ (1/ps) from γ = ħΓ/Δ_E."""
    return gamma * upper_width / HBAR_MEV_PS


def rate_to_gamma(Gamma: float, upper_width: float) -> float:
    return HBAR_MEV_PS * Gamma / upper_width


@dataclass(frozen=True, eq=False)
class RateModel:
    """Thermal collision rates between the two composite groups.

    ``channel_rates[(target, source)]`` holds Γ̃ per group pair. A single
    channel (m1, m2, q) carries Γ̃ / (N_q N_A), N_A the size of the lower
    group, so ``branch_rates[m1, m2]`` (summed over q) is Γ̃ / N_A and the
    decay rate of branch m2 is the column sum.
    """

    Gamma: float
    gamma: float
    T: float
    gap: float
    upper_width: float
    n_bose: float
    channel_rates: dict[tuple[str, str], float]
    group_of: np.ndarray
    groups: tuple[tuple[int, ...], tuple[int, ...]]
    n_q: int
    branch_rates: np.ndarray = field(repr=False)

    @property
    def decay_rates(self) -> np.ndarray:
        return self.branch_rates.sum(axis=0)

    @property
    def group_rates(self) -> np.ndarray:
        """Out-rates [target group, source branch] summed over targets in the group."""
        return np.stack([self.branch_rates[list(branches)].sum(axis=0) for branches in self.groups])

    def channel_rate(self, target: int, source: int) -> float:
        """Γ_μ of one (m1, m2, q) channel."""
        return float(self.branch_rates[target, source]) / self.n_q

    @property
    def equilibrium_upper_fraction(self) -> float:
        lower, upper = (len(g) for g in self.groups)
        boltzmann = math.exp(-self.gap / (BOLTZMANN_MEV_K * self.T))
        return upper * boltzmann / (lower + upper * boltzmann)

    @property
    def mean_jump_time(self) -> float:
        """1/R of the lower group, the dominant population at low temperature."""
        rate = float(self.decay_rates[self.groups[LOWER][0]])
        return math.inf if rate == 0 else 1.0 / rate

    def summary(self) -> dict[str, Any]:
        return {
            "T_K": self.T,
            "Gamma_per_ps": self.Gamma,
            "gamma": self.gamma,
            "n_bose": self.n_bose,
            "rate_up_per_ps": self.channel_rates[("E", "A")],
            "rate_down_per_ps": self.channel_rates[("A", "E")],
            "decay_rates_per_ps": [float(r) for r in self.decay_rates],
            "equilibrium_upper_fraction": self.equilibrium_upper_fraction,
        }


def channel_rates(Gamma: float, T: float, bandtable: BandTable) -> RateModel:
    if not Gamma >= 0:
        raise InvalidArgumentError(f"Gamma must be non-negative, got {Gamma}")
    n = bose_occupation(bandtable.gap, T)
    pair_rates = {
        ("A", "A"): Gamma,
        ("E", "E"): Gamma,
        ("E", "A"): Gamma * n,
        ("A", "E"): Gamma * (n + 1.0),
    }
    groups = (tuple(bandtable.lower), tuple(bandtable.upper))
    group_of = np.array(bandtable.group_of)
    labels = np.array(GROUP_LABELS)[group_of]
    lower_size = len(groups[LOWER])
    branch_rates = np.array(
        [[pair_rates[(target, source)] / lower_size for source in labels] for target in labels]
    )
    return RateModel(
        Gamma=float(Gamma),
        gamma=rate_to_gamma(Gamma, bandtable.upper_width),
        T=float(T),
        gap=bandtable.gap,
        upper_width=bandtable.upper_width,
        n_bose=n,
        channel_rates=pair_rates,
        group_of=group_of,
        groups=groups,
        n_q=bandtable.L * bandtable.L,
        branch_rates=branch_rates,
    )


@dataclass(frozen=True)
class JumpEvent:
    time: float
    source_branch: int
    target_branch: int
    q: tuple[int, int]
    kind: JumpKind
    pre_jump_position: tuple[float, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "time_ps": self.time,
            "source_branch": self.source_branch,
            "target_branch": self.target_branch,
            "q": list(self.q),
            "kind": self.kind,
            "pre_jump_position_A": list(self.pre_jump_position),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "JumpEvent":
        return cls(
            time=float(payload["time_ps"]),
            source_branch=int(payload["source_branch"]),
            target_branch=int(payload["target_branch"]),
            q=(int(payload["q"][0]), int(payload["q"][1])),
            kind=payload["kind"],
            pre_jump_position=(float(payload["pre_jump_position_A"][0]), float(payload["pre_jump_position_A"][1])),
        )


@dataclass(frozen=True)
class JumpHistory:
    """The event part of a trajectory, as persisted in ``traj_meta.json``."""

    seed: int
    final_time: float
    initial_group: int
    jumps: tuple[JumpEvent, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "final_time_ps": self.final_time,
            "initial_group": GROUP_LABELS[self.initial_group],
            "jumps": [event.to_dict() for event in self.jumps],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "JumpHistory":
        return cls(
            seed=int(payload["seed"]),
            final_time=float(payload["final_time_ps"]),
            initial_group=GROUP_LABELS.index(payload["initial_group"]),
            jumps=tuple(JumpEvent.from_dict(event) for event in payload["jumps"]),
        )


def jump_kind(rates: RateModel, source: int, target: int) -> JumpKind:
    source_group, target_group = rates.group_of[source], rates.group_of[target]
    if source_group == target_group:
        return "intra"
    return "up" if target_group == UPPER else "down"


@dataclass(frozen=True)
class JumpProbabilities:
    """δp per (target branch, source branch), summed over q."""

    per_channel: np.ndarray
    total: float

    def by_kind(self, rates: RateModel) -> dict[str, float]:
        totals = {"intra": 0.0, "up": 0.0, "down": 0.0}
        for target, source in np.ndindex(self.per_channel.shape):
            totals[jump_kind(rates, source, target)] += float(self.per_channel[target, source])
        return totals


def jump_probabilities(state: StateVector, rates: RateModel, dt: float) -> JumpProbabilities:
    if not dt > 0:
        raise InvalidArgumentError(f"time step must be positive, got {dt}")
    per_channel = rates.branch_rates * state.occupations()[None, :] * dt
    total = float(per_channel.sum())
    if total > MAX_STEP_PROBABILITY:
        raise StepSizeError(f"jump probability {total:.3g} exceeds {MAX_STEP_PROBABILITY}; shrink dt", total)
    return JumpProbabilities(per_channel=per_channel, total=total)


def evolve_coherent(
    state: StateVector,
    rates: RateModel,
    bandtable: BandTable,
    t: float,
    renormalize: bool = False,
) -> StateVector:
    if t < 0:
        raise InvalidArgumentError(f"evolution time must be non-negative, got {t}")
    if t == 0:
        return state.copy()
    decay = np.exp(-0.5 * rates.decay_rates * t)[:, None, None]
    amplitudes = state.amplitudes * np.exp(-1j * bandtable.energies * (t / HBAR_MEV_PS)) * decay
    evolved = StateVector(amplitudes, state.time + t)
    return evolved.normalized() if renormalize else evolved


def collapse(state: StateVector, source: int, target: int, q: Sequence[int]) -> StateVector:
    """b'_{k+q, target} = b_{k, source}, every other branch emptied, renormalized."""

    weight = float(np.vdot(state.amplitudes[source], state.amplitudes[source]).real)
    if weight <= 0:
        raise InvalidJumpError(f"branch {source} is empty; channel {source}->{target} cannot fire")
    amplitudes = np.zeros_like(state.amplitudes)
    amplitudes[target] = np.roll(state.amplitudes[source], shift=(int(q[0]), int(q[1])), axis=(-2, -1))
    return StateVector(amplitudes / math.sqrt(weight), state.time)


def apply_jump(
    state: StateVector,
    rates: RateModel,
    source: int,
    target_group: int,
    rng: np.random.Generator,
    *,
    locate: Locator | None = None,
) -> tuple[StateVector, JumpEvent]:
    """Fire a channel out of ``source`` into a random branch of ``target_group`` with random q."""

    branches = rates.groups[target_group]
    target = int(branches[rng.integers(len(branches))])
    q = tuple(int(v) for v in rng.integers(state.L, size=2))
    position = (0.0, 0.0) if locate is None else tuple(float(x) for x in locate(state))
    jumped = collapse(state, source, target, q)
    event = JumpEvent(
        time=state.time,
        source_branch=int(source),
        target_branch=target,
        q=q,
        kind=jump_kind(rates, source, target),
        pre_jump_position=position,
    )
    return jumped, event


def _select_channel(state: StateVector, rates: RateModel, rng: np.random.Generator) -> tuple[int, int]:
    """Draw (source branch, target group) with probability ∝ its aggregated δp."""

    weights = rates.group_rates * state.occupations()[None, :]
    cumulative = np.cumsum(weights.ravel())
    pick = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    target_group, source = np.unravel_index(min(pick, cumulative.size - 1), weights.shape)
    return int(source), int(target_group)


def suggest_fixed_dt(rates: RateModel, bandtable: BandTable, max_probability: float = 0.01, max_phase: float = 0.3) -> float:
    """Largest dt with R_max dt <= max_probability and a bounded relative phase per step."""

    spread = float(bandtable.energies.max() - bandtable.energies.min())
    limits = [max_phase * HBAR_MEV_PS / spread if spread > 0 else math.inf]
    if rates.decay_rates.max() > 0:
        limits.append(max_probability / float(rates.decay_rates.max()))
    dt = min(limits)
    if not math.isfinite(dt):
        raise InvalidArgumentError("no finite step size: zero rates and a flat band table")
    return dt


def step_fixed(
    state: StateVector,
    rates: RateModel,
    bandtable: BandTable,
    dt: float,
    rng: np.random.Generator,
    *,
    locate: Locator | None = None,
) -> tuple[StateVector, JumpEvent | None]:
    """One first-order quantum-jump step of length ``dt``."""

    probabilities = jump_probabilities(state, rates, dt)
    if rng.random() < probabilities.total:
        source, target_group = _select_channel(state, rates, rng)
        jumped, event = apply_jump(state, rates, source, target_group, rng, locate=locate)
        jumped.time = state.time + dt
        return jumped, event
    return evolve_coherent(state, rates, bandtable, dt, renormalize=True), None


@dataclass(frozen=True)
class EventStep:
    dwell_time: float
    state: StateVector
    event: JumpEvent | None


def waiting_time(occupations: np.ndarray, decay_rates: np.ndarray, u: float) -> float:
    """Solve Σ_m P_m exp(-R_m t) = u for t, with Σ P_m = 1."""

    if u >= 1.0:
        return 0.0
    occupied = occupations > 0
    active = decay_rates[occupied]
    if np.any(active <= 0):
        floor = float(occupations[occupied][active <= 0].sum())
        if u <= floor:
            return math.inf
    log_u = math.log(1.0 / u)
    if np.ptp(active) == 0:
        return log_u / float(active[0])

    def excess(t: float) -> float:
        return float(np.sum(occupations * np.exp(-decay_rates * t))) - u

    low = log_u / float(active.max())
    # roundoff in the occupations can push the root below the bracket
    if excess(low) <= 0:
        return low
    high = log_u / float(active[active > 0].min())
    while excess(high) > 0:
        high *= 2.0
    return optimize.bisect(excess, low, high, xtol=1e-300, rtol=1e-12, maxiter=500)


def step_event_driven(
    state: StateVector,
    rates: RateModel,
    bandtable: BandTable,
    rng: np.random.Generator,
    *,
    horizon: float = math.inf,
    locate: Locator | None = None,
) -> EventStep:
    """Sample the next jump from the exact norm-decay law.

    If the sampled dwell exceeds ``horizon`` the state is evolved to the
    horizon, renormalized, and no event is returned.
    """

    if not rates.Gamma > 0:
        raise InvalidArgumentError("event-driven stepping needs Gamma > 0")
    u = 1.0 - rng.random()
    occupations = state.occupations() / state.norm2()
    dwell = waiting_time(occupations, rates.decay_rates, u)
    if dwell > horizon:
        evolved = evolve_coherent(state, rates, bandtable, horizon, renormalize=True)
        return EventStep(dwell_time=horizon, state=evolved, event=None)

    evolved = evolve_coherent(state, rates, bandtable, dwell).normalized()
    source, target_group = _select_channel(evolved, rates, rng)
    jumped, event = apply_jump(evolved, rates, source, target_group, rng, locate=locate)
    return EventStep(dwell_time=dwell, state=jumped, event=event)


def prepare_initial_state(
    bandtable: BandTable,
    mode: Literal["ground-packet", "thermal"],
    rng: np.random.Generator,
    *,
    T: float | None = None,
) -> StateVector:
    """Gaussian packet in k, centered on a random k0 and confined to one branch.

    The packet width in k is a quarter of the zone radius and the phase is
    uniform, so the site-basis packet sits on the origin cell.
    """

    if mode == "ground-packet":
        group = LOWER
    elif mode == "thermal":
        if T is None or not T > 0:
            raise InvalidArgumentError("thermal initial states need a positive temperature")
        centers = [float(np.mean(bandtable.centers[list(branches)])) for branches in (bandtable.lower, bandtable.upper)]
        weights = np.array(
            [len(branches) * math.exp(-(c - centers[0]) / (BOLTZMANN_MEV_K * T)) for branches, c in zip((bandtable.lower, bandtable.upper), centers)]
        )
        group = int(rng.random() * weights.sum() >= weights[0])
    else:
        raise InvalidArgumentError(f"unknown initial-state mode {mode!r}")

    branches = (bandtable.lower, bandtable.upper)[group]
    branch = int(branches[rng.integers(len(branches))])
    kgrid = bandtable.kgrid
    k0 = rng.random(2) @ bandtable.lattice.reciprocal
    width = bandtable.lattice.bz_radius / 4.0

    # minimal-image distance on the reciprocal torus
    images = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)]) @ bandtable.lattice.reciprocal
    delta = kgrid.k_points[..., None, :] - k0 + images
    distance2 = np.min(np.sum(delta * delta, axis=-1), axis=-1)

    amplitudes = np.zeros((bandtable.n_branches, kgrid.L, kgrid.L), dtype=complex)
    amplitudes[branch] = np.exp(-distance2 / (4.0 * width * width) + 2j * math.pi * rng.random())
    return StateVector(amplitudes).normalized()


def trajectory_rng(master_seed: int, index: int) -> tuple[int, np.random.Generator]:
    """Stream for trajectory ``index``: a Philox generator keyed on (master_seed, index)."""

    sequence = np.random.SeedSequence(master_seed, spawn_key=(index,))
    seed = int(sequence.generate_state(1, np.uint64)[0])
    return seed, np.random.Generator(np.random.Philox(seed))


@dataclass
class Segment:
    state: StateVector
    jumps: list[JumpEvent]
    drift: np.ndarray


def propagate(
    state: StateVector,
    rates: RateModel,
    bandtable: BandTable,
    t_end: float,
    rng: np.random.Generator,
    *,
    mode: Literal["fixed", "event"] = "event",
    dt: float | None = None,
    locate: Locator | None = None,
) -> Segment:
    """Advance ``state`` to exactly ``t_end`` and collect the jumps on the way.

    ``drift`` integrates the band group velocity over the segment. Between
    jumps the state occupies a single branch, so the mean velocity only
    changes at jumps.
    """

    jumps: list[JumpEvent] = []
    drift = np.zeros(2)
    velocity = mean_velocity(state, bandtable)
    span = t_end - state.time
    if span <= 0:
        return Segment(state, jumps, drift)

    if rates.Gamma == 0:
        evolved = evolve_coherent(state, rates, bandtable, span, renormalize=True)
        evolved.time = t_end
        return Segment(evolved, jumps, velocity * span)

    if mode == "event":
        while True:
            step = step_event_driven(state, rates, bandtable, rng, horizon=t_end - state.time, locate=locate)
            drift += velocity * step.dwell_time
            state = step.state
            if step.event is None:
                break
            jumps.append(step.event)
            velocity = mean_velocity(state, bandtable)
    elif mode == "fixed":
        n_steps = max(1, math.ceil(span / (dt or suggest_fixed_dt(rates, bandtable)) - 1e-9))
        step_size = span / n_steps
        for _ in range(n_steps):
            state, event = step_fixed(state, rates, bandtable, step_size, rng, locate=locate)
            drift += velocity * step_size
            if event is not None:
                jumps.append(event)
                velocity = mean_velocity(state, bandtable)
    else:
        raise InvalidArgumentError(f"unknown stepper {mode!r}")
    state.time = t_end
    return Segment(state, jumps, drift)


@dataclass
class TrajectoryRecord:
    """Sampled moments of one stochastic realization.

    ``second_moments`` columns are <x²>, <y²>, <xy>; ``occupations`` columns
    are the A and E group weights; ``drift`` is the integrated group velocity.
    """

    seed: int
    times: np.ndarray
    positions: np.ndarray
    second_moments: np.ndarray
    occupations: np.ndarray
    drift: np.ndarray
    jumps: list[JumpEvent] = field(default_factory=list)
    final_time: float = 0.0
    final_state: StateVector | None = field(default=None, repr=False)

    COLUMNS = ("t_ps", "x_A", "y_A", "x2_A2", "y2_A2", "xy_A2", "occ_A", "occ_E", "xs_A", "ys_A")

    @property
    def n_samples(self) -> int:
        return int(self.times.size)

    @property
    def initial_group(self) -> int:
        return int(self.occupations[0, UPPER] > 0.5)

    def history(self) -> JumpHistory:
        return JumpHistory(
            seed=self.seed,
            final_time=self.final_time,
            initial_group=self.initial_group,
            jumps=tuple(self.jumps),
        )

    def to_frame(self) -> pd.DataFrame:
        data = np.column_stack([self.times, self.positions, self.second_moments, self.occupations, self.drift])
        return pd.DataFrame(data, columns=list(self.COLUMNS))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, seed: int, jumps: Sequence[JumpEvent] = ()) -> "TrajectoryRecord":
        times = frame["t_ps"].to_numpy(dtype=float)
        return cls(
            seed=int(seed),
            times=times,
            positions=frame[["x_A", "y_A"]].to_numpy(dtype=float),
            second_moments=frame[["x2_A2", "y2_A2", "xy_A2"]].to_numpy(dtype=float),
            occupations=frame[["occ_A", "occ_E"]].to_numpy(dtype=float),
            drift=frame[["xs_A", "ys_A"]].to_numpy(dtype=float),
            jumps=list(jumps),
            final_time=float(times[-1]) if times.size else 0.0,
        )


def run_trajectory(
    initial: StateVector,
    rates: RateModel,
    bandtable: BandTable,
    t_max: float,
    sampling_interval: float,
    mode: Literal["fixed", "event"],
    rng: np.random.Generator,
    *,
    seed: int = 0,
    dt: float | None = None,
) -> TrajectoryRecord:
    if t_max < 0:
        raise InvalidArgumentError(f"t_max must be non-negative, got {t_max}")
    if not sampling_interval > 0:
        raise InvalidArgumentError(f"sampling interval must be positive, got {sampling_interval}")

    n_samples = int(math.floor(t_max / sampling_interval + 1e-9)) + 1
    times = np.arange(n_samples) * sampling_interval
    positions = np.zeros((n_samples, 2))
    second = np.zeros((n_samples, 3))
    occupations = np.zeros((n_samples, 2))
    drift = np.zeros((n_samples, 2))
    jumps: list[JumpEvent] = []

    tracker = PositionTracker(bandtable)
    state = initial.normalized()
    state.time = 0.0
    for i, target in enumerate(times):
        if i > 0:
            segment = propagate(state, rates, bandtable, float(target), rng, mode=mode, dt=dt, locate=tracker.locate)
            state = segment.state
            jumps.extend(segment.jumps)
            drift[i] = drift[i - 1] + segment.drift
        moments = tracker.observe(state)
        positions[i] = moments.mean
        second[i] = moments.second[0, 0], moments.second[1, 1], moments.second[0, 1]
        occupations[i] = state.group_occupations(bandtable)

    logger.debug("trajectory %d: %d samples, %d jumps", seed, n_samples, len(jumps))
    return TrajectoryRecord(
        seed=seed,
        times=times,
        positions=positions,
        second_moments=second,
        occupations=occupations,
        drift=drift,
        jumps=jumps,
        final_time=float(times[-1]),
        final_state=state,
    )


__all__ = [
    "EventStep",
    "JumpEvent",
    "JumpHistory",
    "JumpProbabilities",
    "RateModel",
    "Segment",
    "StateVector",
    "TrajectoryRecord",
    "apply_jump",
    "bose_occupation",
    "channel_rates",
    "collapse",
    "evolve_coherent",
    "gamma_to_rate",
    "jump_kind",
    "jump_probabilities",
    "prepare_initial_state",
    "propagate",
    "rate_to_gamma",
    "run_trajectory",
    "step_event_driven",
    "step_fixed",
    "suggest_fixed_dt",
    "trajectory_rng",
    "waiting_time",
]
