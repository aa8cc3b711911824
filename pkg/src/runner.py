"""Experiment orchestration: potential, bands, ensembles, analysis and artifacts.

`sweep()` runs the whole pipeline end-to-end so the CLI and notebooks can
rely on a single entry point. Every artifact is written through `persist`
and the analysis is always recomputed from the files on disk, so `analyze`
on a finished directory reproduces the numbers of the sweep that wrote it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import pandas as pd

from . import persist
from .bands import BandTable, build_kgrid, converged_cutoff, reference_band_table, solve_bands
from .config import EnsembleConfig, OutputsConfig, RunConfig, config_hash, parse_config
from .constants import A2_PER_PS_TO_A2_PER_S, BOLTZMANN_MEV_K
from .errors import ConfigError, EnsembleError, InvalidArgumentError, InvalidInputError, NumericalError
from .lattice import (
    LatticeSpec,
    PotentialParams,
    PotentialTargets,
    build_lattice,
    fit_potential,
    make_potential,
    potential_observables,
)
from .mcwf import (
    JumpHistory,
    RateModel,
    TrajectoryRecord,
    channel_rates,
    gamma_to_rate,
    prepare_initial_state,
    run_trajectory,
    trajectory_rng,
)
from .observables import (
    DiffusionResult,
    MsdCurve,
    arrhenius_fit,
    diffusion_coefficient,
    gamma_scan,
    msd_curve,
    residence_statistics,
    semiclassical_msd_curve,
    trajectory_trace,
    tunnelling_lengths,
)
from .oracle import MAX_ORACLE_DIMENSION, unravelling_report

logger = logging.getLogger(__name__)

ARRHENIUS_MIN_POINTS = 4
GAMMA_SCAN_MIN_POINTS = 3


@dataclass(frozen=True)
class OutputLayout:
    root: Path

    @property
    def potential(self) -> Path:
        return self.root / "potential.json"

    @property
    def bands_json(self) -> Path:
        return self.root / "bands.json"

    @property
    def bands_bin(self) -> Path:
        return self.root / "bands.bin"

    @property
    def points(self) -> Path:
        return self.root / "points"

    @property
    def analysis(self) -> Path:
        return self.root / "analysis.json"

    @property
    def arrhenius(self) -> Path:
        return self.root / "arrhenius.csv"

    @property
    def gamma_scan(self) -> Path:
        return self.root / "gamma_scan.csv"

    @property
    def oracle_report(self) -> Path:
        return self.root / "oracle_report.json"

    def point(self, T: float, gamma: float) -> Path:
        return self.points / point_name(T, gamma)


def point_name(T: float, gamma: float) -> str:
    return f"T{T:g}_g{gamma:.6g}"


def _layout(config: RunConfig) -> OutputLayout:
    return OutputLayout(Path(config.outputs.directory))


# --- potential and bands ----------------------------------------------------


def lattice_from_config(config: RunConfig) -> LatticeSpec:
    return build_lattice(config.lattice.a)


def prepare_potential(config: RunConfig, *, threads: int = 1) -> tuple[PotentialParams, dict[str, Any]]:
    """Explicit parameters, or a fit to the configured targets; also returns the potential.json payload."""

    lattice = lattice_from_config(config)
    section = config.potential
    if section.params is not None:
        p = section.params
        params = make_potential(lattice, p.V_fcc, p.V_hcp, p.sigma_fcc, p.sigma_hcp)
        landscape = potential_observables(params, lattice)
        payload = params.to_dict(lattice)
        payload["fit_residuals"] = {}
        payload["landscape"] = {
            "barrier_meV": landscape.barrier,
            "u_top_meV": landscape.u_top,
            "site_asymmetry_meV": landscape.site_asymmetry,
        }
        return params, payload

    targets = PotentialTargets(**section.targets.model_dump())
    cutoff = config.grid.cutoff if config.grid.cutoff != "auto" else None
    fit = fit_potential(
        targets,
        lattice,
        cutoff=cutoff,
        max_iterations=section.max_iterations,
        threads=threads,
    )
    return fit.params, fit.to_dict(lattice)


def prepare_bands(config: RunConfig, params: PotentialParams | None, *, L: int | None = None, threads: int = 1) -> BandTable:
    lattice = lattice_from_config(config)
    L = L or config.grid.L
    if config.grid.band_source == "reference-table":
        return reference_band_table(L, lattice)
    if params is None:
        raise InvalidArgumentError("solving bands needs potential parameters")
    cutoff = config.grid.cutoff
    if cutoff == "auto":
        cutoff = converged_cutoff(params, lattice, config.grid.cutoff_tol, threads=threads)
    return solve_bands(params, lattice, build_kgrid(lattice, L), config.grid.n_branches, cutoff, threads=threads)


def write_bands(layout: OutputLayout, table: BandTable, formats: Sequence[str]) -> None:
    persist.write_json(layout.bands_json, table.summary())
    if "bin" in formats:
        persist.write_bands_binary(layout.bands_bin, table)


def load_bands(directory: Path, config: RunConfig, *, threads: int = 1) -> BandTable:
    """Band table of a finished run: bands.bin when present, otherwise re-solved from potential.json."""

    layout = OutputLayout(directory)
    lattice = lattice_from_config(config)
    summary = persist.read_json(layout.bands_json)
    groups = summary.get("groups")
    grouping = (tuple(groups["A"]), tuple(groups["E"])) if groups else None
    if layout.bands_bin.exists():
        table = persist.read_bands_binary(layout.bands_bin, lattice, grouping)
        return dataclasses.replace(table, cutoff=summary.get("cutoff_inv_A"), source=summary.get("source", "file"))
    if config.grid.band_source == "reference-table":
        return reference_band_table(int(summary["L"]), lattice)
    params = PotentialParams.from_dict(persist.read_json(layout.potential))
    kgrid = build_kgrid(lattice, int(summary["L"]))
    table = solve_bands(
        params, lattice, kgrid, int(summary["n_branches"]), summary["cutoff_inv_A"], threads=threads, classify=False
    )
    return table.with_groups(grouping)


# --- rates and timing -------------------------------------------------------


def resolve_rates(config: RunConfig, table: BandTable, T: float, gamma: float | None) -> RateModel:
    Gamma = config.physics.Gamma
    if Gamma == "from-gamma":
        if gamma is None:
            raise ConfigError("physics.gamma_list is required when physics.Gamma is 'from-gamma'")
        Gamma = gamma_to_rate(gamma, table.upper_width)
    return channel_rates(float(Gamma), T, table)


@dataclass(frozen=True)
class Timing:
    t_max: float
    sampling_interval: float

    def to_dict(self) -> dict[str, float]:
        return {"t_max_ps": self.t_max, "sampling_interval_ps": self.sampling_interval}


def resolve_timing(ensemble: EnsembleConfig, rates: RateModel) -> Timing:
    """Explicit times, or multiples of the mean jump time."""

    tau = rates.mean_jump_time
    if (ensemble.t_max_ps == "auto" or ensemble.sampling_interval_ps == "auto") and not math.isfinite(tau):
        raise ConfigError("ensemble.t_max_ps and ensemble.sampling_interval_ps must be explicit when Gamma is 0")
    t_max = ensemble.t_max_jump_times * tau if ensemble.t_max_ps == "auto" else float(ensemble.t_max_ps)
    if ensemble.sampling_interval_ps == "auto":
        interval = tau / ensemble.samples_per_jump_time
    else:
        interval = float(ensemble.sampling_interval_ps)
    if interval > t_max:
        raise ConfigError(f"sampling interval {interval:g} ps exceeds t_max {t_max:g} ps")
    return Timing(t_max=t_max, sampling_interval=interval)


# --- ensembles ----------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryTask:
    """Everything a worker needs besides the trajectory index."""

    bandtable: BandTable
    rates: RateModel
    timing: Timing
    stepper: str
    fixed_dt: float | None
    initial_mode: str
    master_seed: int


@dataclass(frozen=True)
class TrajectoryFailure:
    index: int
    seed: int
    error: str
    message: str

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class EnsembleResult:
    records: list[TrajectoryRecord]
    failures: list[TrajectoryFailure] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)

    @property
    def n_requested(self) -> int:
        return len(self.records) + len(self.failures)


_WORKER_TASK: TrajectoryTask | None = None


def _init_worker(task: TrajectoryTask) -> None:
    global _WORKER_TASK
    _WORKER_TASK = task


def simulate_trajectory(task: TrajectoryTask, index: int) -> TrajectoryRecord:
    seed, rng = trajectory_rng(task.master_seed, index)
    initial = prepare_initial_state(task.bandtable, task.initial_mode, rng, T=task.rates.T)
    return run_trajectory(
        initial,
        task.rates,
        task.bandtable,
        task.timing.t_max,
        task.timing.sampling_interval,
        task.stepper,
        rng,
        seed=seed,
        dt=task.fixed_dt,
    )


def _run_index(task: TrajectoryTask, index: int) -> TrajectoryRecord | TrajectoryFailure:
    try:
        return simulate_trajectory(task, index)
    except NumericalError as exc:
        seed, _ = trajectory_rng(task.master_seed, index)
        return TrajectoryFailure(index=index, seed=seed, error=type(exc).__name__, message=str(exc))


def _trajectory_task(index: int) -> TrajectoryRecord | TrajectoryFailure:
    if _WORKER_TASK is None:
        raise RuntimeError("worker used before initialization")
    return _run_index(_WORKER_TASK, index)


def make_task(config: RunConfig, bandtable: BandTable, rates: RateModel, timing: Timing | None = None) -> TrajectoryTask:
    ensemble = config.ensemble
    return TrajectoryTask(
        bandtable=bandtable,
        rates=rates,
        timing=timing or resolve_timing(ensemble, rates),
        stepper=ensemble.stepper,
        fixed_dt=ensemble.fixed_dt_ps,
        initial_mode=ensemble.initial_mode,
        master_seed=ensemble.master_seed,
    )


def run_ensemble(
    config: RunConfig,
    bandtable: BandTable,
    rates: RateModel,
    *,
    threads: int = 1,
    timing: Timing | None = None,
    indices: Sequence[int] | None = None,
) -> EnsembleResult:
    """Run the trajectories ``indices`` (default all ``n_traj``), in order, on ``threads`` worker processes.

    Trajectory ``i`` draws from its own stream keyed on (master_seed, i), so
    the records do not depend on the worker count or on which indices run.
    """

    n_traj = config.ensemble.n_traj
    indices = list(range(n_traj)) if indices is None else list(indices)
    if not indices:
        return EnsembleResult(records=[])
    # eigenvectors are not needed by the propagator
    task = make_task(config, dataclasses.replace(bandtable, eigvecs=None), rates, timing)
    if threads <= 1 or len(indices) == 1:
        outcomes = [_run_index(task, i) for i in indices]
    else:
        chunksize = max(1, len(indices) // (4 * threads))
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(task,)) as pool:
            outcomes = list(pool.map(_trajectory_task, indices, chunksize=chunksize))

    result = EnsembleResult(records=[], failures=[], indices=[])
    for index, outcome in zip(indices, outcomes):
        if isinstance(outcome, TrajectoryFailure):
            logger.warning("trajectory %d (seed %d) aborted: %s", index, outcome.seed, outcome.message)
            result.failures.append(outcome)
        else:
            result.records.append(outcome)
            result.indices.append(index)

    allowed = config.ensemble.max_abort_fraction * n_traj
    if len(result.failures) > allowed or not result.records:
        raise EnsembleError(
            f"{len(result.failures)} of {n_traj} trajectories aborted at T={rates.T:g} K, "
            f"above the tolerated fraction {config.ensemble.max_abort_fraction:g}"
        )
    logger.info(
        "ensemble T=%g K gamma=%.4g: %d trajectories, %d aborted",
        rates.T,
        rates.gamma,
        len(result.records),
        len(result.failures),
    )
    return result


# --- per-point artifacts ------------------------------------------------------


@dataclass
class PointOutcome:
    T: float
    gamma: float
    directory: Path
    status: str
    message: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"T_K": self.T, "gamma": self.gamma, "directory": self.directory.name, "status": self.status, "message": self.message}


def write_trace(directory: Path, record: TrajectoryRecord) -> Path:
    return persist.write_frame(directory / f"trace_{record.seed}.csv", trajectory_trace(record))


def trajectory_fingerprint(config: RunConfig, rates: RateModel) -> str:
    """Hash of everything a single trajectory depends on.

    Ensemble size, abort tolerance and output options are left out so a
    stored trajectory stays valid when the ensemble grows.
    """

    physics = config.model_copy(
        update={
            "outputs": OutputsConfig(),
            "ensemble": config.ensemble.model_copy(update={"n_traj": 1, "max_abort_fraction": 0.0}),
        }
    )
    key = f"{config_hash(physics)}:{rates.T!r}:{rates.Gamma!r}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


def _record_paths(directory: Path, index: int) -> tuple[Path, Path, Path]:
    stem = f"traj_{index:05d}"
    records = directory / "trajectories"
    return records / f"{stem}.csv", records / f"{stem}.jumps.json", directory / "checkpoints" / f"state_{index:05d}.bin"


def write_record(directory: Path, index: int, record: TrajectoryRecord, fingerprint: str, *, checkpoint: bool = False) -> None:
    """Sample CSV, jump sidecar and, if asked, the final state of trajectory ``index``."""

    frame_path, sidecar_path, state_path = _record_paths(directory, index)
    persist.write_frame(frame_path, record.to_frame())
    sidecar = record.history().to_dict()
    sidecar.update(index=index, fingerprint=fingerprint)
    if checkpoint and record.final_state is not None:
        persist.write_checkpoint(state_path, record.final_state)
    else:
        state_path.unlink(missing_ok=True)
    # the sidecar goes last: a trajectory counts as stored only once it exists
    persist.write_json(sidecar_path, sidecar)


def _stored_sidecar(directory: Path, index: int, fingerprint: str) -> dict[str, Any] | None:
    frame_path, sidecar_path, _ = _record_paths(directory, index)
    if not (sidecar_path.exists() and frame_path.exists()):
        return None
    sidecar = persist.read_json(sidecar_path)
    return sidecar if sidecar.get("fingerprint") == fingerprint else None


def read_record(directory: Path, index: int, fingerprint: str) -> TrajectoryRecord | None:
    """The stored trajectory ``index``, or None if it is missing or was run with other settings."""

    sidecar = _stored_sidecar(directory, index, fingerprint)
    if sidecar is None:
        return None
    frame_path, _, state_path = _record_paths(directory, index)
    history = JumpHistory.from_dict(sidecar)
    record = TrajectoryRecord.from_frame(persist.read_frame(frame_path), history.seed, history.jumps)
    record.final_time = history.final_time
    if state_path.exists():
        record.final_state = persist.read_checkpoint(state_path)
    return record


def run_point(
    config: RunConfig,
    bandtable: BandTable,
    T: float,
    gamma: float | None,
    *,
    threads: int = 1,
) -> PointOutcome:
    """Ensemble for one (T, gamma) point, persisted under points/.

    Trajectories already stored under the point directory with the same
    fingerprint are reused, so an interrupted sweep resumes where it
    stopped. MSD curves are always built from the stored records.
    """

    rates = resolve_rates(config, bandtable, T, gamma)
    timing = resolve_timing(config.ensemble, rates)
    directory = _layout(config).point(T, rates.gamma)
    fingerprint = trajectory_fingerprint(config, rates)
    n_traj = config.ensemble.n_traj

    stored = [index for index in range(n_traj) if _stored_sidecar(directory, index, fingerprint) is not None]
    pending = sorted(set(range(n_traj)) - set(stored))
    if stored:
        logger.info("point %s: resuming with %d of %d trajectories on disk", directory.name, len(stored), n_traj)
    ensemble = run_ensemble(config, bandtable, rates, threads=threads, timing=timing, indices=pending)

    checkpoint = "checkpoint" in config.outputs.formats
    for index, record in zip(ensemble.indices, ensemble.records):
        write_record(directory, index, record, fingerprint, checkpoint=checkpoint)
        if index < config.outputs.n_traces:
            write_trace(directory, record)

    indices = sorted([*stored, *ensemble.indices])
    records = [read_record(directory, index, fingerprint) for index in indices]
    msd = msd_curve(records, seed=config.ensemble.master_seed)
    semiclassical = semiclassical_msd_curve(records, seed=config.ensemble.master_seed)
    persist.write_frame(directory / "msd.csv", msd.to_frame())
    persist.write_frame(directory / "semiclassical_msd.csv", semiclassical.to_frame())

    trajectories = []
    for index, record in zip(indices, records):
        entry = record.history().to_dict()
        entry["index"] = index
        trajectories.append(entry)
    meta = {
        "T_K": T,
        "gamma": rates.gamma,
        "Gamma_per_ps": rates.Gamma,
        "rates": rates.summary(),
        "mean_jump_time_ps": rates.mean_jump_time,
        "stepper": config.ensemble.stepper,
        "fixed_dt_ps": config.ensemble.fixed_dt_ps,
        "initial_mode": config.ensemble.initial_mode,
        "master_seed": config.ensemble.master_seed,
        "n_traj": n_traj,
        "n_completed": len(records),
        "n_resumed": len(stored),
        "failures": [failure.to_dict() for failure in ensemble.failures],
        "trajectories": trajectories,
        **timing.to_dict(),
    }
    persist.write_json(directory / "traj_meta.json", meta)
    return PointOutcome(T=T, gamma=rates.gamma, directory=directory, status="complete")


@dataclass
class PointAnalysis:
    diffusion: DiffusionResult
    semiclassical: DiffusionResult | None
    summary: dict[str, Any]


def analyze_point(directory: Path, site_separation: float) -> PointAnalysis:
    """D, cross-check D, tunnelling histogram and residence statistics from a point directory."""

    meta = persist.read_json(directory / "traj_meta.json")
    T, gamma, tau = float(meta["T_K"]), float(meta["gamma"]), float(meta["mean_jump_time_ps"])
    n_traj = int(meta["n_completed"])
    msd = MsdCurve.from_frame(persist.read_frame(directory / "msd.csv"), n_traj)
    diffusion = diffusion_coefficient(msd, mean_jump_time=tau, T=T, gamma=gamma)

    semiclassical: DiffusionResult | None = None
    cross_path = directory / "semiclassical_msd.csv"
    if cross_path.exists():
        cross = MsdCurve.from_frame(persist.read_frame(cross_path), n_traj)
        semiclassical = diffusion_coefficient(cross, mean_jump_time=tau, T=T, gamma=gamma)

    histories = [JumpHistory.from_dict(entry) for entry in meta["trajectories"]]
    histogram = tunnelling_lengths(histories, site_separation)
    persist.write_frame(directory / "pl_histogram.csv", histogram.to_frame())
    residence = residence_statistics(histories)

    summary = {
        "point": directory.name,
        "diffusion": diffusion.to_dict(),
        "semiclassical_diffusion": None if semiclassical is None else semiclassical.to_dict(),
        "tunnelling": histogram.summary(),
        "residence": residence.to_dict(),
        "rates": meta["rates"],
        "n_traj": n_traj,
        "n_aborted": len(meta["failures"]),
    }
    logger.info("point %s: D = %.4g +- %.2g A2/s", directory.name, diffusion.D * A2_PER_PS_TO_A2_PER_S, diffusion.err * A2_PER_PS_TO_A2_PER_S)
    return PointAnalysis(diffusion=diffusion, semiclassical=semiclassical, summary=summary)


def _arrhenius_table(results: Sequence[DiffusionResult]) -> pd.DataFrame:
    rows = sorted(results, key=lambda r: (r.gamma, r.T))
    return pd.DataFrame(
        {
            "gamma": [r.gamma for r in rows],
            "T_K": [r.T for r in rows],
            "inv_kT_per_meV": [1.0 / (BOLTZMANN_MEV_K * r.T) for r in rows],
            "D_A2_per_s": [r.D * A2_PER_PS_TO_A2_PER_S for r in rows],
            "err_A2_per_s": [r.err * A2_PER_PS_TO_A2_PER_S for r in rows],
            "ln_D": [math.log(r.D * A2_PER_PS_TO_A2_PER_S) if r.D > 0 else math.nan for r in rows],
        }
    )


def _gamma_scan_table(results: Sequence[DiffusionResult]) -> pd.DataFrame:
    rows = sorted(results, key=lambda r: (r.T, r.gamma))
    return pd.DataFrame(
        {
            "T_K": [r.T for r in rows],
            "gamma": [r.gamma for r in rows],
            "D_A2_per_s": [r.D * A2_PER_PS_TO_A2_PER_S for r in rows],
            "err_A2_per_s": [r.err * A2_PER_PS_TO_A2_PER_S for r in rows],
        }
    )


def _grouped(results: Sequence[DiffusionResult], key: str) -> dict[float, list[DiffusionResult]]:
    groups: dict[float, list[DiffusionResult]] = {}
    for result in results:
        groups.setdefault(round(getattr(result, key), 9), []).append(result)
    return groups


def analyze_directory(directory: str | Path, *, fits: bool = True) -> dict[str, Any]:
    """Recompute analysis.json, arrhenius.csv and gamma_scan.csv from the point artifacts."""

    layout = OutputLayout(Path(directory))
    if not layout.points.is_dir():
        raise FileNotFoundError(f"no points/ directory under {layout.root}")
    config = parse_config(persist.read_manifest(layout.root)["config"])
    site_separation = lattice_from_config(config).site_separation

    analyses = [
        analyze_point(path, site_separation)
        for path in sorted(layout.points.iterdir())
        if (path / "traj_meta.json").exists()
    ]
    results = [a.diffusion for a in analyses]
    payload: dict[str, Any] = {"points": [a.summary for a in analyses], "arrhenius": [], "gamma_scan": []}

    if fits and results:
        for gamma, members in sorted(_grouped(results, "gamma").items()):
            if len({r.T for r in members}) < ARRHENIUS_MIN_POINTS:
                logger.info("gamma=%g: %d temperatures, no Arrhenius fit", gamma, len(members))
                continue
            try:
                payload["arrhenius"].append(arrhenius_fit(members, min_points=ARRHENIUS_MIN_POINTS).to_dict())
            except InvalidInputError as exc:
                logger.warning("Arrhenius fit at gamma=%g skipped: %s", gamma, exc)
        for T, members in sorted(_grouped(results, "T").items()):
            if len({r.gamma for r in members}) < GAMMA_SCAN_MIN_POINTS:
                continue
            try:
                payload["gamma_scan"].append(gamma_scan(members, min_points=GAMMA_SCAN_MIN_POINTS).to_dict())
            except InvalidInputError as exc:
                logger.warning("gamma scan at T=%g K skipped: %s", T, exc)
        if payload["arrhenius"]:
            persist.write_frame(layout.arrhenius, _arrhenius_table(results))
        if payload["gamma_scan"]:
            persist.write_frame(layout.gamma_scan, _gamma_scan_table(results))

    persist.write_json(layout.analysis, payload)
    persist.refresh_manifest(layout.root)
    return payload


# --- manifest -------------------------------------------------------------


def _manifest_body(config: RunConfig, layout: OutputLayout, tasks: dict[str, Any]) -> dict[str, Any]:
    body: dict[str, Any] = {
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "tasks": tasks,
    }
    if layout.potential.exists():
        body["potential"] = persist.read_json(layout.potential)
    if layout.bands_json.exists():
        body["bands"] = persist.read_json(layout.bands_json)
    return body


def _finalize(config: RunConfig, tasks: dict[str, Any], started: float) -> dict[str, Any]:
    layout = _layout(config)
    previous: dict[str, Any] = {}
    if (layout.root / persist.MANIFEST_NAME).exists():
        previous = persist.read_manifest(layout.root).get("tasks", {})
    merged = {**previous, **tasks}
    return persist.write_manifest(
        layout.root, _manifest_body(config, layout, merged), {"wall_time_s": time.perf_counter() - started}
    )


# --- entry points -------------------------------------------------------------


def run_fit_potential(config: RunConfig, *, threads: int = 1) -> dict[str, Any]:
    started = time.perf_counter()
    layout = _layout(config)
    _, payload = prepare_potential(config, threads=threads)
    persist.write_json(layout.potential, payload)
    _finalize(config, {"fit-potential": "complete"}, started)
    return payload


def run_bands(config: RunConfig, *, threads: int = 1) -> BandTable:
    started = time.perf_counter()
    layout = _layout(config)
    params = None
    if config.grid.band_source == "solve":
        params, payload = prepare_potential(config, threads=threads)
        persist.write_json(layout.potential, payload)
    table = prepare_bands(config, params, threads=threads)
    write_bands(layout, table, config.outputs.formats)
    _finalize(config, {"bands": "complete"}, started)
    return table


def run(config: RunConfig, *, threads: int = 1, fits: bool = False) -> dict[str, Any]:
    """Every configured (T, gamma) point: ensemble, MSD and D."""

    started = time.perf_counter()
    layout = _layout(config)
    layout.root.mkdir(parents=True, exist_ok=True)
    params = None
    if config.grid.band_source == "solve":
        params, payload = prepare_potential(config, threads=threads)
        persist.write_json(layout.potential, payload)
    table = prepare_bands(config, params, threads=threads)
    write_bands(layout, table, config.outputs.formats)
    tasks: dict[str, Any] = {"bands": "complete"}
    _finalize(config, tasks, started)

    failure: NumericalError | None = None
    for T, gamma in config.physics.points():
        key = f"point:T{T:g}_" + (f"g{gamma:.6g}" if gamma is not None else "Gamma")
        try:
            outcome = run_point(config, table, T, gamma, threads=threads)
        except NumericalError as exc:
            outcome = PointOutcome(
                T=T,
                gamma=gamma if gamma is not None else math.nan,
                directory=layout.points,
                status="failed",
                message=str(exc),
            )
            failure = exc
            logger.error("point T=%g K gamma=%s failed: %s", T, gamma, exc)
        tasks[key] = outcome.to_dict()
        _finalize(config, tasks, started)
        if failure is not None:
            break

    analysis: dict[str, Any] = {}
    if layout.points.is_dir():
        analysis = analyze_directory(layout.root, fits=fits)
        tasks["analysis"] = "complete"
        _finalize(config, tasks, started)
    if failure is not None:
        raise failure
    return analysis


def sweep(config: RunConfig, *, threads: int = 1) -> dict[str, Any]:
    """Run every point, then fit Arrhenius laws per gamma and power laws per temperature."""
    return run(config, threads=threads, fits=True)


@dataclass
class OracleOutcome:
    passed: bool
    reports: list[dict[str, Any]]
    path: Path


def oracle_check(config: RunConfig, *, threads: int = 1) -> OracleOutcome:
    """Compare jump-ensemble averages with the master equation on the small oracle grid."""

    started = time.perf_counter()
    layout = _layout(config)
    section = config.oracle
    params = None
    if config.grid.band_source == "solve":
        if layout.potential.exists():
            params = PotentialParams.from_dict(persist.read_json(layout.potential))
        else:
            params, payload = prepare_potential(config, threads=threads)
            persist.write_json(layout.potential, payload)
    table = prepare_bands(config, params, L=section.L, threads=threads)
    dimension = table.n_branches * table.L * table.L
    if dimension > MAX_ORACLE_DIMENSION:
        raise ConfigError(f"oracle dimension {dimension} exceeds {MAX_ORACLE_DIMENSION}; lower grid.n_branches or oracle.L")

    reports = []
    for T in section.T_list:
        for gamma in section.gamma_list:
            rates = channel_rates(gamma_to_rate(gamma, table.upper_width), T, table)
            checkpoints = [c * rates.mean_jump_time for c in section.checkpoints_in_jump_times]
            report = unravelling_report(
                rates,
                table,
                checkpoints,
                section.ensemble_sizes,
                config.ensemble.master_seed,
                mode=config.ensemble.stepper,
                check_step=section.check_step,
            )
            entry = report.to_dict()
            entry["passed"] = report.passed(section.exponent_range)
            reports.append(entry)

    passed = all(entry["passed"] for entry in reports)
    persist.write_json(
        layout.oracle_report,
        {
            "passed": passed,
            "dimension": dimension,
            "exponent_range": list(section.exponent_range),
            "reports": reports,
        },
    )
    _finalize(config, {"oracle-check": "passed" if passed else "failed"}, started)
    logger.info("oracle check %s over %d (T, gamma) pairs", "passed" if passed else "FAILED", len(reports))
    return OracleOutcome(passed=passed, reports=reports, path=layout.oracle_report)


def trace_trajectory(directory: str | Path, seed: int, *, threads: int = 1) -> Path:
    """Re-simulate the trajectory with ``seed`` and write its trace next to its point data."""

    layout = OutputLayout(Path(directory))
    config = parse_config(persist.read_manifest(layout.root)["config"])
    if not layout.points.is_dir():
        raise FileNotFoundError(f"no points/ directory under {layout.root}")

    for point in sorted(layout.points.iterdir()):
        meta_path = point / "traj_meta.json"
        if not meta_path.exists():
            continue
        meta = persist.read_json(meta_path)
        match = next((entry for entry in meta["trajectories"] if int(entry["seed"]) == seed), None)
        if match is None:
            continue
        table = load_bands(layout.root, config, threads=threads)
        rates = channel_rates(float(meta["Gamma_per_ps"]), float(meta["T_K"]), table)
        timing = Timing(t_max=float(meta["t_max_ps"]), sampling_interval=float(meta["sampling_interval_ps"]))
        task = make_task(config, table, rates, timing)
        record = simulate_trajectory(task, int(match["index"]))
        path = write_trace(point, record)
        persist.refresh_manifest(layout.root)
        logger.info("trace for seed %d written to %s", seed, path)
        return path
    raise InvalidArgumentError(f"no trajectory with seed {seed} under {layout.points}")


__all__ = [
    "EnsembleResult",
    "OracleOutcome",
    "OutputLayout",
    "PointAnalysis",
    "PointOutcome",
    "Timing",
    "TrajectoryFailure",
    "TrajectoryTask",
    "analyze_directory",
    "analyze_point",
    "load_bands",
    "oracle_check",
    "point_name",
    "prepare_bands",
    "prepare_potential",
    "read_record",
    "resolve_rates",
    "resolve_timing",
    "run",
    "run_bands",
    "run_ensemble",
    "run_fit_potential",
    "run_point",
    "simulate_trajectory",
    "sweep",
    "trace_trajectory",
    "trajectory_fingerprint",
    "write_record",
]
