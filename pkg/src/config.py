"""Run configuration: a strict JSON schema with every default materialized."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .constants import NI111_LATTICE_CONSTANT
from .errors import ConfigError

PositiveFloat = Annotated[float, Field(gt=0)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LatticeConfig(_Section):
    a: PositiveFloat = NI111_LATTICE_CONSTANT


class TargetsConfig(_Section):
    barrier: Annotated[float, Field(ge=0)] = 196.0
    gap: Annotated[float, Field(ge=0)] = 96.0
    depth_below_barrier: Annotated[float, Field(ge=0)] = 207.0
    site_asymmetry: Annotated[float, Field(ge=0)] = 0.0


class ParamsConfig(_Section):
    V_fcc: PositiveFloat
    V_hcp: PositiveFloat
    sigma_fcc: PositiveFloat
    sigma_hcp: PositiveFloat


class PotentialConfig(_Section):
    targets: TargetsConfig | None = None
    params: ParamsConfig | None = None
    max_iterations: Annotated[int, Field(ge=1)] = 500

    @model_validator(mode="before")
    @classmethod
    def _one_source(cls, data: Any) -> Any:
        if isinstance(data, dict):
            if data.get("targets") is not None and data.get("params") is not None:
                raise ValueError("specify either targets or params, not both")
            if data.get("targets") is None and data.get("params") is None:
                data = {**data, "targets": {}}
        return data


class GridConfig(_Section):
    L: Annotated[int, Field(ge=8)] = 24
    cutoff: PositiveFloat | Literal["auto"] = "auto"
    cutoff_tol: PositiveFloat = 1e-3
    n_branches: Annotated[int, Field(ge=6)] = 6
    band_source: Literal["solve", "reference-table"] = "solve"


class PhysicsConfig(_Section):
    T_list: Annotated[list[PositiveFloat], Field(min_length=1)] = [110.0]
    gamma_list: Annotated[list[PositiveFloat], Field(min_length=1)] | None = None
    Gamma: Annotated[float, Field(ge=0)] | Literal["from-gamma"] = "from-gamma"

    @model_validator(mode="before")
    @classmethod
    def _one_rate(cls, data: Any) -> Any:
        if isinstance(data, dict):
            explicit = data.get("Gamma", "from-gamma") != "from-gamma"
            if explicit and data.get("gamma_list") is not None:
                raise ValueError("Gamma and gamma_list are mutually exclusive")
            if not explicit and data.get("gamma_list") is None:
                data = {**data, "gamma_list": [1.0]}
        return data

    def points(self) -> list[tuple[float, float | None]]:
        """(T, gamma) pairs in sweep order; gamma is None when Gamma is given directly."""
        if self.Gamma != "from-gamma":
            return [(T, None) for T in self.T_list]
        return [(T, gamma) for gamma in self.gamma_list or [] for T in self.T_list]


class EnsembleConfig(_Section):
    n_traj: Annotated[int, Field(ge=1)] = 200
    t_max_ps: PositiveFloat | Literal["auto"] = "auto"
    t_max_jump_times: PositiveFloat = 100.0
    sampling_interval_ps: PositiveFloat | Literal["auto"] = "auto"
    samples_per_jump_time: PositiveFloat = 2.0
    stepper: Literal["fixed", "event"] = "event"
    fixed_dt_ps: PositiveFloat | None = None
    master_seed: Annotated[int, Field(ge=0)] = 0
    initial_mode: Literal["ground-packet", "thermal"] = "ground-packet"
    max_abort_fraction: Annotated[float, Field(ge=0, le=1)] = 0.01


class OracleConfig(_Section):
    L: Annotated[int, Field(ge=1, le=4)] = 4
    T_list: Annotated[list[PositiveFloat], Field(min_length=1)] = [70.0, 110.0]
    gamma_list: Annotated[list[PositiveFloat], Field(min_length=1)] = [1.0, 10.0]
    ensemble_sizes: Annotated[list[Annotated[int, Field(ge=1)]], Field(min_length=1)] = [100, 1000, 10000]
    checkpoints_in_jump_times: Annotated[list[PositiveFloat], Field(min_length=1)] = [0.25, 0.5, 1.0]
    check_step: bool = True
    exponent_range: tuple[float, float] = (-0.65, -0.35)


class OutputsConfig(_Section):
    directory: str = "results"
    formats: list[Literal["csv", "json", "bin", "checkpoint"]] = ["csv", "json", "bin"]
    n_traces: Annotated[int, Field(ge=0)] = 3


class RunConfig(_Section):
    lattice: LatticeConfig = Field(default_factory=LatticeConfig)
    potential: PotentialConfig = Field(default_factory=PotentialConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    physics: PhysicsConfig = Field(default_factory=PhysicsConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    outputs: OutputsConfig = Field(default_factory=OutputsConfig)


def _bound(value: Any) -> str:
    return f"{value:g}" if isinstance(value, (int, float)) else str(value)


def _describe(error: dict[str, Any]) -> str:
    path = ""
    for part in error["loc"]:
        path += f"[{part}]" if isinstance(part, int) else (f".{part}" if path else str(part))
    kind, ctx = error["type"], error.get("ctx", {})
    if kind == "greater_than":
        message = f"must be > {_bound(ctx['gt'])}"
    elif kind == "greater_than_equal":
        message = f"must be >= {_bound(ctx['ge'])}"
    elif kind == "less_than":
        message = f"must be < {_bound(ctx['lt'])}"
    elif kind == "less_than_equal":
        message = f"must be <= {_bound(ctx['le'])}"
    elif kind == "extra_forbidden":
        message = "is not a recognized field"
    elif kind == "missing":
        message = "is required"
    else:
        message = error["msg"].removeprefix("Value error, ")
    return f"{path} {message}" if path else message


def parse_config(payload: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        errors = exc.errors()
        raise ConfigError(_describe(errors[0]), [_describe(e) for e in errors]) from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return parse_config(payload)


def apply_overrides(config: RunConfig, *, seed: int | None = None, out: str | Path | None = None) -> RunConfig:
    """Return a copy with the CLI's --seed / --out applied."""

    updates: dict[str, Any] = {}
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"ensemble.master_seed must be >= 0, got {seed}")
        updates["ensemble"] = config.ensemble.model_copy(update={"master_seed": seed})
    if out is not None:
        updates["outputs"] = config.outputs.model_copy(update={"directory": str(out)})
    return config.model_copy(update=updates) if updates else config


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_schema() -> dict[str, Any]:
    return RunConfig.model_json_schema()


__all__ = [
    "EnsembleConfig",
    "GridConfig",
    "LatticeConfig",
    "OracleConfig",
    "OutputsConfig",
    "ParamsConfig",
    "PhysicsConfig",
    "PotentialConfig",
    "RunConfig",
    "TargetsConfig",
    "apply_overrides",
    "config_hash",
    "config_schema",
    "load_config",
    "parse_config",
]
