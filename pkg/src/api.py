"""Read-only web API over a finished output directory.

Uses FastAPI so it can be served next to a running sweep via Uvicorn. The API
surfaces:

* `/health` – quick liveness check
* `/bands` – the band summary of bands.json
* `/analysis` – diffusion coefficients and fits of analysis.json
* `/points` – the (T, gamma) points with their status
* `/rates` – thermal collision rates for a temperature and gamma

The directory is taken from the ``ADATOM_RESULTS_DIR`` environment variable
(default ``results``). Missing artifacts give a 404 so the client runs the
pipeline first.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import persist
from .bands import BandTable, synthetic_band_table
from .errors import ClassificationError
from .mcwf import channel_rates, gamma_to_rate

RESULTS_ENV = "ADATOM_RESULTS_DIR"

app = FastAPI(title="H/Ni(111) Diffusion API")


class RatesRequest(BaseModel):
    temperature: float
    gamma: float


def results_dir() -> Path:
    return Path(os.environ.get(RESULTS_ENV, "results"))


def load_bands_summary() -> Dict[str, Any]:
    return persist.read_json(results_dir() / "bands.json")


def load_analysis() -> Dict[str, Any]:
    return persist.read_json(results_dir() / "analysis.json")


def load_point_tasks() -> List[Dict[str, Any]]:
    manifest = persist.read_manifest(results_dir())
    return [task for key, task in sorted(manifest.get("tasks", {}).items()) if key.startswith("point:")]


def table_from_summary(summary: Dict[str, Any]) -> BandTable:
    """Band table with the stored centers and widths; enough for the rate model."""

    groups = summary.get("groups")
    if not groups:
        raise ClassificationError("bands.json carries no composite-group classification")
    return synthetic_band_table(
        summary["centers_meV"],
        summary["widths_meV"],
        6,
        groups=(tuple(groups["A"]), tuple(groups["E"])),
    )


@app.get("/health")
async def health() -> Dict[str, str]:
    """Simple liveness endpoint."""

    return {"status": "ok"}


@app.get("/bands")
async def bands() -> Dict[str, Any]:
    try:
        return load_bands_summary()
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc


@app.get("/analysis")
async def analysis() -> Dict[str, Any]:
    try:
        return load_analysis()
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc


@app.get("/points")
async def points() -> List[Dict[str, Any]]:
    try:
        return load_point_tasks()
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc


@app.post("/rates")
async def rates(request: RatesRequest) -> Dict[str, Any]:
    """Rate summary at the requested temperature and gamma for the stored band structure."""

    if not request.temperature > 0:
        raise HTTPException(status_code=400, detail="Temperature must be positive.")
    if not request.gamma > 0:
        raise HTTPException(status_code=400, detail="Gamma must be positive.")
    try:
        table = table_from_summary(load_bands_summary())
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
    except ClassificationError as exc:
        raise HTTPException(status_code=409, detail=str(exc)) from exc
    model = channel_rates(gamma_to_rate(request.gamma, table.upper_width), request.temperature, table)
    summary = model.summary()
    summary["mean_jump_time_ps"] = model.mean_jump_time
    return summary


def create_app() -> FastAPI:
    """Factory for integration with other tooling (e.g., uvicorn workers)."""

    return app


__all__ = ["app", "create_app"]
