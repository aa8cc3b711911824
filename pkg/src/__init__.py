"""Expose high level helpers for the application."""

from .config import load_config
from .runner import analyze_directory, oracle_check, run, sweep, trace_trajectory

__all__ = [
    "analyze_directory",
    "load_config",
    "oracle_check",
    "run",
    "sweep",
    "trace_trajectory",
]
