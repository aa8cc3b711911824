"""Reading and writing of every artifact in an output directory."""

from __future__ import annotations

import hashlib
import json
import struct
from importlib import metadata
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

from .bands import BandTable
from .errors import InvalidInputError
from .lattice import LatticeSpec
from .mcwf import StateVector

BANDS_MAGIC = b"MCWFBANDS1"
STATE_MAGIC = b"MCWFSTATE1"
MAGIC_SIZE = 16
CSV_FLOAT_FORMAT = "%.12g"
MANIFEST_NAME = "manifest.json"


def code_version() -> str:
    try:
        return metadata.version("adatom-mcwf")
    except metadata.PackageNotFoundError:
        return "0.1.0"


def _default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, default=_default, allow_nan=True) + "\n"


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload), encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    if not path.exists():
        raise FileNotFoundError(f"{path.name} missing in {path.parent}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def read_frame(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"{path.name} missing in {path.parent}")
    return pd.read_csv(path)


def _header(magic: bytes, *dims: int) -> bytes:
    return magic.ljust(MAGIC_SIZE, b"\0") + struct.pack(f"<{len(dims)}q", *dims)


def _check_magic(blob: bytes, magic: bytes, path: Path) -> None:
    if blob[:MAGIC_SIZE] != magic.ljust(MAGIC_SIZE, b"\0"):
        raise InvalidInputError(f"{path} does not start with the {magic.decode()} header")


def write_bands_binary(path: Path, table: BandTable) -> Path:
    """Header, int64 dims (M, L, n_pw), then float64 energies, velocities and eigenvectors."""

    n_pw = 0 if table.eigvecs is None else int(table.eigvecs.shape[-1])
    parts = [
        _header(BANDS_MAGIC, table.n_branches, table.L, n_pw),
        np.ascontiguousarray(table.energies, dtype="<f8").tobytes(),
        np.ascontiguousarray(table.velocities, dtype="<f8").tobytes(),
    ]
    if n_pw:
        parts.append(np.ascontiguousarray(table.eigvecs, dtype="<c16").view("<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def read_bands_binary(
    path: Path,
    lattice: LatticeSpec,
    groups: tuple[tuple[int, ...], tuple[int, ...]] | None = None,
) -> BandTable:
    blob = path.read_bytes()
    _check_magic(blob, BANDS_MAGIC, path)
    m, L, n_pw = struct.unpack_from("<3q", blob, MAGIC_SIZE)
    offset = MAGIC_SIZE + 24
    energies = np.frombuffer(blob, dtype="<f8", count=m * L * L, offset=offset).reshape(m, L, L)
    offset += energies.nbytes
    velocities = np.frombuffer(blob, dtype="<f8", count=m * L * L * 2, offset=offset).reshape(m, L, L, 2)
    offset += velocities.nbytes
    eigvecs = None
    if n_pw:
        raw = np.frombuffer(blob, dtype="<f8", count=m * L * L * n_pw * 2, offset=offset)
        eigvecs = raw.view("<c16").reshape(m, L, L, n_pw).copy()
    return BandTable(
        energies=energies.copy(),
        velocities=velocities.copy(),
        lattice=lattice,
        eigvecs=eigvecs,
        groups=groups,
        source="file",
    )


def write_checkpoint(path: Path, state: StateVector) -> Path:
    """Header, int64 dims (M, L), float64 time, then interleaved complex amplitudes."""

    blob = b"".join(
        [
            _header(STATE_MAGIC, state.n_branches, state.L),
            struct.pack("<d", state.time),
            np.ascontiguousarray(state.amplitudes, dtype="<c16").view("<f8").tobytes(),
        ]
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


def read_checkpoint(path: Path) -> StateVector:
    blob = path.read_bytes()
    _check_magic(blob, STATE_MAGIC, path)
    m, L = struct.unpack_from("<2q", blob, MAGIC_SIZE)
    (time,) = struct.unpack_from("<d", blob, MAGIC_SIZE + 16)
    raw = np.frombuffer(blob, dtype="<f8", count=m * L * L * 2, offset=MAGIC_SIZE + 24)
    return StateVector(raw.view("<c16").reshape(m, L, L).copy(), float(time))


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def file_checksums(directory: Path) -> dict[str, str]:
    """sha256 of every file under ``directory`` except the manifest itself."""
    return {
        path.relative_to(directory).as_posix(): sha256_file(path)
        for path in sorted(directory.rglob("*"))
        if path.is_file() and path.name != MANIFEST_NAME
    }


def write_manifest(directory: Path, body: Mapping[str, Any], timing: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """List every file with its checksum; the manifest hash excludes timing."""

    manifest = dict(body)
    manifest["code_version"] = code_version()
    manifest["files"] = file_checksums(directory)
    canonical = json.dumps(manifest, sort_keys=True, separators=(",", ":"), default=_default)
    manifest["manifest_hash"] = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    manifest["timing"] = dict(timing or {})
    write_json(directory / MANIFEST_NAME, manifest)
    return manifest


def read_manifest(directory: Path) -> dict[str, Any]:
    return read_json(directory / MANIFEST_NAME)


def refresh_manifest(directory: Path) -> dict[str, Any]:
    """Re-list the files of an existing manifest after new artifacts were added."""

    manifest = read_manifest(directory)
    timing = manifest.pop("timing", {})
    manifest.pop("manifest_hash", None)
    manifest.pop("files", None)
    manifest.pop("code_version", None)
    return write_manifest(directory, manifest, timing)


__all__ = [
    "BANDS_MAGIC",
    "MANIFEST_NAME",
    "STATE_MAGIC",
    "code_version",
    "dumps",
    "file_checksums",
    "read_bands_binary",
    "read_checkpoint",
    "read_frame",
    "read_json",
    "read_manifest",
    "refresh_manifest",
    "sha256_file",
    "write_bands_binary",
    "write_checkpoint",
    "write_frame",
    "write_json",
    "write_manifest",
]
