"""Tests for artifact files and the run manifest."""

import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

from src.bands import synthetic_band_table
from src.errors import InvalidInputError
from src.mcwf import StateVector
from src.persist import (
    MANIFEST_NAME,
    dumps,
    read_bands_binary,
    read_checkpoint,
    read_frame,
    read_json,
    refresh_manifest,
    write_bands_binary,
    write_checkpoint,
    write_frame,
    write_json,
    write_manifest,
)


class TestBandsBinary:
    """Tests for the bands.bin layout."""

    def test_header_and_size(self, tmp_path, reference_table) -> None:
        path = write_bands_binary(tmp_path / "bands.bin", reference_table)
        blob = path.read_bytes()
        assert blob[:10] == b"MCWFBANDS1"
        assert np.frombuffer(blob[16:40], dtype="<i8").tolist() == [6, 12, 0]
        assert len(blob) == 40 + 8 * 6 * 144 * 3

    def test_restores_arrays_and_groups(self, tmp_path, lattice, reference_table) -> None:
        path = write_bands_binary(tmp_path / "bands.bin", reference_table)
        table = read_bands_binary(path, lattice, reference_table.groups)
        assert np.array_equal(table.energies, reference_table.energies)
        assert np.array_equal(table.velocities, reference_table.velocities)
        assert table.upper == reference_table.upper
        assert table.source == "file"

    def test_keeps_eigenvectors(self, tmp_path, lattice, rng) -> None:
        table = synthetic_band_table([0.0, 1.0], [0.1, 0.1], 2, lattice, classify=False)
        eigvecs = rng.normal(size=(2, 2, 2, 7)) + 1j * rng.normal(size=(2, 2, 2, 7))
        table = dataclasses.replace(table, eigvecs=eigvecs)
        restored = read_bands_binary(write_bands_binary(tmp_path / "bands.bin", table), lattice)
        assert np.array_equal(restored.eigvecs, eigvecs)

    def test_bad_magic(self, tmp_path, lattice) -> None:
        path = tmp_path / "bands.bin"
        path.write_bytes(b"NOTBANDS" + bytes(64))
        with pytest.raises(InvalidInputError, match="header"):
            read_bands_binary(path, lattice)


class TestCheckpoint:
    """Tests for state checkpoints."""

    def test_restores_state(self, tmp_path, rng) -> None:
        state = StateVector(rng.normal(size=(6, 4, 4)) + 1j * rng.normal(size=(6, 4, 4)), time=12.5)
        restored = read_checkpoint(write_checkpoint(tmp_path / "state.bin", state))
        assert np.array_equal(restored.amplitudes, state.amplitudes)
        assert restored.time == 12.5

    def test_rejects_bands_file(self, tmp_path, reference_table) -> None:
        path = write_bands_binary(tmp_path / "bands.bin", reference_table)
        with pytest.raises(InvalidInputError):
            read_checkpoint(path)


class TestJsonAndFrames:
    """Tests for the JSON and CSV helpers."""

    def test_numpy_values(self, tmp_path) -> None:
        path = write_json(tmp_path / "out" / "values.json", {"b": np.float64(1.5), "a": np.arange(3)})
        assert read_json(path) == {"a": [0, 1, 2], "b": 1.5}
        assert dumps({"b": 1, "a": 2}).index('"a"') < dumps({"b": 1, "a": 2}).index('"b"')

    def test_missing_file(self, tmp_path) -> None:
        with pytest.raises(FileNotFoundError, match="absent.json"):
            read_json(tmp_path / "absent.json")

    def test_frame_precision(self, tmp_path) -> None:
        frame = pd.DataFrame({"t_ps": [0.1, 1.0 / 3.0]})
        restored = read_frame(write_frame(tmp_path / "msd.csv", frame))
        assert restored["t_ps"].tolist() == pytest.approx([0.1, 1.0 / 3.0], rel=1e-11)


class TestManifest:
    """Tests for write_manifest and refresh_manifest."""

    def test_lists_files_with_checksums(self, tmp_path) -> None:
        (tmp_path / "point").mkdir()
        (tmp_path / "point" / "msd.csv").write_text("t_ps\n0\n")
        manifest = write_manifest(tmp_path, {"config_hash": "abc"}, {"wall_time_s": 1.0})
        assert set(manifest["files"]) == {"point/msd.csv"}
        assert len(manifest["files"]["point/msd.csv"]) == 64
        assert json.loads((tmp_path / MANIFEST_NAME).read_text())["manifest_hash"] == manifest["manifest_hash"]

    def test_hash_ignores_timing(self, tmp_path) -> None:
        (tmp_path / "a.txt").write_text("x")
        first = write_manifest(tmp_path, {"config_hash": "abc"}, {"wall_time_s": 1.0})
        second = write_manifest(tmp_path, {"config_hash": "abc"}, {"wall_time_s": 99.0})
        assert first["manifest_hash"] == second["manifest_hash"]

    def test_hash_tracks_file_content(self, tmp_path) -> None:
        (tmp_path / "a.txt").write_text("x")
        first = write_manifest(tmp_path, {})
        (tmp_path / "a.txt").write_text("y")
        assert write_manifest(tmp_path, {})["manifest_hash"] != first["manifest_hash"]

    def test_refresh_picks_up_new_files(self, tmp_path) -> None:
        (tmp_path / "a.txt").write_text("x")
        write_manifest(tmp_path, {"config_hash": "abc"}, {"wall_time_s": 2.0})
        (tmp_path / "analysis.json").write_text("{}")
        refreshed = refresh_manifest(tmp_path)
        assert set(refreshed["files"]) == {"a.txt", "analysis.json"}
        assert refreshed["config_hash"] == "abc"
        assert refreshed["timing"] == {"wall_time_s": 2.0}
