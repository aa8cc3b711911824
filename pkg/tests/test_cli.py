"""Tests for the command-line entry point and its exit codes."""

import json
from pathlib import Path
from unittest.mock import patch

import pytest

from src.cli import EXIT_ACCEPTANCE, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, build_parser, main
from src.errors import EnsembleError
from src.runner import OracleOutcome


@pytest.fixture
def config_path(tmp_path) -> Path:
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps(
            {
                "grid": {"L": 9, "band_source": "reference-table"},
                "ensemble": {"n_traj": 2, "t_max_jump_times": 20.0, "samples_per_jump_time": 1.0},
                "outputs": {"directory": str(tmp_path / "results"), "n_traces": 0},
            }
        )
    )
    return path


class TestParser:
    """Tests for build_parser."""

    def test_common_options(self) -> None:
        args = build_parser().parse_args(["run", "cfg.json", "--threads", "4", "--seed", "9", "--quiet"])
        assert args.command == "run"
        assert args.threads == 4
        assert args.seed == 9
        assert args.quiet

    def test_unknown_subcommand(self) -> None:
        assert main(["simulate", "cfg.json"]) == EXIT_USAGE


class TestExitCodes:
    """Tests for main() exit codes."""

    def test_schema(self, capsys) -> None:
        assert main(["schema"]) == EXIT_OK
        assert "physics" in json.loads(capsys.readouterr().out)["properties"]

    def test_config_error_names_field(self, tmp_path, capsys) -> None:
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"physics": {"T_list": [-5]}}))
        assert main(["run", str(path)]) == EXIT_USAGE
        assert "physics.T_list[0] must be > 0" in capsys.readouterr().err

    def test_missing_config(self, tmp_path) -> None:
        assert main(["bands", str(tmp_path / "absent.json")]) == EXIT_USAGE

    def test_threads_must_be_positive(self, config_path) -> None:
        assert main(["run", str(config_path), "--threads", "0"]) == EXIT_USAGE

    @pytest.mark.parametrize(
        ("argv", "target"),
        [
            (["analyze"], "src.runner.analyze_directory"),
            (["trace", "--seed", "1"], "src.runner.trace_trajectory"),
        ],
    )
    def test_threads_checked_for_directory_commands(self, tmp_path, capsys, argv, target) -> None:
        with patch(target) as entry:
            assert main([*argv[:1], str(tmp_path), *argv[1:], "--threads", "0"]) == EXIT_USAGE
        entry.assert_not_called()
        assert "--threads must be >= 1" in capsys.readouterr().err

    def test_trace_needs_seed(self, tmp_path) -> None:
        assert main(["trace", str(tmp_path)]) == EXIT_USAGE

    def test_analyze_missing_directory(self, tmp_path) -> None:
        assert main(["analyze", str(tmp_path / "nothing")]) == EXIT_USAGE

    def test_numerical_failure(self, config_path, capsys) -> None:
        with patch("src.runner.run", side_effect=EnsembleError("2 of 2 trajectories aborted at T=110 K")):
            assert main(["run", str(config_path)]) == EXIT_NUMERICAL
        assert "EnsembleError" in capsys.readouterr().err

    def test_oracle_failure(self, config_path, tmp_path) -> None:
        outcome = OracleOutcome(passed=False, reports=[], path=tmp_path / "oracle_report.json")
        with patch("src.runner.oracle_check", return_value=outcome):
            assert main(["oracle-check", str(config_path)]) == EXIT_ACCEPTANCE

    def test_run_and_analyze(self, config_path, tmp_path, capsys) -> None:
        out = tmp_path / "elsewhere"
        assert main(["run", str(config_path), "--out", str(out), "--seed", "3", "--quiet"]) == EXIT_OK
        assert (out / "manifest.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["ensemble"]["master_seed"] == 3

        assert main(["analyze", str(out)]) == EXIT_OK
        assert "T110_g1: D =" in capsys.readouterr().out
