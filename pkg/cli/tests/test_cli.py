"""
Exit codes and output of the cgflow command line.
"""
import argparse
from unittest.mock import patch

import pytest
from pydantic import ValidationError

from cg_flow import cg_sde
from cg_flow.errors import ConfigError, DomainError, NumericalError, StageError
from cg_flow.physics_sim import SimConfig
from cli.main import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY_FAILED, exit_code_for, main
from cli.middleware.validation import ArgumentValidator

_original_general_step = cg_sde.general_sde_step


def _flipped_v_eps_step(z, v_theta, v_eps, tau, gamma, beta, noise):
    """General step with the sign of the condition-agnostic term reversed."""
    return _original_general_step(z, v_theta, -v_eps, tau, gamma, beta, noise)


# --- verify ---

def test_verify_sde_passes(capsys):
    """The sde suite passes against the shipped update rules."""
    assert main(["verify", "sde"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert "FAIL" not in out


def test_verify_detects_flipped_cancellation_term(capsys):
    """A sign error in the v_eps term must fail verification."""
    with patch("cg_flow.cg_sde.general_sde_step", side_effect=_flipped_v_eps_step):
        code = main(["verify", "sde"])
    out = capsys.readouterr().out
    assert code == EXIT_VERIFY_FAILED, "mutated step should fail the sde suite"
    assert "cancellation" in out
    assert "sde.cancellation_coefficient" in out


def test_verify_geometry_passes(capsys):
    assert main(["verify", "geometry"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out


# --- configuration errors ---

def test_missing_scene_file(tmp_path, out_dir, capsys):
    code = main(["simulate", "--scene", str(tmp_path / "missing.cfg"), "--out", out_dir])
    assert code == EXIT_CONFIG
    assert "scene file not found" in capsys.readouterr().err


def test_polar_orbit_is_a_config_error(golden_scene, out_dir, capsys):
    code = main(["orbit", "--scene", golden_scene, "--out", out_dir,
                 "--set", "orbit.elevation_deg=90"])
    assert code == EXIT_CONFIG
    assert "orbit.elevation_deg" in capsys.readouterr().err


def test_unknown_scene_key(golden_scene, out_dir):
    assert main(["simulate", "--scene", golden_scene, "--out", out_dir,
                 "--set", "sim.warp=9"]) == EXIT_CONFIG


def test_malformed_override(golden_scene, out_dir):
    assert main(["simulate", "--scene", golden_scene, "--out", out_dir,
                 "--set", "substeps"]) == EXIT_CONFIG


@pytest.mark.parametrize("argv", [
    [],
    ["verify", "everything"],
    ["sweep", "delta"],
    ["simulate"],
    ["sweep", "gamma", "--n-seeds", "many"],
])
def test_usage_errors(argv):
    """argparse usage errors keep its exit status 2."""
    assert main(argv) == EXIT_CONFIG


@pytest.mark.parametrize("argv", [
    ["sweep", "gamma", "--tau", "1.5"],
    ["sweep", "beta", "--n-seeds", "0"],
    ["verify", "sde", "--threads", "0"],
    ["verify", "sde", "--log-level", "LOUD"],
])
def test_invalid_argument_values(argv):
    assert main(argv) == EXIT_CONFIG


def test_output_path_must_be_a_directory(golden_scene, tmp_path):
    target = tmp_path / "file.txt"
    target.write_text("taken")
    assert main(["simulate", "--scene", golden_scene, "--out", str(target)]) == EXIT_CONFIG


# --- runtime errors ---

def test_unstable_simulation_exits_3(golden_scene, out_dir, capsys):
    """A time step far beyond the CFL limit is a numerical failure."""
    code = main(["simulate", "--scene", golden_scene, "--out", out_dir,
                 "--set", "sim.dt=0.5", "--set", "sim.substeps=1"])
    assert code == EXIT_RUNTIME
    assert "error:" in capsys.readouterr().err


@pytest.mark.parametrize("exc, expected", [
    (ConfigError("bad", key="sim.dt"), EXIT_CONFIG),
    (FileNotFoundError("x"), EXIT_CONFIG),
    (NumericalError("nan", stage="mpm", index=3), EXIT_RUNTIME),
    (DomainError("tau out of range"), EXIT_RUNTIME),
    (StageError("stage2", NumericalError("CFL")), EXIT_RUNTIME),
    (StageError("stage1", ConfigError("bad")), EXIT_CONFIG),
    (RuntimeError("boom"), EXIT_RUNTIME),
])
def test_exit_code_for(exc, expected):
    assert exit_code_for(exc) == expected


def test_pydantic_errors_are_config_errors():
    with pytest.raises(ValidationError) as ctx:
        SimConfig(dt=-1.0)
    assert exit_code_for(ctx.value) == EXIT_CONFIG


# --- validation middleware ---

def test_validator_rejects_unknown_command():
    args = argparse.Namespace(command="render", log_level="INFO", threads=1)
    with pytest.raises(ConfigError):
        ArgumentValidator()(args)


def test_validator_accepts_scene_command_without_out(golden_scene):
    args = argparse.Namespace(command="pipeline", log_level="INFO", threads=2, seed=None,
                              scene=golden_scene, out=None, overrides=["sde.stage1.tau=0.7"])
    assert ArgumentValidator()(args) is args


# --- sweep ---

def test_gamma_sweep_table(capsys):
    assert main(["sweep", "gamma", "--tau", "0.8"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "gamma\tmax_rel_deviation\tdiverged"
    assert len(lines) == 6
    assert lines[1].endswith("False"), "smallest step should stay stable"
    assert lines[-1].endswith("True"), "gamma = 2.5 tau should diverge"
