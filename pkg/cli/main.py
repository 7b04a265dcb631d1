"""
cgflow command line

Sub-commands:
- simulate: run the physics solver on the scene's ground-truth objects
- orbit: Stage 1 (orbit completion) and its coverage statistic
- pipeline: both stages with every artifact and the run manifest
- verify: acceptance suites (sde, oracle, mpm, geometry, all)
- sweep: hyperparameter analyses on the two-condition toy dataset

Exit codes:
    0  success
    1  verification failure
    2  configuration error (bad flag, scene file, key or value)
    3  numerical or runtime error

Example Usage:
    ```bash
    cgflow pipeline --scene scenes/falling_block.cfg --seed 0 --out runs/fb
    cgflow verify sde
    cgflow simulate --scene scenes/falling_block.cfg --set sim.substeps=80
    ```
"""

import argparse
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError

from config import LOGGING_CONFIG, RUNTIME_CONFIG, SDE_CONFIG
from cg_flow.cg_sde import beta_for_tau
from cg_flow.errors import CGFlowError, ConfigError, NumericalError, StageError
from cg_flow.flow_core import LatentVideo
from cg_flow.hyperparams import (
    beta_sweep,
    gamma_sweep,
    iteration_sweep,
    sweep_table,
    tau_sweep,
    toy_condition_oracle,
)
from cg_flow.oracle_flow import VelocityOracle
from cg_flow.pipeline import end_to_end, ground_truth_particles, stage1
from cg_flow.physics_sim import simulate
from cg_flow.scenes import render_trajectory
from cli import verify_suites
from cli.middleware.validation import setup_validation
from data_layer.formats import RunArtifactStore
from data_layer.scene_config import load_scene

logger = logging.getLogger("cgflow")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SWEEPS = ("gamma", "beta", "tau", "iterations")


def setup_logging(level: Optional[str] = None) -> None:
    """Set up logging configuration: rotating file plus console."""
    log_dir = Path(LOGGING_CONFIG["log_dir"])
    log_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_cgflow", False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOGGING_CONFIG["format"])
    file_handler = RotatingFileHandler(
        log_dir / LOGGING_CONFIG["log_file"],
        maxBytes=LOGGING_CONFIG["max_file_size_mb"] * 1024 * 1024,
        backupCount=LOGGING_CONFIG["backup_count"],
    )
    console = logging.StreamHandler(sys.stderr)
    for handler in (file_handler, console):
        handler.setFormatter(formatter)
        handler._cgflow = True
        root.addHandler(handler)
    root.setLevel((level or LOGGING_CONFIG["level"]).upper())


def exit_code_for(exc: BaseException) -> int:
    """Map an exception onto the exit-code contract."""
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, (ConfigError, ValidationError, FileNotFoundError)):
        return EXIT_CONFIG
    return EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=LOGGING_CONFIG["level"],
                        help="DEBUG, INFO, WARNING or ERROR (default from CGFLOW_LOG_LEVEL)")
    common.add_argument("--threads", type=int, default=RUNTIME_CONFIG["threads"],
                        help="worker threads for per-frame rendering (default from CGFLOW_THREADS)")

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--scene", required=True, help="scene file ([section] key = value)")
    scene.add_argument("--seed", type=int, default=None, help="override the scene and sampler seeds")
    scene.add_argument("--out", default=None,
                       help="output directory (default: CGFLOW_OUTPUT_DIR/<scene name>)")
    scene.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one scene value; repeatable")

    parser = argparse.ArgumentParser(prog="cgflow", description="Consistency-guided flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common, scene], help="simulate the scene's objects")
    sub.add_parser("orbit", parents=[common, scene], help="stage 1: orbit completion")
    sub.add_parser("pipeline", parents=[common, scene], help="run both stages end to end")

    verify = sub.add_parser("verify", parents=[common], help="run acceptance suites")
    verify.add_argument("suite", choices=verify_suites.SUITE_NAMES, help="suite to run")

    sweep = sub.add_parser("sweep", parents=[common], help="hyperparameter analyses on a toy dataset")
    sweep.add_argument("analysis", choices=SWEEPS, help="parameter to sweep")
    sweep.add_argument("--tau", type=float, default=0.8, help="SDE time tau (default 0.8)")
    sweep.add_argument("--n-seeds", type=int, default=20, help="seeded runs per setting (default 20)")
    return parser


def _resolve_out(args: argparse.Namespace, scene_name: str) -> Path:
    return Path(args.out) if args.out else Path(RUNTIME_CONFIG["output_dir"]) / scene_name


def _load(args: argparse.Namespace):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"{section}.seed={args.seed}" for section in ("scene", "sde.stage1", "sde.stage2")]
    return load_scene(args.scene, overrides)


def cmd_simulate(args: argparse.Namespace) -> int:
    spec, text = _load(args)
    out = _resolve_out(args, spec.name)
    store = RunArtifactStore(out, text)
    particles = ground_truth_particles(spec)
    logger.info("simulating %d particles for %d frames", len(particles), spec.n_frames)
    traj = simulate(particles, [], spec.sim, spec.drivers, spec.n_frames)
    frames, _ = render_trajectory(traj, spec.intr, spec.input_pose, spec.background,
                                  spec.point_radius_px)
    store.write_trajectory("traj.cgtj", traj)
    store.write_frames("sim", frames)
    first, last = traj.diagnostics[0], traj.diagnostics[-1]
    diagnostics = {
        "particles": traj.n_points,
        "frames": traj.n_frames - 1,
        "mass_initial": repr(first.total_mass),
        "mass_final": repr(last.total_mass),
        "momentum_final": " ".join(repr(float(v)) for v in last.momentum),
        "kinetic_energy_peak": repr(float(traj.kinetic_energy().max())),
        "kinetic_energy_final": repr(last.kinetic_energy),
        "min_height_final": repr(last.min_height),
    }
    store.write_report("report.txt", diagnostics)
    manifest = store.write_manifest()
    for key, value in diagnostics.items():
        print(f"{key} = {value}")
    print(f"manifest = {manifest}")
    return EXIT_OK


def cmd_orbit(args: argparse.Namespace) -> int:
    spec, text = _load(args)
    out = _resolve_out(args, spec.name)
    store = RunArtifactStore(out, text)
    result = stage1(spec, threads=args.threads)
    store.write_frames("orbit", result.output.data[..., :3])
    store.write_mask("orbit/mask.cgfl", result.mask)
    store.write_poses("orbit/poses.txt", result.poses)
    store.write_ply("cloud.ply", result.cloud)
    store.write_text("trace_stage1.txt", result.trace.to_table())
    store.write_report("report.txt", {"coverage": repr(result.coverage),
                                      "input_points": len(result.input_cloud),
                                      "cloud_points": len(result.cloud)})
    manifest = store.write_manifest()
    print(f"coverage = {result.coverage:.4f}")
    print(f"manifest = {manifest}")
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    spec, text = _load(args)
    summary = end_to_end(spec, _resolve_out(args, spec.name), text, threads=args.threads)
    print(f"run_dir = {summary.run_dir}")
    print(f"coverage = {summary.coverage:.4f}")
    print(f"manifest = {summary.manifest_hash}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    results = verify_suites.run_suite(args.suite)
    print(verify_suites.format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: "
              + ", ".join(f"{r.suite}.{r.name}" for r in failed))
        return EXIT_VERIFY_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    oracle, conds = toy_condition_oracle()
    start = LatentVideo(np.full(oracle.sample_shape, -3.0))
    tau = args.tau
    if args.analysis == "gamma":
        mu = LatentVideo(np.full(oracle.sample_shape, 10.0))
        dirac = VelocityOracle.dirac(mu)
        z0 = LatentVideo((1.0 - tau) * mu.data + tau * np.random.default_rng(0).standard_normal(mu.shape))
        rows = gamma_sweep([0.2 * tau, 0.5 * tau, 0.8 * tau, 1.5 * tau, 2.5 * tau], tau, dirac, z0)
        print(sweep_table(rows, ["gamma", "max_rel_deviation", "diverged"]), end="")
    elif args.analysis == "beta":
        betas = sorted(set(SDE_CONFIG["beta_ablation"]) | {beta_for_tau(tau)})
        rows = beta_sweep(betas, tau, SDE_CONFIG["gamma"] * tau, oracle, conds["A"], "A", start,
                          n_seeds=args.n_seeds)
        print(sweep_table(rows, ["beta", "adherence", "q_departure"]), end="")
    elif args.analysis == "tau":
        rates = tau_sweep([0.3, 0.5, 0.7, 0.8, 0.9], oracle, start, conds["A"], "A", n_seeds=args.n_seeds)
        print("tau\tadherence")
        for t, rate in rates.items():
            print(f"{t:.6g}\t{rate:.6g}")
    else:
        rates = iteration_sweep([0, 1, 2, 5, 10, 20], oracle, start, conds["A"], "A", tau=tau,
                                n_seeds=args.n_seeds)
        print("n_steps\tadherence")
        for n, rate in rates.items():
            print(f"{n}\t{rate:.6g}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "orbit": cmd_orbit,
    "pipeline": cmd_pipeline,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    setup_logging(args.log_level if args.log_level.upper() in ("DEBUG", "INFO", "WARNING", "ERROR",
                                                                 "CRITICAL") else None)
    try:
        setup_validation(args)
        return COMMANDS[args.command](args)
    except (CGFlowError, ValidationError, FileNotFoundError, OSError) as exc:
        code = exit_code_for(exc)
        if isinstance(exc, NumericalError) or (isinstance(exc, StageError)
                                               and isinstance(exc.cause, NumericalError)):
            cause = exc.cause if isinstance(exc, StageError) else exc
            logger.error("numerical failure in %s at index %s: %s", cause.stage, cause.index, exc)
        else:
            logger.error("%s failed: %s", args.command, exc, exc_info=code == EXIT_RUNTIME)
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:
        logger.error("unexpected failure in %s: %s", args.command, exc, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
