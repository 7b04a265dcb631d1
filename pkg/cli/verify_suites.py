"""
Acceptance suites run by ``cgflow verify``.

Each check returns a CheckResult with the measured value and its
threshold. A check that raises is reported as failed with the exception
text, so one broken component never hides the others.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from cg_flow import cg_sde
from cg_flow.errors import DegenerateGeometryError, NumericalError
from cg_flow.flow_core import LatentVideo, VideoMask
from cg_flow.geometry import (
    CameraIntrinsics,
    OrbitSpec,
    PointCloud,
    look_at,
    orbit_trajectory,
    ransac_plane,
    render_points,
    unproject,
    volumetric_sample,
)
from cg_flow.hyperparams import condition_adherence, toy_condition_oracle
from cg_flow.metrics import moment_check
from cg_flow.oracle_flow import (
    VelocityOracle,
    analytic_score_q,
    dirac_velocity,
    gaussian_velocity,
    log_density_q,
)
from cg_flow.physics_sim import MaterialParams, ParticleSet, SimConfig, mpm_step, simulate

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


CheckFn = Callable[[], CheckResult]
SUITES: Dict[str, List[CheckFn]] = {"sde": [], "oracle": [], "mpm": [], "geometry": []}
SUITE_NAMES = tuple(SUITES) + ("all",)


def check(suite: str, name: str, threshold: float, higher_is_better: bool = False):
    """Register ``fn`` (returning the measured value) as a check of ``suite``."""
    def decorator(fn: Callable[[], float]) -> CheckFn:
        def run() -> CheckResult:
            try:
                value = float(fn())
            except Exception as exc:
                logger.error("check %s.%s raised: %s", suite, name, exc, exc_info=True)
                return CheckResult(suite, name, False, float("nan"), threshold,
                                   f"{type(exc).__name__}: {exc}")
            passed = value >= threshold if higher_is_better else value <= threshold
            return CheckResult(suite, name, bool(passed), value, threshold)

        run.__name__ = f"{suite}.{name}"
        SUITES[suite].append(run)
        return run

    return decorator


# ============================================================================
# sde
# ============================================================================

@check("sde", "cancellation_identity", 1e-12)
def _cancellation_identity() -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        z, v_theta, v_eps, noise = rng.standard_normal((4, 16))
        tau = rng.uniform(0.1, 0.95)
        general = cg_sde.general_sde_step(z, v_theta, v_eps, tau, 0.2, cg_sde.beta_for_tau(tau), noise)
        simple = cg_sde.cf_sde_step(z, v_theta, tau, 0.2, noise)
        worst = max(worst, float(np.max(np.abs(general - simple))))
    return worst


@check("sde", "cancellation_coefficient", 1e-10)
def _cancellation_coefficient() -> float:
    # general step == (1 - g/tau) z + g (beta_tau v_eps + beta v_c) + noise
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        z, v_theta, v_eps, noise = rng.standard_normal((4, 16))
        tau, beta, gamma = rng.uniform(0.1, 0.95), rng.uniform(0.01, 3.0), 0.05
        expected = ((1.0 - gamma / tau) * z
                    + gamma * (cg_sde.beta_for_tau(tau) * v_eps + beta * (v_theta - v_eps))
                    + np.sqrt(2.0 * gamma) * noise)
        got = cg_sde.general_sde_step(z, v_theta, v_eps, tau, gamma, beta, noise)
        worst = max(worst, float(np.max(np.abs(got - expected))))
    return worst


@check("sde", "beta_value", 1e-4)
def _beta_value() -> float:
    return abs(cg_sde.beta_for_tau(1.0 / 1.0357) - 0.0357)


@check("sde", "tilting_moments", 0.05)
def _tilting_moments() -> float:
    tau, gamma, mu, z_ref = 0.8, 0.05, 1.0, 2.0
    beta = cg_sde.beta_for_tau(tau)
    samples = cg_sde.langevin_tilt_sample(np.array([mu]), tau, lambda z: -(z - z_ref), beta, gamma,
                                          burn_in=500, n_samples=50_000, seed=0, n_chains=100,
                                          thin=10)
    mean, var = cg_sde.tilted_gaussian_moments(np.array([mu]), tau, beta, np.array([z_ref]))
    # compare against the discretised chain's own stationary variance
    var = cg_sde.euler_maruyama_variance(1.0 / var, gamma)
    report = moment_check(samples, mean, [var], tol=0.05)
    return max(report.mean_deviation, report.var_deviation)


@check("sde", "gamma_stability", 0.2)
def _gamma_stability() -> float:
    tau = 0.85
    mu = LatentVideo(np.full((1, 4, 4, 3), 10.0))
    oracle = VelocityOracle.dirac(mu)
    rng = np.random.default_rng(0)
    z0 = LatentVideo((1.0 - tau) * mu.data + tau * rng.standard_normal(mu.shape))
    worst = 0.0
    for gamma in (0.2, 0.5, 0.8 * tau):
        report = cg_sde.latent_norm_trace(cg_sde.run_sde_chain(z0, oracle, tau, gamma, 50, seed=1))
        if report.diverged:
            return float("inf")
        worst = max(worst, report.max_rel_deviation)
    unstable = cg_sde.latent_norm_trace(cg_sde.run_sde_chain(z0, oracle, tau, 2.5 * tau, 50, seed=1))
    return worst if unstable.diverged else float("inf")


def _mask_contract_case(stage: str, seed: int) -> bool:
    rng = np.random.default_rng(seed)
    shape = (2, 3, 3, 2)
    samples = [LatentVideo(rng.standard_normal(shape)) for _ in range(4)]
    oracle = VelocityOracle.empirical(samples, ["a", "a", "b", "b"])
    video = LatentVideo(rng.standard_normal(shape))
    bg = LatentVideo(rng.standard_normal(shape))
    mask = VideoMask((rng.uniform(size=shape[:3]) < 0.5).astype(float))
    cfg = cg_sde.SdeConfig(tau=0.7, gamma=0.1, n_steps=3, stage=stage, seed=seed)
    result = cg_sde.run_phi_cf_detailed(video, "a", bg, mask, oracle, None, cfg)
    m = np.broadcast_to(mask.broadcast() > 0, shape)
    if stage == "stage1":
        return bool(np.array_equal(result.z_tau_star.data[m], result.z_tau_inv.data[m]))
    return bool(np.array_equal(result.z_tau_star.data[~m], result.z_tau_init.data[~m]))


@check("sde", "stage_mask_contracts", 0.0)
def _stage_mask_contracts() -> float:
    failures = sum(not _mask_contract_case(stage, seed)
                   for stage in ("stage1", "stage2") for seed in range(20))
    return float(failures)


# ============================================================================
# oracle
# ============================================================================

@check("oracle", "weights_normalised", 1e-12)
def _weights_normalised() -> float:
    oracle, conds = toy_condition_oracle()
    rng = np.random.default_rng(0)
    worst = 0.0
    for cond in (None, conds["A"], "B"):
        for t in (1e-3, 0.3, 0.9):
            w = oracle.posterior_weights(LatentVideo(rng.standard_normal(oracle.sample_shape)), t, cond)
            if np.any(w < 0):
                return float("inf")
            worst = max(worst, abs(float(w.sum()) - 1.0))
    return worst


@check("oracle", "dirac_agreement", 1e-12)
def _dirac_agreement() -> float:
    rng = np.random.default_rng(1)
    mu = LatentVideo(rng.standard_normal((2, 3, 3, 2)))
    oracle = VelocityOracle.empirical([mu], ["only"])
    worst = 0.0
    for t in (0.1, 0.5, 0.95):
        z = LatentVideo(rng.standard_normal(mu.shape))
        diff = oracle.velocity(z, t).data - dirac_velocity(z, t, mu).data
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst


@check("oracle", "gaussian_zero_variance", 1e-12)
def _gaussian_zero_variance() -> float:
    rng = np.random.default_rng(2)
    z, mu = rng.standard_normal((2, 32))
    return float(np.max(np.abs(gaussian_velocity(z, 0.4, mu, 0.0) - dirac_velocity(z, 0.4, mu))))


@check("oracle", "score_approximation", 1e-10)
def _score_approximation() -> float:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        tau = rng.uniform(0.1, 0.95)
        z, mu = rng.standard_normal((2, 8))
        approx = cg_sde.score_from_v_eps(z, dirac_velocity(z, tau, mu), tau)
        worst = max(worst, float(np.max(np.abs(approx - analytic_score_q(z, tau, mu)))))
    return worst


@check("oracle", "score_finite_difference", 1e-5)
def _score_finite_difference() -> float:
    rng = np.random.default_rng(4)
    tau, h = 0.6, 1e-5
    z, mu = rng.standard_normal((2, 6))
    fd = np.array([(log_density_q(z + h * e, tau, mu) - log_density_q(z - h * e, tau, mu)) / (2 * h)
                   for e in np.eye(z.size)])
    return float(np.max(np.abs(fd - analytic_score_q(z, tau, mu))))


@check("oracle", "condition_adherence", 0.95, higher_is_better=True)
def _condition_adherence() -> float:
    oracle, conds = toy_condition_oracle()
    start = LatentVideo(np.full(oracle.sample_shape, -3.0))
    report = condition_adherence(oracle, start, conds["A"], "A", tau=0.8, gamma=0.2,
                                 n_steps=10, n_seeds=100)
    logger.info("adherence baselines: N=0 %.2f, unconditional %.2f", report.rate_n0,
                report.rate_unconditional)
    return report.rate


# ============================================================================
# mpm
# ============================================================================

def _block(center: Sequence[float], size: float, spacing: float, material: MaterialParams,
           velocity: Sequence[float] = (0.0, 0.0, 0.0), object_id: int = 1) -> ParticleSet:
    n = max(1, int(round(size / spacing)))
    axis = (np.arange(n) - (n - 1) / 2.0) * spacing
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    cloud = PointCloud(pts + np.asarray(center), np.full((pts.shape[0], 3), 0.5),
                       np.full(pts.shape[0], object_id))
    return ParticleSet.from_cloud(cloud, material, spacing, velocity)


ELASTIC = MaterialParams(8e4, 0.32, 40.0, "elastic")


@check("mpm", "mass_conservation", 0.0)
def _mass_conservation() -> float:
    p = _block((0.0, 0.0, 0.3), 0.1, 0.02, ELASTIC, (0.3, 0.0, 0.0))
    cfg = SimConfig(gravity=(0.0, 0.0, -9.81))
    traj = simulate(p, [], cfg, n_frames=20)
    masses = [d.total_mass for d in traj.diagnostics]
    return float(max(masses) - min(masses))


@check("mpm", "momentum_drift", 1e-6)
def _momentum_drift() -> float:
    a = _block((-0.15, 0.0, 0.5), 0.1, 0.02, ELASTIC, (0.5, 0.0, 0.0), 1)
    b = _block((0.15, 0.0, 0.5), 0.1, 0.02, ELASTIC, (-0.2, 0.1, 0.0), 2)
    cfg = SimConfig(gravity=(0.0, 0.0, 0.0), ground_height=None, walls=False)
    traj = simulate(ParticleSet.merge([a, b]), [], cfg, n_frames=200)
    p0 = np.asarray(traj.diagnostics[0].momentum)
    drift = max(np.linalg.norm(np.asarray(d.momentum) - p0) for d in traj.diagnostics)
    return float(drift / np.linalg.norm(p0))


@check("mpm", "equilibrium", 1e-9)
def _equilibrium() -> float:
    p = _block((0.0, 0.0, 0.5), 0.1, 0.02, ELASTIC)
    x0 = p.positions.copy()
    cfg = SimConfig(gravity=(0.0, 0.0, 0.0), ground_height=None, walls=False)
    for frame in range(100):
        p = mpm_step(p, cfg, frame=frame)
    return float(np.max(np.abs(p.positions - x0)))


@check("mpm", "falling_block_settling", 0.05)
def _falling_block_settling() -> float:
    p = _block((0.0, 0.0, 0.5), 0.2, 0.025, MaterialParams.from_config("mpm"))
    cfg = SimConfig()
    traj = simulate(p, [], cfg, n_frames=120)
    if traj.positions[:, :, 2].min() < cfg.ground_height - cfg.grid_dx:
        return float("inf")
    ke = traj.kinetic_energy()
    return float(ke[-1] / max(ke.max(), 1e-12))


@check("mpm", "cfl_guard", 0.0)
def _cfl_guard() -> float:
    p = _block((0.0, 0.0, 0.5), 0.1, 0.02, ELASTIC)
    try:
        simulate(p, [], SimConfig(dt=0.5, substeps=1), n_frames=5)
    except NumericalError as exc:
        logger.info("CFL guard fired at substep %s", exc.index)
        return 0.0
    return 1.0


# ============================================================================
# geometry
# ============================================================================

@check("geometry", "render_unproject_roundtrip", 1e-3)
def _render_unproject_roundtrip() -> float:
    intr = CameraIntrinsics.centered()
    pose = look_at(np.array([0.3, -2.0, 0.8]), np.array([0.0, 0.0, 0.4]))
    rng = np.random.default_rng(0)
    select = np.zeros((intr.height, intr.width), dtype=bool)
    select[1::4, 2::4] = True
    depth = rng.uniform(1.5, 2.5, size=select.shape)
    colors = rng.uniform(size=select.shape + (3,))
    cloud = unproject(depth, intr, pose, colors, select)
    res = render_points(cloud, intr, pose, 0.5)
    back = unproject(res.depth, intr, pose, res.frame, res.mask > 0)
    if len(back) != len(cloud):
        return float("inf")
    return float(np.max(np.abs(back.positions - cloud.positions)))


@check("geometry", "ransac_normal_deg", 1.0)
def _ransac_normal() -> float:
    rng = np.random.default_rng(0)
    plane_pts = np.column_stack([rng.uniform(-1, 1, (700, 2)), 0.2 + 1e-3 * rng.standard_normal(700)])
    outliers = rng.uniform([-1, -1, -0.8], [1, 1, 1.2], (300, 3))
    plane, inliers = ransac_plane(np.vstack([plane_pts, outliers]), n_iters=200, inlier_thresh=5e-3,
                                  seed=0)
    if abs(plane.offset - 0.2) > 2e-3 or inliers.size < 650:
        return float("inf")
    return float(np.degrees(np.arccos(np.clip(plane.normal[2], -1.0, 1.0))))


@check("geometry", "orbit_rotation_step", 1e-6)
def _orbit_rotation_step() -> float:
    k = 36
    poses = orbit_trajectory(OrbitSpec((0.0, 0.0, 0.5), 1.0, np.radians(15.0), k))
    steps = [np.degrees(Rotation.from_matrix(a.rotation.T @ b.rotation).magnitude())
             for a, b in zip(poses, poses[1:] + poses[:1])]
    return float(np.max(np.abs(np.array(steps) - 360.0 / k)))


@check("geometry", "polar_orbit_rejected", 0.0)
def _polar_orbit_rejected() -> float:
    try:
        orbit_trajectory(OrbitSpec((0.0, 0.0, 0.0), 1.0, np.pi / 2, 4))
    except DegenerateGeometryError:
        return 0.0
    return 1.0


@check("geometry", "volumetric_cube_count", 0.1)
def _volumetric_cube_count() -> float:
    g = np.linspace(0.0, 1.0, 41)
    u, v = [a.ravel() for a in np.meshgrid(g, g)]
    faces = []
    for axis in range(3):
        for value in (0.0, 1.0):
            cols = [u, v]
            cols.insert(axis, np.full(u.size, value))
            faces.append(np.column_stack(cols))
    pts = np.unique(np.vstack(faces), axis=0)
    cloud = PointCloud(pts, np.full(pts.shape, 0.5), np.ones(pts.shape[0], dtype=np.int64))
    filled = volumetric_sample(cloud, voxel_size=0.1, particle_spacing=0.25)
    return abs(len(filled) - 64) / 64.0


# ============================================================================
# runner
# ============================================================================

def run_suite(name: str) -> List[CheckResult]:
    """Run one suite (or ``all``) and return its results in registration order."""
    if name not in SUITE_NAMES:
        raise KeyError(f"unknown suite '{name}', expected one of {', '.join(SUITE_NAMES)}")
    names = list(SUITES) if name == "all" else [name]
    results = []
    for suite in names:
        for fn in SUITES[suite]:
            logger.info("running %s", fn.__name__)
            results.append(fn())
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    rows = [("suite", "check", "status", "value", "threshold", "detail")]
    rows += [(r.suite, r.name, "PASS" if r.passed else "FAIL", f"{r.value:.4g}", f"{r.threshold:.4g}",
              r.detail) for r in results]
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row[:5], widths)) + ("  " + row[5] if row[5] else "")
             for row in rows]
    return "\n".join(line.rstrip() for line in lines)
