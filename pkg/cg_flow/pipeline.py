"""
pipeline.py - Two-Stage Orchestration

This module wires the geometric, physical and generative pieces into the
two stages and the end-to-end run:
1. Stage 1: unproject the input view, splat the cloud along an orbit,
   complete the orbit video with Phi_CF and unproject the completion
2. Stage 2: estimate the ground, fill objects with particles, simulate,
   splat the trajectory over the background and refine it with Phi_CF
3. end_to_end: both stages plus every artifact and the run manifest

Key Features:
- Stage-1 latents carry r, g, b, depth and alpha (identity codec), so
  completed pixels are lifted with their generated depth
- Rendering is parallel over frames; results do not depend on the thread count
- Every stage failure is re-raised as StageError tagged with the stage name
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from config import GEOMETRY_CONFIG, RUNTIME_CONFIG, SIM_CONFIG
from cg_flow.cg_sde import PhiCFResult, SdeConfig, SdeTrace, run_phi_cf_detailed
from cg_flow.errors import ConfigError, StageError
from cg_flow.flow_core import LatentVideo, VideoMask, mask_mix
from cg_flow.geometry import (
    CameraIntrinsics,
    CameraPose,
    OrbitSpec,
    Plane,
    PointCloud,
    ground_contact,
    look_at,
    orbit_trajectory,
    ransac_plane,
    remove_density_outliers,
    render_points,
    stack_masks,
    unproject,
    volumetric_sample,
)
from cg_flow.metrics import voxel_coverage
from cg_flow.oracle_flow import VelocityOracle
from cg_flow.physics_sim import (
    ParticleSet,
    PointTrajectories,
    RigidParams,
    SimConfig,
    SphParams,
    simulate,
)
from cg_flow.scenes import (
    SceneObject,
    background_image,
    default_orbit,
    falling_block_objects,
    orbit_latent,
    raycast,
    render_trajectory,
    segment_points,
    stage1_dataset,
    stage2_dataset,
)
from data_layer.formats import RunArtifactStore

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class DatasetSpec:
    n_jitter: int = 2
    distractor: bool = True


@dataclass
class SceneSpec:
    """Everything one run needs: objects, cameras, solver and sampler settings."""

    name: str
    objects: List[SceneObject]
    intr: CameraIntrinsics
    input_pose: CameraPose
    orbit: OrbitSpec
    sim: SimConfig = field(default_factory=SimConfig)
    sde_stage1: SdeConfig = field(default_factory=lambda: SdeConfig(tau=0.8, stage="stage1"))
    sde_stage2: SdeConfig = field(default_factory=lambda: SdeConfig(tau=0.8, stage="stage2"))
    ground_height: float = 0.0
    n_frames: int = 24
    particle_spacing: float = SIM_CONFIG["particle_spacing"]
    voxel_size: float = GEOMETRY_CONFIG["voxel_size"]
    point_radius_px: float = GEOMETRY_CONFIG["point_radius_px"]
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    drivers: List = field(default_factory=list)
    rigid: RigidParams = field(default_factory=RigidParams)
    sph: SphParams = field(default_factory=SphParams)
    seed: int = 0

    def __post_init__(self):
        if not self.objects:
            raise ConfigError("scene needs at least one object", key="scene.objects")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"object ids must be unique, got {ids}", key="scene.objects")
        if self.sde_stage1.stage != "stage1" or self.sde_stage2.stage != "stage2":
            raise ConfigError("SDE sections are bound to their stages", key="sde.stage")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1", key="scene.n_frames")

    @property
    def background(self) -> np.ndarray:
        return background_image(self.intr, self.input_pose, self.ground_height)

    def object_by_id(self, object_id: int) -> Optional[SceneObject]:
        return next((o for o in self.objects if o.object_id == object_id), None)


@dataclass
class Stage1Result:
    guidance: LatentVideo
    output: LatentVideo
    mask: VideoMask
    poses: List[CameraPose]
    input_cloud: PointCloud
    ground_cloud: PointCloud
    cloud: PointCloud
    reference_cloud: PointCloud
    coverage: float
    phi: PhiCFResult

    @property
    def trace(self) -> SdeTrace:
        return self.phi.trace


@dataclass
class Stage2Result:
    guidance: LatentVideo
    output: LatentVideo
    mask: VideoMask
    plane: Plane
    particles: ParticleSet
    trajectory: PointTrajectories
    phi: PhiCFResult

    @property
    def trace(self) -> SdeTrace:
        return self.phi.trace


@dataclass
class RunSummary:
    run_dir: Path
    manifest_hash: str
    coverage: float
    timings: Dict[str, float]


def falling_block_scene(seed: int = 0) -> SceneSpec:
    """The golden scene with its reference camera and solver settings."""
    objects = falling_block_objects()
    intr = CameraIntrinsics.centered()
    return SceneSpec(
        name="falling_block",
        objects=objects,
        intr=intr,
        input_pose=look_at(np.array([0.0, -0.9, 0.45]), np.array([0.0, 0.0, 0.3])),
        orbit=default_orbit(objects, elevation_deg=30.0),
        sim=SimConfig(substeps=40),
        n_frames=80,
        particle_spacing=0.02,
        seed=seed,
    )


def _map_frames(fn: Callable[[T], R], items: Sequence[T], threads: int) -> List[R]:
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _latent_frame(rgb: np.ndarray, mask: np.ndarray, depth: np.ndarray) -> np.ndarray:
    d = np.where(mask > 0, depth, 0.0)
    return np.concatenate([rgb, d[..., None], mask[..., None]], axis=-1)


def unproject_latent_frame(frame: np.ndarray, intr: CameraIntrinsics, pose: CameraPose,
                           alpha_thresh: float = 0.5) -> PointCloud:
    """Lift pixels whose alpha exceeds the threshold; depth is stored premultiplied by alpha."""
    alpha = frame[..., 4]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(alpha > 0, frame[..., 3] / alpha, 0.0)
    fg = (alpha > alpha_thresh) & (depth > 1e-3)
    return unproject(depth, intr, pose, np.clip(frame[..., :3], 0.0, 1.0), fg)


def stage1(scene: SceneSpec, oracle: Optional[VelocityOracle] = None,
           threads: int = RUNTIME_CONFIG["threads"]) -> Stage1Result:
    """
    Orbit completion.

    Args:
        scene: Scene description
        oracle: Velocity oracle over orbit videos (built from the scene when None)
        threads: Worker threads for per-frame rendering

    Returns:
        Stage1Result: guidance and completed orbit videos, mask and clouds
    """
    gt = raycast(scene.objects, scene.intr, scene.input_pose, scene.ground_height)
    input_cloud = unproject(gt.depth, scene.intr, scene.input_pose, gt.rgb, gt.alpha > 0)
    input_cloud.object_ids = segment_points(input_cloud.positions, scene.objects, scene.ground_height)
    ground_cloud = unproject(np.where(gt.ids == 0, gt.depth, 1.0), scene.intr, scene.input_pose,
                             gt.rgb, gt.ids == 0)
    logger.info("stage1: input view holds %d object points, %d ground points",
                len(input_cloud), len(ground_cloud))

    poses = orbit_trajectory(scene.orbit)

    def render(pose: CameraPose) -> np.ndarray:
        bg = background_image(scene.intr, pose, scene.ground_height)
        res = render_points(input_cloud, scene.intr, pose, scene.point_radius_px, bg)
        return _latent_frame(res.frame, res.mask, res.depth)

    frames = np.stack(_map_frames(render, poses, threads))
    guidance = LatentVideo(frames)
    mask = stack_masks(list(frames[..., 4]))

    cond = None
    if oracle is None:
        oracle, cond = stage1_dataset(scene.objects, scene.intr, scene.orbit, scene.input_pose,
                                      scene.ground_height, scene.dataset.n_jitter, scene.seed,
                                      scene.dataset.distractor)
    else:
        cond = LatentVideo.from_image(gt.latent_frame(), scene.orbit.n_frames)
    phi = run_phi_cf_detailed(guidance, cond, None, mask, oracle, None, scene.sde_stage1)
    # decoded guidance pixels are pasted back over the masked region
    output = mask_mix(guidance, phi.output, mask)

    lifted = [unproject_latent_frame(output.data[k], scene.intr, pose) for k, pose in enumerate(poses)]
    new_points = PointCloud.concat(lifted)
    if len(new_points):
        new_points = remove_density_outliers(new_points)
        new_points.object_ids = segment_points(new_points.positions, scene.objects, scene.ground_height)
    cloud = PointCloud.concat([input_cloud, new_points])

    reference = PointCloud.concat(
        [unproject_latent_frame(f, scene.intr, pose)
         for f, pose in zip(orbit_latent(scene.objects, scene.intr, scene.orbit, scene.ground_height),
                            poses)])
    coverage = voxel_coverage(cloud, reference)
    logger.info("stage1: completed cloud of %d points, coverage %.3f", len(cloud), coverage)
    return Stage1Result(guidance, output, mask, poses, input_cloud, ground_cloud, cloud,
                        reference, coverage, phi)


def particles_from_cloud(scene: SceneSpec, cloud: PointCloud, plane: Plane) -> ParticleSet:
    """Ground contact, volumetric filling and material assignment per object."""
    cloud = ground_contact(cloud, plane)
    sets = []
    for oid, part in sorted(cloud.split_by_object().items()):
        if oid == 0 or len(part) == 0:
            continue
        obj = scene.object_by_id(oid)
        if obj is None:
            logger.warning("dropping %d points of unknown object %d", len(part), oid)
            continue
        filled = volumetric_sample(part, scene.voxel_size, scene.particle_spacing)
        sets.append(ParticleSet.from_cloud(filled, obj.material, scene.particle_spacing, obj.velocity))
    if not sets:
        raise ConfigError("no object points survived stage 1", key="scene.objects")
    return ParticleSet.merge(sets)


def stage2(scene: SceneSpec, cloud: PointCloud, oracle: Optional[VelocityOracle] = None,
           ground_cloud: Optional[PointCloud] = None,
           threads: int = RUNTIME_CONFIG["threads"]) -> Stage2Result:
    """
    Simulation and refinement.

    Args:
        scene: Scene description
        cloud: Completed object cloud from stage 1
        oracle: Velocity oracle over simulation videos (built from the trajectory when None)
        ground_cloud: Points for the ground-plane fit (input-view ground when None)
        threads: Worker threads for per-frame rendering

    Returns:
        Stage2Result: the refined video V^sim in ``output`` with every intermediate
    """
    if ground_cloud is None:
        gt = raycast(scene.objects, scene.intr, scene.input_pose, scene.ground_height)
        ground_cloud = unproject(np.where(gt.ids == 0, gt.depth, 1.0), scene.intr, scene.input_pose,
                                 gt.rgb, gt.ids == 0)
    plane, inliers = ransac_plane(ground_cloud, seed=scene.seed)
    sim = scene.sim
    if plane.normal[2] > np.cos(np.radians(5.0)):
        sim = sim.model_copy(update={"ground_height": float(plane.offset / plane.normal[2])})
    else:
        logger.warning("estimated ground is not horizontal (n=%s); keeping the configured plane",
                       plane.normal)
        plane = Plane.ground(scene.ground_height)

    particles = particles_from_cloud(scene, cloud, plane)
    logger.info("stage2: simulating %d particles for %d frames", len(particles), scene.n_frames)
    traj = simulate(particles, [], sim, scene.drivers, scene.n_frames)

    background = scene.background
    idx = list(range(1, traj.n_frames))
    rendered = _map_frames(lambda i: render_trajectory(traj, scene.intr, scene.input_pose, background,
                                                       scene.point_radius_px, [i]), idx, threads)
    frames = np.concatenate([r[0] for r in rendered])
    masks = np.concatenate([r[1] for r in rendered])
    guidance = LatentVideo(frames)
    mask = stack_masks(list(masks))

    input_rgb = raycast(scene.objects, scene.intr, scene.input_pose, scene.ground_height).rgb
    if oracle is None:
        oracle = stage2_dataset(traj, scene.intr, scene.input_pose, background, input_rgb,
                                scene.dataset.n_jitter, scene.seed)
    n = frames.shape[0]
    cond = LatentVideo.from_image(input_rgb, n)
    bg = LatentVideo.from_image(background, n)
    phi = run_phi_cf_detailed(guidance, cond, bg, mask, oracle, None, scene.sde_stage2)
    return Stage2Result(guidance, phi.output, mask, plane, particles, traj, phi)


def ground_truth_particles(scene: SceneSpec) -> ParticleSet:
    """Fill every scene primitive with a particle lattice straight from its SDF."""
    s = scene.particle_spacing
    sets = []
    for obj in scene.objects:
        lo, hi = obj.bounds()
        axes = [np.arange(lo[a] + s / 2.0, hi[a], s) for a in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        pts = pts[obj.sdf(pts) <= 0.0]
        if pts.shape[0] == 0:
            logger.warning("object %d is thinner than the particle spacing", obj.object_id)
            continue
        cloud = PointCloud(pts, np.tile(obj.color, (pts.shape[0], 1)),
                           np.full(pts.shape[0], obj.object_id))
        sets.append(ParticleSet.from_cloud(cloud, obj.material, s, obj.velocity))
    if not sets:
        raise ConfigError("no object is large enough to hold a particle", key="scene.particle_spacing")
    return ParticleSet.merge(sets)


def _timed(stage: str, timings: Dict[str, float], fn: Callable[[], R]) -> R:
    start = time.perf_counter()
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:
        logger.error("stage %s failed: %s", stage, exc)
        raise StageError(stage, exc) from exc
    finally:
        timings[stage] = time.perf_counter() - start


def end_to_end(scene: SceneSpec, out_dir, config_text: str,
               threads: int = RUNTIME_CONFIG["threads"]) -> RunSummary:
    """
    Run both stages and write the run directory.

    Layout: config.txt, orbit/frame_%04d.ppm, orbit/mask.cgfl, orbit/poses.txt,
    cloud.ply, traj.cgtj, sim/frame_%04d.ppm, final/frame_%04d.ppm,
    trace_stage{1,2}.txt, report.txt, timings.txt and manifest.txt. The
    manifest lists a sha-256 per artifact and the config hash; timings are
    left out so reruns hash identically.
    """
    store = RunArtifactStore(out_dir, config_text)
    timings: Dict[str, float] = {}

    s1 = _timed("stage1", timings, lambda: stage1(scene, threads=threads))
    _timed("write_stage1", timings, lambda: (
        store.write_frames("orbit", s1.output.data[..., :3]),
        store.write_mask("orbit/mask.cgfl", s1.mask),
        store.write_poses("orbit/poses.txt", s1.poses),
        store.write_ply("cloud.ply", s1.cloud),
        store.write_text("trace_stage1.txt", s1.trace.to_table()),
    ))

    s2 = _timed("stage2", timings, lambda: stage2(scene, s1.cloud, ground_cloud=s1.ground_cloud,
                                                  threads=threads))
    _timed("write_stage2", timings, lambda: (
        store.write_trajectory("traj.cgtj", s2.trajectory),
        store.write_frames("sim", s2.guidance.data),
        store.write_frames("final", s2.output.data),
        store.write_text("trace_stage2.txt", s2.trace.to_table()),
    ))

    final = s2.trajectory.diagnostics[-1]
    store.write_report("report.txt", {
        "scene": scene.name,
        "seed": scene.seed,
        "coverage": repr(s1.coverage),
        "cloud_points": len(s1.cloud),
        "particles": len(s2.particles),
        "frames": s2.trajectory.n_frames - 1,
        "ground_normal": " ".join(repr(float(v)) for v in s2.plane.normal),
        "ground_offset": repr(float(s2.plane.offset)),
        "final_kinetic_energy": repr(final.kinetic_energy),
        "final_min_height": repr(final.min_height),
        "rigid_density": repr(scene.rigid.density),
        "rigid_kp": " ".join(repr(float(v)) for v in scene.rigid.kp),
        "rigid_kv": " ".join(repr(float(v)) for v in scene.rigid.kv),
        "sph_viscosity": repr(scene.sph.viscosity),
        "sph_particle_size": repr(scene.sph.particle_size),
    })
    manifest_hash = store.write_manifest()
    (Path(out_dir) / "timings.txt").write_text(
        "".join(f"{k}={v:.3f}\n" for k, v in timings.items()))
    logger.info("run %s complete: manifest %s", scene.name, manifest_hash)
    return RunSummary(Path(out_dir), manifest_hash, s1.coverage, timings)
