"""
scenes.py - Synthetic Scenes and Oracle Datasets

Analytic stand-ins for the perception models of the pipeline:
- Box, sphere and composite-of-boxes primitives with signed distances
- Ray casting for ground-truth RGB / depth / object-id / alpha renders
- A checkered ground plane under a flat sky as the background image
- Ground-truth segmentation of arbitrary points (nearest primitive)
- Oracle datasets whose data manifold holds the plausible completions of
  each stage
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import GEOMETRY_CONFIG
from cg_flow.errors import ConfigError, DomainError
from cg_flow.flow_core import LatentVideo
from cg_flow.geometry import (
    CameraIntrinsics,
    CameraPose,
    OrbitSpec,
    orbit_trajectory,
    render_points,
)
from cg_flow.oracle_flow import VelocityOracle
from cg_flow.physics_sim import MaterialParams, PointTrajectories

logger = logging.getLogger(__name__)

SHAPES = ("box", "sphere", "composite")
SKY_COLOR = np.array([0.70, 0.80, 0.95])
GROUND_COLORS = (np.array([0.45, 0.50, 0.45]), np.array([0.60, 0.65, 0.60]))
CHECKER_SIZE = 0.25
LIGHT_DIR = np.array([0.3, -0.4, 0.85]) / np.linalg.norm([0.3, -0.4, 0.85])
LATENT_CHANNELS = 5  # r, g, b, depth, alpha


@dataclass(frozen=True)
class SceneObject:
    """A coloured voxel primitive with its material and initial velocity.

    ``size`` holds the full box extents; spheres use ``radius``; composites
    use ``boxes`` as (center, size) pairs in world coordinates.
    """

    object_id: int
    shape: str
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.0
    boxes: Tuple[Tuple[Tuple[float, float, float], Tuple[float, float, float]], ...] = ()
    color: Tuple[float, float, float] = (0.8, 0.3, 0.2)
    material: MaterialParams = field(default_factory=MaterialParams.from_config)
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.object_id < 1:
            raise ConfigError("object ids start at 1 (0 is the ground)", key="object.id")
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape '{self.shape}'", key="object.shape")
        if self.shape == "box" and min(self.size) <= 0:
            raise ConfigError("box size must be positive", key="object.size")
        if self.shape == "sphere" and self.radius <= 0:
            raise ConfigError("sphere radius must be positive", key="object.radius")
        if self.shape == "composite" and not self.boxes:
            raise ConfigError("composite needs at least one box", key="object.boxes")
        if min(self.color) < 0 or max(self.color) > 1:
            raise ConfigError("object colour must lie in [0, 1]", key="object.color")

    def _boxes(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        if self.shape == "box":
            return [(np.asarray(self.center, float), np.asarray(self.size, float))]
        return [(np.asarray(c, float), np.asarray(s, float)) for c, s in self.boxes]

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.shape == "sphere":
            return np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius
        out = np.full(p.shape[0], np.inf)
        for c, s in self._boxes():
            q = np.abs(p - c) - s / 2.0
            d = np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
            out = np.minimum(out, d)
        return out

    def normal(self, points: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        grad = np.column_stack([self.sdf(p + eps * e) - self.sdf(p - eps * e) for e in np.eye(3)])
        return grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit in front of the origin (inf on a miss)."""
        o = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
        if self.shape == "sphere":
            oc = o - np.asarray(self.center)
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = 2.0 * np.einsum("ij,ij->i", dirs, oc)
            c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
            disc = b * b - 4.0 * a * c
            root = np.sqrt(np.maximum(disc, 0.0))
            t_near = (-b - root) / (2.0 * a)
            t_far = (-b + root) / (2.0 * a)
            t = np.where(t_near > 1e-9, t_near, t_far)
            return np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        best = np.full(dirs.shape[0], np.inf)
        d = np.where(dirs == 0.0, 1e-30, dirs)
        for c, s in self._boxes():
            t1 = (c - s / 2.0 - o) / d
            t2 = (c + s / 2.0 - o) / d
            t_min = np.minimum(t1, t2).max(axis=1)
            t_max = np.maximum(t1, t2).min(axis=1)
            t = np.where(t_min > 1e-9, t_min, t_max)
            hit = (t_max >= t_min) & (t > 1e-9)
            best = np.minimum(best, np.where(hit, t, np.inf))
        return best

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.shape == "sphere":
            c = np.asarray(self.center, float)
            return c - self.radius, c + self.radius
        boxes = self._boxes()
        lo = np.min([c - s / 2.0 for c, s in boxes], axis=0)
        hi = np.max([c + s / 2.0 for c, s in boxes], axis=0)
        return lo, hi


@dataclass
class GroundTruthRender:
    """Ray-cast frame: ids are -1 for sky, 0 for ground, object id otherwise."""

    rgb: np.ndarray
    depth: np.ndarray
    ids: np.ndarray
    alpha: np.ndarray

    def latent_frame(self) -> np.ndarray:
        """(H, W, 5) frame: rgb, object depth (0 off-object), alpha."""
        depth = np.where(self.alpha > 0, self.depth, 0.0)
        return np.concatenate([self.rgb, depth[..., None], self.alpha[..., None]], axis=-1)


def scene_bounds(objects: Sequence[SceneObject]) -> Tuple[np.ndarray, np.ndarray]:
    if not objects:
        raise DomainError("scene has no objects")
    los, his = zip(*(o.bounds() for o in objects))
    return np.min(los, axis=0), np.max(his, axis=0)


def bounding_sphere(objects: Sequence[SceneObject]) -> Tuple[np.ndarray, float]:
    lo, hi = scene_bounds(objects)
    return (lo + hi) / 2.0, float(np.linalg.norm(hi - lo) / 2.0)


def default_orbit(objects: Sequence[SceneObject], n_frames: int = GEOMETRY_CONFIG["orbit_frames"],
                  elevation_deg: float = GEOMETRY_CONFIG["orbit_elevation_deg"],
                  radius_factor: float = GEOMETRY_CONFIG["orbit_radius_factor"]) -> OrbitSpec:
    """Orbit around the bounding sphere at radius_factor times its radius."""
    center, radius = bounding_sphere(objects)
    return OrbitSpec(tuple(center), radius_factor * radius, np.radians(elevation_deg), n_frames)


def _camera_rays(intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    vs, us = np.mgrid[0:intr.height, 0:intr.width]
    d_cam = np.column_stack([(us.ravel() - intr.cx) / intr.fx, (vs.ravel() - intr.cy) / intr.fy,
                             np.ones(us.size)])
    # camera-z component of every ray is one, so the ray parameter is the depth
    return d_cam @ pose.rotation.T


def raycast(objects: Sequence[SceneObject], intr: CameraIntrinsics, pose: CameraPose,
            ground_height: Optional[float] = 0.0) -> GroundTruthRender:
    """Ground-truth render with Lambert-shaded objects over a checkered ground."""
    dirs = _camera_rays(intr, pose)
    origin = pose.translation
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=np.int64)
    for obj in objects:
        t = obj.intersect(origin, dirs)
        closer = t < t_best
        t_best[closer] = t[closer]
        ids[closer] = obj.object_id
    if ground_height is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t_g = (ground_height - origin[2]) / dirs[:, 2]
        t_g = np.where((dirs[:, 2] < 0) & (t_g > 1e-9), t_g, np.inf)
        closer = t_g < t_best
        t_best[closer] = t_g[closer]
        ids[closer] = 0

    rgb = np.tile(SKY_COLOR, (n, 1))
    hit_points = origin + np.where(np.isfinite(t_best), t_best, 0.0)[:, None] * dirs
    ground = ids == 0
    if ground.any():
        cell = (np.floor(hit_points[ground, 0] / CHECKER_SIZE)
                + np.floor(hit_points[ground, 1] / CHECKER_SIZE)).astype(np.int64) % 2
        rgb[ground] = np.where(cell[:, None] == 0, GROUND_COLORS[0], GROUND_COLORS[1])
    for obj in objects:
        sel = ids == obj.object_id
        if sel.any():
            shade = 0.35 + 0.65 * np.clip(obj.normal(hit_points[sel]) @ LIGHT_DIR, 0.0, 1.0)
            rgb[sel] = np.clip(np.asarray(obj.color) * shade[:, None], 0.0, 1.0)

    shape = (intr.height, intr.width)
    return GroundTruthRender(rgb=rgb.reshape(shape + (3,)), depth=t_best.reshape(shape),
                             ids=ids.reshape(shape), alpha=(ids > 0).astype(np.float64).reshape(shape))


def background_image(intr: CameraIntrinsics, pose: CameraPose,
                     ground_height: Optional[float] = 0.0) -> np.ndarray:
    """The scene without its foreground objects."""
    return raycast([], intr, pose, ground_height).rgb


def segment_points(points: np.ndarray, objects: Sequence[SceneObject],
                   ground_height: Optional[float] = 0.0,
                   tol: float = GEOMETRY_CONFIG["contact_tol"]) -> np.ndarray:
    """Object id of the nearest primitive; 0 for points on the ground away from objects."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not objects:
        return np.zeros(p.shape[0], dtype=np.int64)
    dist = np.column_stack([np.abs(o.sdf(p)) for o in objects])
    ids = np.array([o.object_id for o in objects])[np.argmin(dist, axis=1)]
    if ground_height is not None:
        on_ground = (np.abs(p[:, 2] - ground_height) <= tol) & (dist.min(axis=1) > tol)
        ids = np.where(on_ground, 0, ids)
    return ids.astype(np.int64)


def falling_block_objects() -> List[SceneObject]:
    """Golden scene: a 0.2 m snow block centred 0.5 m above the ground."""
    return [SceneObject(object_id=1, shape="box", center=(0.0, 0.0, 0.5), size=(0.2, 0.2, 0.2),
                        color=(0.85, 0.35, 0.2), material=MaterialParams.from_config("mpm"))]


def _color_jitter(frames: np.ndarray, rng: np.random.Generator, sigma: float = 0.03) -> np.ndarray:
    out = frames.copy()
    gain = 1.0 + sigma * rng.standard_normal(3)
    out[..., :3] = np.clip(out[..., :3] * gain, 0.0, 1.0)
    return out


def _distractor(objects: Sequence[SceneObject], shift: float = 0.15) -> List[SceneObject]:
    return [SceneObject(object_id=o.object_id, shape=o.shape,
                        center=tuple(np.asarray(o.center) + [shift, 0.0, 0.0]), size=o.size,
                        radius=o.radius,
                        boxes=tuple((tuple(np.asarray(c) + [shift, 0.0, 0.0]), s) for c, s in o.boxes),
                        color=tuple(1.0 - np.asarray(o.color)), material=o.material,
                        velocity=o.velocity)
            for o in objects]


def orbit_latent(objects: Sequence[SceneObject], intr: CameraIntrinsics, orbit: OrbitSpec,
                 ground_height: Optional[float] = 0.0) -> np.ndarray:
    """(K, H, W, 5) ground-truth orbit video."""
    return np.stack([raycast(objects, intr, pose, ground_height).latent_frame()
                     for pose in orbit_trajectory(orbit)])


def stage1_dataset(objects: Sequence[SceneObject], intr: CameraIntrinsics, orbit: OrbitSpec,
                   input_pose: CameraPose, ground_height: Optional[float] = 0.0,
                   n_jitter: int = 2, seed: int = 0,
                   distractor: bool = True) -> Tuple[VelocityOracle, LatentVideo]:
    """
    Orbit-completion oracle keyed by the input view.

    The ``scene`` key holds the ground-truth orbit video plus azimuth- and
    colour-jittered renders; the ``distractor`` key holds the orbit of a
    shifted, recoloured copy of the scene.

    Returns:
        The oracle and the condition latent of the scene's input view.
    """
    rng = np.random.default_rng(seed)
    samples, keys, conditions = [], [], {}

    def add_key(key: str, objs: Sequence[SceneObject]) -> None:
        conditions[key] = raycast(objs, intr, input_pose, ground_height).latent_frame()
        samples.append(LatentVideo(orbit_latent(objs, intr, orbit, ground_height)))
        keys.append(key)
        step = 2.0 * np.pi / orbit.n_frames
        for _ in range(n_jitter):
            jittered = OrbitSpec(orbit.center, orbit.radius, orbit.elevation, orbit.n_frames,
                                 orbit.start_azimuth + 0.25 * step * rng.uniform(-1.0, 1.0))
            video = orbit_latent(objs, intr, jittered, ground_height)
            samples.append(LatentVideo(_color_jitter(video, rng)))
            keys.append(key)

    add_key("scene", objects)
    if distractor:
        add_key("distractor", _distractor(objects))
    oracle = VelocityOracle.empirical(samples, keys, conditions=conditions)
    logger.info("stage-1 oracle dataset: %d samples over keys %s", len(samples), sorted(conditions))
    return oracle, LatentVideo.from_image(conditions["scene"], orbit.n_frames)


def render_trajectory(traj: PointTrajectories, intr: CameraIntrinsics, pose: CameraPose,
                      background: np.ndarray, point_radius_px: float = GEOMETRY_CONFIG["point_radius_px"],
                      frames: Optional[Sequence[int]] = None, shade: bool = False):
    """Splat trajectory frames; returns (frames (L, H, W, 3), masks (L, H, W))."""
    frames = range(1, traj.n_frames) if frames is None else frames
    rgb, masks = [], []
    for i in frames:
        res = render_points(traj.frame(i), intr, pose, point_radius_px, background)
        frame = res.frame
        if shade and res.mask.any():
            d = res.depth[res.mask > 0]
            span = max(float(d.max() - d.min()), 1e-9)
            factor = 1.0 - 0.15 * (np.where(res.mask > 0, res.depth, d.min()) - d.min()) / span
            frame = np.where(res.mask[..., None] > 0, frame * factor[..., None], frame)
        rgb.append(frame)
        masks.append(res.mask)
    return np.stack(rgb), np.stack(masks)


def stage2_dataset(traj: PointTrajectories, intr: CameraIntrinsics, pose: CameraPose,
                   background: np.ndarray, input_rgb: np.ndarray, n_jitter: int = 2,
                   seed: int = 0, point_radius_px: float = 1.5) -> VelocityOracle:
    """Simulation-refinement oracle: shaded renders of the trajectory plus frame- and colour-jittered variants."""
    rng = np.random.default_rng(seed)
    n = traj.n_frames - 1
    if n < 1:
        raise DomainError("stage-2 dataset needs at least one simulated frame")
    base, _ = render_trajectory(traj, intr, pose, background, point_radius_px, shade=True)
    samples = [LatentVideo(base)]
    for j in range(n_jitter):
        shift = (j // 2 + 1) * (1 if j % 2 == 0 else -1)
        idx = np.clip(np.arange(1, n + 1) + shift, 1, n)
        shifted, _ = render_trajectory(traj, intr, pose, background, point_radius_px, idx, shade=True)
        samples.append(LatentVideo(_color_jitter(shifted, rng)))
    oracle = VelocityOracle.empirical(samples, ["scene"] * len(samples),
                                      conditions={"scene": np.asarray(input_rgb, dtype=np.float64)})
    logger.info("stage-2 oracle dataset: %d samples of %d frames", len(samples), n)
    return oracle
