"""
geometry.py - Cameras, Point Clouds and Splatting

This module implements the geometric half of the orbit-completion stage:
1. Pinhole cameras (OpenCV-style: X right, Y down, Z forward; world up +Z)
2. Orbit trajectories built from look-at poses
3. Depth unprojection to world-space point clouds
4. Z-buffered disc splatting over a background image
5. RANSAC ground-plane estimation, ground contact and density outlier removal
6. Volumetric particle sampling by per-axis scanline closure

Key Features:
- Poses are world-from-camera: X_world = R X_cam + t
- Pixel centres sit at integer coordinates
- All operations are pure and deterministic given their seed
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.neighbors import NearestNeighbors

from config import GEOMETRY_CONFIG
from cg_flow.errors import DegenerateGeometryError, DomainError, ShapeError
from cg_flow.flow_core import VideoMask

logger = logging.getLogger(__name__)

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(f"principal point ({self.cx}, {self.cy}) outside the image")

    @classmethod
    def centered(cls, width: int = GEOMETRY_CONFIG["image_width"],
                 height: int = GEOMETRY_CONFIG["image_height"],
                 focal: float = GEOMETRY_CONFIG["focal"]) -> "CameraIntrinsics":
        """Square-pixel camera with the principal point at the image centre."""
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeError(f"pose expects a 3x3 rotation and a 3-vector, got {r.shape}, {t.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or np.linalg.det(r) < 0:
            raise DomainError("pose rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class OrbitSpec:
    center: Tuple[float, float, float]
    radius: float
    elevation: float
    n_frames: int
    start_azimuth: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError(f"orbit radius must be positive, got {self.radius}")
        if self.n_frames < 2:
            raise DomainError(f"orbit needs at least 2 frames, got {self.n_frames}")


@dataclass
class PointCloud:
    """N points with colours in [0, 1] and integer object ids (0 is the ground)."""

    positions: np.ndarray
    colors: np.ndarray
    object_ids: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.object_ids = np.asarray(self.object_ids, dtype=np.int64).reshape(-1)
        if self.colors.shape[0] != n or self.object_ids.shape[0] != n:
            raise ShapeError(f"point cloud fields disagree: {n} positions, {self.colors.shape[0]} "
                             f"colors, {self.object_ids.shape[0]} ids")
        if not np.all(np.isfinite(self.positions)):
            raise DomainError("point cloud contains non-finite positions")
        if n and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise DomainError("point colors must lie in [0, 1]")

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls.empty()
        return cls(np.concatenate([c.positions for c in clouds]),
                   np.concatenate([c.colors for c in clouds]),
                   np.concatenate([c.object_ids for c in clouds]))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def select(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[keep], self.colors[keep], self.object_ids[keep])

    def split_by_object(self) -> Dict[int, "PointCloud"]:
        return {int(oid): self.select(self.object_ids == oid) for oid in np.unique(self.object_ids)}


@dataclass(frozen=True)
class Plane:
    """{p : normal . p = offset} with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        length = np.linalg.norm(n)
        if length < 1e-12:
            raise DegenerateGeometryError("plane normal has zero length")
        object.__setattr__(self, "normal", n / length)
        object.__setattr__(self, "offset", float(self.offset) / length)

    @classmethod
    def ground(cls, height: float = 0.0) -> "Plane":
        return cls(WORLD_UP.copy(), height)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.normal - self.offset

    def project(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points - np.outer(self.signed_distance(points), self.normal)


@dataclass
class RenderResult:
    """Splatted frame; iterates as (frame, mask, depth)."""

    frame: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    ids: Optional[np.ndarray] = None

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter((self.frame, self.mask, self.depth))


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = WORLD_UP) -> CameraPose:
    """Pose at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise DegenerateGeometryError("look-at eye and target coincide")
    forward /= dist
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        raise DegenerateGeometryError("look-at direction is colinear with the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return CameraPose(np.column_stack([right, down, forward]), eye)


def project(points: np.ndarray, intr: CameraIntrinsics, pose: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (N, 2) as (u, v) and camera depth (N,)."""
    pc = pose.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[:, 0] / depth + intr.cx
        v = intr.fy * pc[:, 1] / depth + intr.cy
    return np.column_stack([u, v]), depth


def orbit_trajectory(spec: OrbitSpec) -> List[CameraPose]:
    """K look-at poses on a circle of azimuths covering [0, 2 pi) once."""
    center = np.asarray(spec.center, dtype=np.float64)
    phi = spec.elevation
    poses = []
    for i in range(spec.n_frames):
        theta = spec.start_azimuth + 2.0 * np.pi * i / spec.n_frames
        eye = center + spec.radius * np.array([np.cos(theta) * np.cos(phi),
                                               np.sin(theta) * np.cos(phi),
                                               np.sin(phi)])
        poses.append(look_at(eye, center))
    return poses


def unproject(depth: np.ndarray, intr: CameraIntrinsics, pose: CameraPose, colors: np.ndarray,
              fg_mask: np.ndarray, object_ids: Optional[np.ndarray] = None) -> PointCloud:
    """
    Lift the masked pixels of a depth map to world space.

    Args:
        depth: (H, W) camera depth
        intr: Camera intrinsics
        pose: World-from-camera pose
        colors: (H, W, 3) image in [0, 1]
        fg_mask: (H, W) foreground selection
        object_ids: Optional (H, W) id image; zeros when omitted

    Returns:
        PointCloud: one point per masked pixel
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(fg_mask).astype(bool)
    if depth.shape != (intr.height, intr.width) or mask.shape != depth.shape:
        raise ShapeError(f"depth {depth.shape} / mask {mask.shape} do not match "
                         f"{intr.height}x{intr.width} camera")
    vs, us = np.nonzero(mask)
    if vs.size == 0:
        return PointCloud.empty()
    d = depth[vs, us]
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise DomainError("depth must be positive and finite under the foreground mask")
    cam = np.column_stack([(us - intr.cx) / intr.fx * d, (vs - intr.cy) / intr.fy * d, d])
    ids = np.zeros(vs.size, dtype=np.int64) if object_ids is None else np.asarray(object_ids)[vs, us]
    return PointCloud(pose.to_world(cam), np.clip(np.asarray(colors)[vs, us, :3], 0.0, 1.0), ids)


def _disc_offsets(radius: float) -> np.ndarray:
    r = int(np.ceil(radius)) + 1
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
    return np.column_stack([ox.ravel(), oy.ravel()])


def render_points(cloud: PointCloud, intr: CameraIntrinsics, pose: CameraPose,
                  point_radius_px: float = GEOMETRY_CONFIG["point_radius_px"],
                  background: Optional[np.ndarray] = None) -> RenderResult:
    """
    Z-buffered disc splatting.

    A pixel belongs to a point's disc when its centre lies within
    ``point_radius_px`` of the projection; the nearest point wins, ties go
    to the lower point index.
    """
    if point_radius_px < 0.5:
        raise DomainError(f"point radius must be >= 0.5 px, got {point_radius_px}")
    h, w = intr.height, intr.width
    if background is None:
        background = np.zeros((h, w, 3))
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (h, w, 3):
        raise ShapeError(f"background {background.shape} does not match {h}x{w}x3")

    frame = background.copy()
    mask = np.zeros((h, w))
    depth_map = np.full((h, w), np.inf)
    ids = np.full((h, w), -1, dtype=np.int64)
    if len(cloud) == 0:
        logger.warning("render_points called with an empty cloud")
        return RenderResult(frame, mask, depth_map, ids)

    uv, depth = project(cloud.positions, intr, pose)
    visible = np.flatnonzero(depth > 1e-9)
    if visible.size == 0:
        return RenderResult(frame, mask, depth_map, ids)
    uv, depth = uv[visible], depth[visible]

    offsets = _disc_offsets(point_radius_px)
    base = np.round(uv).astype(np.int64)
    px = base[:, None, 0] + offsets[None, :, 0]
    py = base[:, None, 1] + offsets[None, :, 1]
    inside = ((px - uv[:, None, 0]) ** 2 + (py - uv[:, None, 1]) ** 2 <= point_radius_px ** 2)
    inside &= (px >= 0) & (px < w) & (py >= 0) & (py < h)
    point_idx = np.broadcast_to(visible[:, None], px.shape)[inside]
    pixel = (py * w + px)[inside]
    z = np.broadcast_to(depth[:, None], px.shape)[inside]
    if pixel.size == 0:
        return RenderResult(frame, mask, depth_map, ids)

    order = np.lexsort((point_idx, z, pixel))
    pixel, z, point_idx = pixel[order], z[order], point_idx[order]
    _, first = np.unique(pixel, return_index=True)
    win_pix, win_pt = pixel[first], point_idx[first]
    rows, cols = np.divmod(win_pix, w)
    frame[rows, cols] = cloud.colors[win_pt]
    mask[rows, cols] = 1.0
    depth_map[rows, cols] = z[first]
    ids[rows, cols] = cloud.object_ids[win_pt]
    return RenderResult(frame, mask, depth_map, ids)


def stack_masks(per_frame_masks: Sequence[np.ndarray]) -> VideoMask:
    """Stack K (H, W) masks into a K x H x W video mask."""
    if len(per_frame_masks) == 0:
        raise ShapeError("stack_masks needs at least one mask")
    shape = np.shape(per_frame_masks[0])
    for m in per_frame_masks:
        if np.shape(m) != shape:
            raise ShapeError(f"mask shape {np.shape(m)} differs from {shape}")
    return VideoMask(np.stack([np.asarray(m, dtype=np.float64) for m in per_frame_masks]))


def _fit_plane(points: np.ndarray) -> Plane:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid)
    normal = vt[-1]
    # orient toward +Z
    if normal[2] < 0 or (normal[2] == 0 and normal[np.flatnonzero(normal)[0]] < 0):
        normal = -normal
    return Plane(normal, float(normal @ centroid))


def ransac_plane(points, n_iters: int = GEOMETRY_CONFIG["ransac_iters"],
                 inlier_thresh: float = GEOMETRY_CONFIG["ransac_thresh"],
                 seed: int = 0) -> Tuple[Plane, np.ndarray]:
    """
    Three-point RANSAC with a least-squares refit on the best inlier set.

    Args:
        points: PointCloud or (N, 3) array
        n_iters: Number of hypotheses
        inlier_thresh: Inlier distance (m)
        seed: RNG seed

    Returns:
        Tuple[Plane, np.ndarray]: plane (normal with n_z >= 0) and inlier indices
    """
    pts = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    n = pts.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"RANSAC needs at least 3 points, got {n}")

    rng = np.random.default_rng(seed)
    best_count, best_inliers, skipped = -1, None, 0
    for _ in range(n_iters):
        a, b, c = pts[rng.choice(n, 3, replace=False)]
        normal = np.cross(b - a, c - a)
        scale = np.linalg.norm(b - a) * np.linalg.norm(c - a)
        if scale == 0 or np.linalg.norm(normal) <= 1e-9 * scale:
            skipped += 1
            continue
        normal /= np.linalg.norm(normal)
        inliers = np.flatnonzero(np.abs(pts @ normal - normal @ a) <= inlier_thresh)
        if inliers.size > best_count:
            best_count, best_inliers = inliers.size, inliers
    if best_inliers is None:
        raise DegenerateGeometryError(f"all {n_iters} RANSAC samples were degenerate")
    if skipped:
        logger.warning("RANSAC skipped %d degenerate hypotheses", skipped)

    plane = _fit_plane(pts[best_inliers])
    inliers = np.flatnonzero(np.abs(plane.signed_distance(pts)) <= inlier_thresh)
    if inliers.size < 3:
        inliers = best_inliers
    logger.debug("RANSAC plane n=%s d=%.6g inliers=%d/%d", plane.normal, plane.offset, inliers.size, n)
    return plane, inliers


def _axis_closure(occ: np.ndarray, axis: int) -> np.ndarray:
    forward = np.maximum.accumulate(occ, axis=axis)
    backward = np.flip(np.maximum.accumulate(np.flip(occ, axis=axis), axis=axis), axis=axis)
    return forward & backward


def volumetric_sample(cloud: PointCloud, voxel_size: float = GEOMETRY_CONFIG["voxel_size"],
                      particle_spacing: float = 1.3e-2) -> PointCloud:
    """
    Fill a surface cloud with a regular particle lattice.

    Surface voxels are closed by scanline votes: a voxel is interior when it
    lies between two occupied voxels on at least two of its three scanlines,
    so faces no camera saw (the underside of a resting object) do not leave
    the body hollow. Lattice points falling in closed voxels are kept and
    take colour and object id from the nearest surface point.
    """
    if len(cloud) == 0:
        raise DomainError("volumetric_sample needs a non-empty cloud")
    if not particle_spacing > 0 or not voxel_size > 0:
        raise DomainError("voxel size and particle spacing must be positive")
    lo = cloud.positions.min(axis=0)
    extent = cloud.positions.max(axis=0) - lo
    max_extent = float(extent.max())
    if max_extent == 0.0:
        return cloud.select(np.array([0]))
    if max_extent < particle_spacing:
        raise DomainError(f"particle spacing {particle_spacing} exceeds cloud extent {max_extent:.4g}")

    dims = np.floor(extent / voxel_size).astype(np.int64) + 1
    vidx = np.minimum(np.floor((cloud.positions - lo) / voxel_size).astype(np.int64), dims - 1)
    occ = np.zeros(dims, dtype=bool)
    occ[vidx[:, 0], vidx[:, 1], vidx[:, 2]] = True
    votes = sum(_axis_closure(occ, a).astype(np.int8) for a in range(3))
    filled = occ | (votes >= 2)

    axes = []
    for a in range(3):
        count = max(1, int(round(extent[a] / particle_spacing)))
        start = lo[a] + (extent[a] - (count - 1) * particle_spacing) / 2.0
        axes.append(start + particle_spacing * np.arange(count))
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    lidx = np.minimum(np.floor((lattice - lo) / voxel_size).astype(np.int64), dims - 1)
    lattice = lattice[filled[lidx[:, 0], lidx[:, 1], lidx[:, 2]]]

    nn = NearestNeighbors(n_neighbors=1).fit(cloud.positions)
    _, nearest = nn.kneighbors(lattice)
    nearest = nearest[:, 0]
    logger.debug("volumetric_sample: %d surface points -> %d particles", len(cloud), lattice.shape[0])
    return PointCloud(lattice, cloud.colors[nearest], cloud.object_ids[nearest])


def remove_density_outliers(cloud: PointCloud, k: int = GEOMETRY_CONFIG["outlier_k"],
                            min_density: Optional[float] = None) -> PointCloud:
    """Drop points whose density 1 / d_k^2 falls below ``min_density``.

    The default threshold is a ninth of the median density, i.e. points
    whose k-th neighbour is more than three times the median distance away.
    """
    if len(cloud) <= k:
        return cloud
    nn = NearestNeighbors(n_neighbors=k + 1).fit(cloud.positions)
    dist, _ = nn.kneighbors(cloud.positions)
    d_k = np.maximum(dist[:, -1], 1e-12)
    density = 1.0 / d_k ** 2
    if min_density is None:
        min_density = float(np.median(density)) / 9.0
    keep = density >= min_density
    if not keep.all():
        logger.info("removed %d density outliers", int((~keep).sum()))
    return cloud.select(keep)


def ground_contact(cloud: PointCloud, plane: Plane,
                   contact_tol: float = GEOMETRY_CONFIG["contact_tol"],
                   ground_id: int = 0) -> PointCloud:
    """Snap near-ground objects onto the plane and prune points below it.

    An object whose lowest point lies within ``contact_tol`` of the plane is
    translated along the normal so that point rests on the plane.
    """
    parts = []
    for oid, part in cloud.split_by_object().items():
        if oid == ground_id:
            parts.append(part)
            continue
        dist = plane.signed_distance(part.positions)
        lowest = float(dist.min())
        if abs(lowest) <= contact_tol:
            part = PointCloud(part.positions - lowest * plane.normal, part.colors, part.object_ids)
            dist = dist - lowest
        parts.append(part.select(dist >= -1e-9))
    return PointCloud.concat(parts)
