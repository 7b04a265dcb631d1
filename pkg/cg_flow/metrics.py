"""
metrics.py - Evaluation Utilities

Camera-pose errors anchored at frame 0, masked adherence MSE, moment
checks for sampler verification and voxel coverage of reconstructed clouds.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from config import GEOMETRY_CONFIG
from cg_flow.errors import DomainError, ShapeError
from cg_flow.flow_core import LatentVideo, VideoMask, as_array
from cg_flow.geometry import CameraPose, PointCloud

logger = logging.getLogger(__name__)

MIN_MOMENT_SAMPLES = 1000


@dataclass
class PoseTrajectory:
    poses: Sequence[CameraPose]

    def __post_init__(self):
        if len(self.poses) == 0:
            raise DomainError("pose trajectory is empty")

    def __len__(self) -> int:
        return len(self.poses)

    def relative_rotations(self) -> np.ndarray:
        r0 = self.poses[0].rotation
        return np.stack([r0.T @ p.rotation for p in self.poses])

    def relative_translations(self) -> np.ndarray:
        p0 = self.poses[0]
        return np.stack([p0.rotation.T @ (p.translation - p0.translation) for p in self.poses])


@dataclass
class MomentReport:
    n_samples: int
    mean_deviation: float
    var_deviation: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.mean_deviation <= self.tol and self.var_deviation <= self.tol

    def as_dict(self) -> Dict[str, float]:
        return {"n_samples": self.n_samples, "mean_deviation": self.mean_deviation,
                "var_deviation": self.var_deviation, "tol": self.tol, "passed": self.passed}


Trajectory = Union[PoseTrajectory, Sequence[CameraPose]]


def _as_trajectory(t: Trajectory) -> PoseTrajectory:
    return t if isinstance(t, PoseTrajectory) else PoseTrajectory(list(t))


def _paired(a: Trajectory, b: Trajectory):
    a, b = _as_trajectory(a), _as_trajectory(b)
    if len(a) != len(b):
        raise ShapeError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise DomainError("pose errors need at least 2 poses")
    return a, b


def rot_err(a: Trajectory, b: Trajectory) -> float:
    """Mean geodesic angle (degrees) between frame-0-relative rotations, over frames 1..K-1."""
    a, b = _paired(a, b)
    ra, rb = a.relative_rotations()[1:], b.relative_rotations()[1:]
    delta = np.transpose(ra, (0, 2, 1)) @ rb
    return float(np.degrees(Rotation.from_matrix(delta).magnitude()).mean())


def trans_err(a: Trajectory, b: Trajectory) -> float:
    """Mean L2 distance between max-norm-normalised relative translations."""
    a, b = _paired(a, b)

    def normalised(traj: PoseTrajectory) -> np.ndarray:
        rel = traj.relative_translations()[1:]
        scale = np.linalg.norm(rel, axis=1).max()
        return rel / scale if scale > 0 else rel

    return float(np.linalg.norm(normalised(a) - normalised(b), axis=1).mean())


def masked_mse(a: LatentVideo, b: LatentVideo, m: VideoMask) -> float:
    """Mean squared difference over masked entries (mask broadcast over channels)."""
    if a.shape != b.shape:
        raise ShapeError(f"latent shapes differ: {a.shape} vs {b.shape}")
    if m.shape != a.shape[:3]:
        raise ShapeError(f"mask shape {m.shape} does not match latent {a.shape}")
    count = m.data.sum()
    if count == 0:
        raise DomainError("masked_mse needs a non-empty mask")
    sq = (as_array(a) - as_array(b)) ** 2
    return float((m.broadcast() * sq).sum() / (count * a.channels))


def moment_check(samples: np.ndarray, target_mean, target_cov_diag, tol: float = 0.05) -> MomentReport:
    """
    Relative deviation of empirical mean and per-dimension variance.

    The mean deviation is measured against max(|mean|, std) so that zero-mean
    targets stay well defined.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    mean = np.atleast_1d(np.asarray(target_mean, dtype=np.float64))
    var = np.atleast_1d(np.asarray(target_cov_diag, dtype=np.float64))
    if x.shape[0] < MIN_MOMENT_SAMPLES:
        raise DomainError(f"moment_check needs >= {MIN_MOMENT_SAMPLES} samples, got {x.shape[0]}")
    if mean.shape != (x.shape[1],) or var.shape != (x.shape[1],):
        raise ShapeError(f"target dims {mean.shape}/{var.shape} do not match samples {x.shape}")
    if np.any(var <= 0):
        raise DomainError("target variances must be positive")
    scale = np.maximum(np.abs(mean), np.sqrt(var))
    mean_dev = float(np.max(np.abs(x.mean(axis=0) - mean) / scale))
    var_dev = float(np.max(np.abs(x.var(axis=0, ddof=1) - var) / var))
    report = MomentReport(x.shape[0], mean_dev, var_dev, tol)
    logger.debug("moment check %s", report.as_dict())
    return report


def _voxel_keys(points: np.ndarray, voxel_size: float) -> set:
    return set(map(tuple, np.floor(points / voxel_size).astype(np.int64)))


def voxel_coverage(reconstructed: PointCloud, reference: PointCloud,
                   voxel_size: float = GEOMETRY_CONFIG["coverage_voxel"]) -> float:
    """Fraction of reference-occupied voxels holding at least one reconstructed point."""
    if not voxel_size > 0:
        raise DomainError("voxel size must be positive")
    ref = _voxel_keys(reference.positions, voxel_size)
    if not ref:
        raise DomainError("reference cloud is empty")
    rec = _voxel_keys(reconstructed.positions, voxel_size)
    return len(ref & rec) / len(ref)
