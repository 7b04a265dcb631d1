"""
On-disk formats for the cgflow toolkit

This module owns every file the library reads or writes, and the
RunArtifactStore that records artifacts of a run for its manifest.

Key Features:
- CGFL binary latent container (also used for masks and depth maps, C = 1)
- CGTJ binary point-trajectory file with a packed per-point record
- ASCII PLY point clouds with an integer object_id property
- Binary PPM (P6) frames
- Pose text files, dataset manifests, run manifests and key=value reports

Example Usage:
    from data_layer.formats import RunArtifactStore, read_latent

    store = RunArtifactStore("runs/falling_block", config_text)
    store.write_latent("orbit/mask.cgfl", mask_latent)
    store.write_manifest()

    latent = read_latent("runs/falling_block/orbit/mask.cgfl")

Note: floats are stored as float32 in binary containers and with full
precision in text formats; colours are quantised to 8 bits.
"""

import hashlib
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from cg_flow.errors import ConfigError, ShapeError
from cg_flow.flow_core import LatentVideo, VideoMask
from cg_flow.geometry import CameraPose, PointCloud
from cg_flow.physics_sim import PointTrajectories

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

LATENT_MAGIC = b"CGFL"
TRAJ_MAGIC = b"CGTJ"
FORMAT_VERSION = 1

LATENT_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("shape", "<u4", (4,))])
TRAJ_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("frames", "<u4"), ("points", "<u4")])
TRAJ_RECORD = np.dtype([("pos", "<f4", (3,)), ("rgb", "u1", (3,)), ("oid", "<u2")])

MANIFEST_EXCLUDE = ("manifest.txt", "timings.txt")


class FormatError(ConfigError):
    """A file does not follow its declared format."""


def _mkdir_for(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _to_u8(colors: np.ndarray) -> np.ndarray:
    return np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)


# ============================================================================
# CGFL latent container
# ============================================================================

def write_latent(path: PathLike, latent: LatentVideo) -> Path:
    """Write a F x H x W x C latent as magic, version, F H W C, float32 data."""
    path = _mkdir_for(path)
    header = np.zeros(1, dtype=LATENT_HEADER)
    header["magic"], header["version"] = LATENT_MAGIC, FORMAT_VERSION
    header["shape"] = latent.shape
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(latent.data.astype("<f4").tobytes())
    return path


def read_latent(path: PathLike) -> LatentVideo:
    raw = Path(path).read_bytes()
    if len(raw) < LATENT_HEADER.itemsize:
        raise FormatError(f"{path}: truncated latent header")
    header = np.frombuffer(raw[:LATENT_HEADER.itemsize], dtype=LATENT_HEADER)[0]
    if header["magic"] != LATENT_MAGIC or header["version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: not a CGFL v{FORMAT_VERSION} file")
    shape = tuple(int(s) for s in header["shape"])
    data = np.frombuffer(raw[LATENT_HEADER.itemsize:], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path}: payload of {data.size} values does not match shape {shape}")
    return LatentVideo(data.reshape(shape).astype(np.float64))


def write_mask(path: PathLike, mask: VideoMask) -> Path:
    return write_latent(path, LatentVideo(mask.data[..., None]))


def read_mask(path: PathLike) -> VideoMask:
    latent = read_latent(path)
    if latent.channels != 1:
        raise FormatError(f"{path}: mask files carry one channel, found {latent.channels}")
    return VideoMask(latent.data[..., 0])


# ============================================================================
# CGTJ trajectories
# ============================================================================

def write_trajectory(path: PathLike, traj: PointTrajectories) -> Path:
    """Header (magic, version, frames, points) then one packed record per point per frame."""
    path = _mkdir_for(path)
    if traj.n_points and traj.object_ids.max() > np.iinfo(np.uint16).max:
        raise ShapeError("object ids do not fit the trajectory record")
    header = np.zeros(1, dtype=TRAJ_HEADER)
    header["magic"], header["version"] = TRAJ_MAGIC, FORMAT_VERSION
    header["frames"], header["points"] = traj.n_frames, traj.n_points
    records = np.zeros((traj.n_frames, traj.n_points), dtype=TRAJ_RECORD)
    records["pos"] = traj.positions
    records["rgb"] = _to_u8(traj.colors)[None]
    records["oid"] = traj.object_ids[None]
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(records.tobytes())
    return path


def read_trajectory(path: PathLike) -> PointTrajectories:
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw[:TRAJ_HEADER.itemsize], dtype=TRAJ_HEADER)[0]
    if header["magic"] != TRAJ_MAGIC or header["version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: not a CGTJ v{FORMAT_VERSION} file")
    frames, points = int(header["frames"]), int(header["points"])
    records = np.frombuffer(raw[TRAJ_HEADER.itemsize:], dtype=TRAJ_RECORD)
    if records.size != frames * points:
        raise FormatError(f"{path}: expected {frames * points} records, found {records.size}")
    records = records.reshape(frames, points)
    first = records[0] if frames else np.zeros(0, dtype=TRAJ_RECORD)
    return PointTrajectories(positions=records["pos"].astype(np.float64),
                             colors=first["rgb"].astype(np.float64) / 255.0,
                             object_ids=first["oid"].astype(np.int64))


# ============================================================================
# PLY / PPM / poses
# ============================================================================

def write_ply(path: PathLike, cloud: PointCloud) -> Path:
    path = _mkdir_for(path)
    rgb = _to_u8(cloud.colors)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property double x", "property double y", "property double z",
             "property uchar red", "property uchar green", "property uchar blue",
             "property int object_id", "end_header"]
    for p, c, oid in zip(cloud.positions, rgb, cloud.object_ids):
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]} {int(oid)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_ply(path: PathLike) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing ply magic")
    try:
        end = lines.index("end_header")
    except ValueError:
        raise FormatError(f"{path}: missing end_header")
    count = next((int(line.split()[2]) for line in lines[:end] if line.startswith("element vertex")),
                 None)
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    if count == 0:
        return PointCloud.empty()
    body = np.array([row.split() for row in lines[end + 1:end + 1 + count]], dtype=np.float64)
    if body.shape != (count, 7):
        raise FormatError(f"{path}: expected {count} rows of 7 values")
    return PointCloud(body[:, :3], body[:, 3:6] / 255.0, body[:, 6].astype(np.int64))


def write_ppm(path: PathLike, image: np.ndarray) -> Path:
    """Binary P6 frame from an (H, W, 3) image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"PPM frames are (H, W, 3), got {image.shape}")
    path = _mkdir_for(path)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_u8(image).tobytes())
    return path


def read_ppm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only 8-bit P6 files are supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_poses(path: PathLike, poses: Sequence[CameraPose]) -> Path:
    """One line per pose: row-major rotation then translation."""
    path = _mkdir_for(path)
    rows = [" ".join(repr(float(v)) for v in np.concatenate([p.rotation.ravel(), p.translation]))
            for p in poses]
    path.write_text("\n".join(rows) + "\n")
    return path


def read_poses(path: PathLike) -> List[CameraPose]:
    poses = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        values = np.array(line.split(), dtype=np.float64)
        if values.size != 12:
            raise FormatError(f"{path}:{n}: expected 12 values, found {values.size}")
        poses.append(CameraPose(values[:9].reshape(3, 3), values[9:]))
    return poses


# ============================================================================
# Manifests and reports
# ============================================================================

def read_dataset_manifest(path: PathLike) -> List[Tuple[Path, str]]:
    """(latent file, condition key) pairs; relative paths resolve against the manifest."""
    path = Path(path)
    entries = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected '<file> <key>'")
        entries.append(((path.parent / parts[0]).resolve(), parts[1]))
    if not entries:
        raise FormatError(f"{path}: dataset manifest is empty")
    return entries


def write_dataset_manifest(path: PathLike, entries: Iterable[Tuple[str, str]]) -> Path:
    path = _mkdir_for(path)
    path.write_text("".join(f"{f} {k}\n" for f, k in entries))
    return path


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_report(path: PathLike, values: Dict[str, object]) -> Path:
    """key=value lines in insertion order."""
    path = _mkdir_for(path)
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))
    return path


def read_report(path: PathLike) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line and not line.startswith("#"):
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


class RunArtifactStore:
    """
    Writes the artifacts of one run under ``run_dir`` and tracks them for the
    manifest.

    Attributes:
        run_dir (Path): Root of the run directory
        config_hash (str): sha-256 of the canonical configuration text
        files (List[str]): Relative paths written so far, in order
    """

    def __init__(self, run_dir: PathLike, config_text: str):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = sha256_text(config_text)
        self.files: List[str] = []
        self.write_text("config.txt", config_text)

    def _path(self, rel: str) -> Path:
        if rel not in self.files and rel not in MANIFEST_EXCLUDE:
            self.files.append(rel)
        return self.run_dir / rel

    def write_text(self, rel: str, text: str) -> Path:
        path = _mkdir_for(self._path(rel))
        path.write_text(text)
        return path

    def write_latent(self, rel: str, latent: LatentVideo) -> Path:
        return write_latent(self._path(rel), latent)

    def write_mask(self, rel: str, mask: VideoMask) -> Path:
        return write_mask(self._path(rel), mask)

    def write_ply(self, rel: str, cloud: PointCloud) -> Path:
        return write_ply(self._path(rel), cloud)

    def write_trajectory(self, rel: str, traj: PointTrajectories) -> Path:
        return write_trajectory(self._path(rel), traj)

    def write_frames(self, folder: str, frames: np.ndarray) -> List[Path]:
        return [write_ppm(self._path(f"{folder}/frame_{i:04d}.ppm"), frame)
                for i, frame in enumerate(frames)]

    def write_poses(self, rel: str, poses: Sequence[CameraPose]) -> Path:
        return write_poses(self._path(rel), poses)

    def write_report(self, rel: str, values: Dict[str, object]) -> Path:
        return write_report(self._path(rel), values)

    def write_manifest(self) -> str:
        """Write manifest.txt and return its sha-256."""
        lines = [f"config_hash {self.config_hash}"]
        lines += [f"{sha256_file(self.run_dir / rel)}  {rel}" for rel in self.files]
        text = "\n".join(lines) + "\n"
        (self.run_dir / "manifest.txt").write_text(text)
        logger.info("Wrote manifest with %d artifacts to %s", len(self.files), self.run_dir)
        return sha256_text(text)


def read_manifest(path: PathLike) -> Tuple[Optional[str], Dict[str, str]]:
    """(config hash, {relative path: sha-256})."""
    config_hash, entries = None, {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("config_hash "):
            config_hash = line.split()[1]
        elif line.strip():
            digest, rel = line.split(None, 1)
            entries[rel.strip()] = digest
    return config_hash, entries
