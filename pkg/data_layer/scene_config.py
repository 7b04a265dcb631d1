"""
scene_config.py - Scene and Run Configuration Files

Scene files are plain ``[section]`` / ``key = value`` text:

    [scene]       name, seed, ground_height, n_frames, particle_spacing, ...
    [camera]      width, height, focal, eye, target
    [orbit]       n_frames, elevation_deg, radius_factor, start_azimuth_deg
    [sim]         solver settings (dt, substeps, grid_res, ...)
    [sde.stage1]  tau, gamma, n_steps, beta, seed
    [sde.stage2]  same keys as stage 1
    [dataset]     n_jitter, distractor
    [steam]       SteamParams fields shared by every steam driver
    [rigid]       density, kp, kv of the striking arm
    [sph]         viscosity, particle_size, sampler
    [object.NAME] id, shape, center, size, radius, boxes, color, material, velocity
    [driver.NAME] type plus the parameters of that driver

Every section is validated by a pydantic model that forbids unknown keys;
errors are raised as ConfigError naming ``section.key``. Vectors are comma
separated; composite boxes are ``cx,cy,cz,sx,sy,sz`` groups joined by ``;``.
The canonical text always carries [rigid] and [sph] with their effective
values, so the recorded arm gains and liquid parameters enter the run hash.

Example Usage:
    ```python
    spec, text = load_scene("scenes/falling_block.cfg", ["sde.stage1.tau=0.7"])
    ```
"""

import configparser
import io
import logging
from dataclasses import replace
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Sequence, Tuple, Type

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, ValidationError, field_validator

from config import GEOMETRY_CONFIG, RIGID_CONFIG, SIM_CONFIG, SPH_CONFIG, STEAM_CONFIG, WIND_CONFIG
from cg_flow.cg_sde import SdeConfig
from cg_flow.errors import ConfigError
from cg_flow.geometry import CameraIntrinsics, OrbitSpec, look_at
from cg_flow.physics_sim import (
    KinematicSphere,
    MaterialParams,
    RigidParams,
    SimConfig,
    SphParams,
    SteamModifier,
    SteamParams,
    VortexField,
    WindField,
    WindImpulse,
)
from cg_flow.pipeline import DatasetSpec, SceneSpec
from cg_flow.scenes import SceneObject, bounding_sphere

logger = logging.getLogger(__name__)


def _split_vector(v):
    if isinstance(v, str):
        return tuple(float(x) for x in v.split(",") if x.strip())
    return v


Vec3 = Annotated[Tuple[float, float, float], BeforeValidator(_split_vector)]
Vec2 = Annotated[Tuple[float, float], BeforeValidator(_split_vector)]
Gains = Annotated[Tuple[float, ...], BeforeValidator(_split_vector)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SceneSection(_Section):
    name: str
    seed: int = 0
    ground_height: float = 0.0
    n_frames: int = 24
    particle_spacing: float = SIM_CONFIG["particle_spacing"]
    voxel_size: float = GEOMETRY_CONFIG["voxel_size"]
    point_radius_px: float = GEOMETRY_CONFIG["point_radius_px"]

    @field_validator("n_frames")
    @classmethod
    def _frames(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("particle_spacing", "voxel_size", "point_radius_px")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v


class CameraSection(_Section):
    width: int = GEOMETRY_CONFIG["image_width"]
    height: int = GEOMETRY_CONFIG["image_height"]
    focal: float = GEOMETRY_CONFIG["focal"]
    eye: Vec3
    target: Vec3


class OrbitSection(_Section):
    n_frames: int = GEOMETRY_CONFIG["orbit_frames"]
    elevation_deg: float = GEOMETRY_CONFIG["orbit_elevation_deg"]
    radius_factor: float = GEOMETRY_CONFIG["orbit_radius_factor"]
    start_azimuth_deg: float = 0.0

    @field_validator("elevation_deg")
    @classmethod
    def _elevation(cls, v: float) -> float:
        # the look-at frame is singular at the poles
        if abs(v) >= 90.0:
            raise ValueError("elevation must lie strictly between -90 and 90 degrees")
        return v

    @field_validator("n_frames")
    @classmethod
    def _frames(cls, v: int) -> int:
        if v < 2:
            raise ValueError("orbit needs at least 2 frames")
        return v


class SimSection(_Section):
    dt: Optional[float] = None
    substeps: Optional[int] = None
    grid_res: Optional[int] = None
    grid_dx: Optional[float] = None
    grid_origin: Optional[Vec3] = None
    gravity: Optional[Vec3] = None
    friction_mu: Optional[float] = None
    coupling_friction: Optional[float] = None
    damping: Optional[float] = None
    walls: Optional[bool] = None
    boundary_cells: Optional[int] = None
    ground: bool = True


class SdeSection(_Section):
    tau: float
    gamma: float = 0.2
    n_steps: int = 10
    beta: Optional[float] = None
    seed: int = 0


class DatasetSection(_Section):
    n_jitter: int = 2
    distractor: bool = True


class SteamSection(_Section):
    jitter_coefficient: float = STEAM_CONFIG["jitter_coefficient"]
    damping_height: float = STEAM_CONFIG["damping_height"]
    damping_factor: float = STEAM_CONFIG["damping_factor"]
    recycle_height: float = STEAM_CONFIG["recycle_height"]
    recycle: bool = STEAM_CONFIG["recycle"]
    source_center: Vec3 = STEAM_CONFIG["source_center"]
    source_radius: float = STEAM_CONFIG["source_radius"]
    source_height: float = STEAM_CONFIG["source_height"]

    @field_validator("damping_factor")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return v

    @field_validator("jitter_coefficient")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("source_radius", "source_height")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    def params(self) -> SteamParams:
        return SteamParams(**self.model_dump())


class RigidSection(_Section):
    density: float = RIGID_CONFIG["density"]
    kp: Gains = RIGID_CONFIG["kp"]
    kv: Gains = RIGID_CONFIG["kv"]

    @field_validator("density")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @field_validator("kp", "kv")
    @classmethod
    def _gains(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(v) != len(RIGID_CONFIG["kp"]):
            raise ValueError(f"needs {len(RIGID_CONFIG['kp'])} joint gains, got {len(v)}")
        if min(v) < 0:
            raise ValueError("gains must be >= 0")
        return v

    def params(self) -> RigidParams:
        return RigidParams(self.density, self.kp, self.kv)


class SphSection(_Section):
    viscosity: float = SPH_CONFIG["viscosity"]
    particle_size: float = SPH_CONFIG["particle_size"]
    sampler: Literal["regular", "random"] = SPH_CONFIG["sampler"]

    @field_validator("viscosity")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("particle_size")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    def params(self) -> SphParams:
        return SphParams(**self.model_dump())


class ObjectSection(_Section):
    id: int
    shape: Literal["box", "sphere", "composite"]
    center: Vec3 = (0.0, 0.0, 0.0)
    size: Vec3 = (0.0, 0.0, 0.0)
    radius: float = 0.0
    boxes: Tuple[Tuple[Vec3, Vec3], ...] = ()
    color: Vec3 = (0.8, 0.3, 0.2)
    material: Literal["mpm", "steam", "custom"] = "mpm"
    youngs_E: Optional[float] = None
    poisson_nu: Optional[float] = None
    density_rho: Optional[float] = None
    kind: Optional[Literal["elastic", "snow"]] = None
    velocity: Vec3 = (0.0, 0.0, 0.0)

    @field_validator("boxes", mode="before")
    @classmethod
    def _boxes(cls, v):
        if not isinstance(v, str):
            return v
        boxes = []
        for group in filter(str.strip, v.split(";")):
            nums = _split_vector(group)
            if len(nums) != 6:
                raise ValueError(f"box '{group.strip()}' needs 6 numbers (center then size)")
            boxes.append((nums[:3], nums[3:]))
        return tuple(boxes)

    def material_params(self) -> MaterialParams:
        base = MaterialParams.from_config("mpm" if self.material == "custom" else self.material)
        overrides = {k: getattr(self, k) for k in ("youngs_E", "poisson_nu", "density_rho", "kind")
                     if getattr(self, k) is not None}
        return replace(base, **overrides)


class DriverSection(_Section):
    type: Literal["vortex", "wind", "sphere", "wind_impulse", "steam"]
    # vortex
    c: Optional[float] = None
    omega: Optional[float] = None
    axis: Optional[Vec2] = None
    decay: float = STEAM_CONFIG["vortex_decay"]
    # wind field / wind impulse
    amplitude: float = WIND_CONFIG["amplitude"]
    period: Optional[float] = None
    period_frames: int = WIND_CONFIG["period_frames"]
    sway_period_frames: int = WIND_CONFIG["sway_period_frames"]
    direction: Vec3 = (0.0, 1.0, 0.0)
    # kinematic sphere
    x: float = 0.0
    y: float = 0.0
    radius: Optional[float] = None
    z0: Optional[float] = None
    h: Optional[float] = None
    d: Optional[float] = None
    n: Optional[float] = None
    friction: float = SIM_CONFIG["coupling_friction"]
    # steam
    seed: int = 0

    def _need(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigError(f"driver type '{self.type}' needs {', '.join(missing)}", key=missing[0])

    def build(self, steam: Optional[SteamParams] = None):
        if self.type == "vortex":
            self._need("c", "omega")
            return VortexField(self.c, self.omega, self.axis or (0.0, 0.0), self.decay)
        if self.type == "wind":
            self._need("period")
            return WindField(self.amplitude, self.period, self.direction)
        if self.type == "sphere":
            self._need("radius", "z0", "h", "d", "n")
            return KinematicSphere(self.x, self.y, self.radius, self.z0, self.h, self.d, self.n,
                                   self.friction)
        if self.type == "wind_impulse":
            return WindImpulse(self.amplitude, self.period_frames, self.direction,
                               self.sway_period_frames)
        return SteamModifier(steam or SteamParams(), self.seed)


FIXED_SECTIONS: Dict[str, Type[_Section]] = {
    "scene": SceneSection,
    "camera": CameraSection,
    "orbit": OrbitSection,
    "sim": SimSection,
    "sde.stage1": SdeSection,
    "sde.stage2": SdeSection,
    "dataset": DatasetSection,
    "steam": SteamSection,
    "rigid": RigidSection,
    "sph": SphSection,
}
PREFIXED_SECTIONS: Dict[str, Type[_Section]] = {
    "object.": ObjectSection,
    "driver.": DriverSection,
}
REQUIRED_SECTIONS = ("scene", "camera", "sde.stage1", "sde.stage2")
# always written to the canonical text with their effective values
RECORDED_SECTIONS = ("rigid", "sph")


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    return parser


def apply_overrides(parser: configparser.ConfigParser, overrides: Sequence[str]) -> None:
    """Apply ``section.key=value`` overrides; the section is everything before the last dot."""
    for item in overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().rpartition(".")
        if not sep or not dot or not section or not key:
            raise ConfigError(f"override '{item}' is not of the form section.key=value", key=lhs.strip())
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())
        logger.debug("override %s.%s = %s", section, key, value.strip())


def _record(parser: configparser.ConfigParser, section: str, model: _Section) -> None:
    """Write every field of ``model`` into ``section``, defaults included."""
    if not parser.has_section(section):
        parser.add_section(section)
    for key, value in model.model_dump().items():
        if isinstance(value, tuple):
            value = ",".join(repr(float(v)) for v in value)
        parser.set(section, key, str(value))


def _validate(section: str, model: Type[_Section], values: Dict[str, str]) -> _Section:
    try:
        return model(**values)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"][:1])
        key = f"{section}.{loc}" if loc else section
        raise ConfigError(err["msg"], key=key) from exc
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"{section}.{exc.key}" if exc.key else section) from exc


def _model_for(section: str) -> Type[_Section]:
    if section in FIXED_SECTIONS:
        return FIXED_SECTIONS[section]
    for prefix, model in PREFIXED_SECTIONS.items():
        if section.startswith(prefix) and len(section) > len(prefix):
            return model
    raise ConfigError(f"unknown section [{section}]", key=section)


def parse_scene_text(text: str, overrides: Sequence[str] = ()) -> Tuple[SceneSpec, str]:
    """
    Parse and validate scene text.

    Returns:
        Tuple[SceneSpec, str]: the scene and its canonical text (overrides applied),
        which is what runs record as ``config.txt`` and hash into the manifest
    """
    parser = _new_parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed scene file: {exc.message}", key="file") from exc
    apply_overrides(parser, overrides)

    for name in REQUIRED_SECTIONS:
        if not parser.has_section(name):
            raise ConfigError(f"missing section [{name}]", key=name)
    sections = {name: _validate(name, _model_for(name), dict(parser.items(name)))
                for name in parser.sections()}

    scene: SceneSection = sections["scene"]
    cam: CameraSection = sections["camera"]
    orbit_cfg: OrbitSection = sections.get("orbit") or OrbitSection()
    sim_cfg: SimSection = sections.get("sim") or SimSection()
    dataset: DatasetSection = sections.get("dataset") or DatasetSection()
    steam: SteamParams = (sections.get("steam") or SteamSection()).params()
    rigid: RigidSection = sections.get("rigid") or RigidSection()
    sph: SphSection = sections.get("sph") or SphSection()

    objects: List[SceneObject] = []
    drivers = []
    for name, sec in sections.items():
        try:
            if isinstance(sec, ObjectSection):
                objects.append(SceneObject(
                    object_id=sec.id, shape=sec.shape, center=sec.center, size=sec.size,
                    radius=sec.radius, boxes=sec.boxes, color=sec.color,
                    material=sec.material_params(), velocity=sec.velocity))
            elif isinstance(sec, DriverSection):
                drivers.append(sec.build(steam))
        except (ConfigError, ValueError) as exc:
            key = getattr(exc, "key", None)
            leaf = key.split(".")[-1] if key else None
            raise ConfigError(str(exc), key=f"{name}.{leaf}" if leaf else name) from exc
    if not objects:
        raise ConfigError("scene needs at least one [object.NAME] section", key="object")

    def sde(stage: str) -> SdeConfig:
        values = sections[f"sde.{stage}"].model_dump(exclude_none=True)
        try:
            return SdeConfig(stage=stage, **values)
        except ValidationError as exc:
            raise ConfigError(exc.errors()[0]["msg"], key=f"sde.{stage}") from exc

    sim_values = sim_cfg.model_dump(exclude_none=True, exclude={"ground"})
    sim_values["ground_height"] = scene.ground_height if sim_cfg.ground else None
    try:
        sim = SimConfig(**sim_values)
        intr = CameraIntrinsics.centered(cam.width, cam.height, cam.focal)
        input_pose = look_at(np.array(cam.eye), np.array(cam.target))
    except ValidationError as exc:
        raise ConfigError(exc.errors()[0]["msg"], key=f"sim.{exc.errors()[0]['loc'][0]}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc), key="camera") from exc

    center, radius = bounding_sphere(objects)
    orbit = OrbitSpec(tuple(center), orbit_cfg.radius_factor * radius,
                      float(np.radians(orbit_cfg.elevation_deg)), orbit_cfg.n_frames,
                      float(np.radians(orbit_cfg.start_azimuth_deg)))

    spec = SceneSpec(
        name=scene.name,
        objects=objects,
        intr=intr,
        input_pose=input_pose,
        orbit=orbit,
        sim=sim,
        sde_stage1=sde("stage1"),
        sde_stage2=sde("stage2"),
        ground_height=scene.ground_height,
        n_frames=scene.n_frames,
        particle_spacing=scene.particle_spacing,
        voxel_size=scene.voxel_size,
        point_radius_px=scene.point_radius_px,
        dataset=DatasetSpec(dataset.n_jitter, dataset.distractor),
        drivers=drivers,
        rigid=rigid.params(),
        sph=sph.params(),
        seed=scene.seed,
    )
    for name in RECORDED_SECTIONS:
        _record(parser, name, sections.get(name) or FIXED_SECTIONS[name]())
    buf = io.StringIO()
    parser.write(buf)
    return spec, buf.getvalue()


def load_scene(path, overrides: Sequence[str] = ()) -> Tuple[SceneSpec, str]:
    """Read a scene file; a missing file raises ConfigError naming the path."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scene file not found: {path}", key=str(path))
    logger.info("loading scene %s (%d overrides)", path, len(overrides))
    return parse_scene_text(path.read_text(), overrides)
