"""
physics_sim.py - Desk-Scale Particle Physics

This module produces the point trajectories that drive the simulation
stage:
1. Explicit MLS-MPM (quadratic B-splines, APIC transfer) with fixed-corotated
   elasticity and snow plasticity
2. XPBD cloth with stretch and dihedral bending constraints and pinning
3. Ground plane and kinematic sphere colliders with Coulomb friction
4. Analytic drivers: strike trajectory, vortex curl, steam modifiers and
   sinusoidal wind impulses

Key Features:
- Pure numpy; scatter uses np.bincount over a sorted active-node set, so
  accumulation order is fixed and runs are bitwise reproducible
- Non-finite states and CFL violations raise NumericalError with the global
  substep index
- One-way coupling: colliders move particles, never the reverse
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from config import (
    MATERIAL_CONFIG,
    PBD_CONFIG,
    RIGID_CONFIG,
    SIM_CONFIG,
    SPH_CONFIG,
    STEAM_CONFIG,
    WIND_CONFIG,
)
from cg_flow.errors import DomainError, NumericalError, ShapeError
from cg_flow.geometry import Plane, PointCloud

logger = logging.getLogger(__name__)

MATERIAL_KINDS = ("elastic", "snow")
SNOW_HARDENING = 10.0
_OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)], dtype=np.int64)


# ============================================================================
# Parameters
# ============================================================================

@dataclass(frozen=True)
class MaterialParams:
    youngs_E: float
    poisson_nu: float
    density_rho: float
    kind: str = "elastic"

    def __post_init__(self):
        if not self.youngs_E > 0:
            raise DomainError(f"Young's modulus must be positive, got {self.youngs_E}")
        if not 0.0 <= self.poisson_nu < 0.5:
            raise DomainError(f"Poisson ratio must lie in [0, 0.5), got {self.poisson_nu}")
        if not self.density_rho > 0:
            raise DomainError(f"density must be positive, got {self.density_rho}")
        if self.kind not in MATERIAL_KINDS:
            raise DomainError(f"unknown material kind '{self.kind}'")

    @classmethod
    def from_config(cls, name: str = "mpm") -> "MaterialParams":
        return cls(**MATERIAL_CONFIG[name])


class SimConfig(BaseModel):
    """Solver settings; ``ground_height`` None disables the ground plane."""

    model_config = ConfigDict(extra="forbid")

    dt: float = SIM_CONFIG["dt"]
    substeps: int = SIM_CONFIG["substeps"]
    grid_res: int = SIM_CONFIG["grid_res"]
    grid_dx: float = SIM_CONFIG["grid_dx"]
    grid_origin: Tuple[float, float, float] = SIM_CONFIG["grid_origin"]
    gravity: Tuple[float, float, float] = SIM_CONFIG["gravity"]
    ground_height: Optional[float] = 0.0
    friction_mu: float = SIM_CONFIG["friction_mu"]
    coupling_friction: float = SIM_CONFIG["coupling_friction"]
    damping: float = SIM_CONFIG["damping"]
    walls: bool = True
    boundary_cells: int = SIM_CONFIG["boundary_cells"]
    cloth_iterations: int = SIM_CONFIG["cloth_iterations"]

    @field_validator("dt", "grid_dx")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @field_validator("substeps", "cloth_iterations")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("grid_res")
    @classmethod
    def _resolution(cls, v: int) -> int:
        if v < 4:
            raise ValueError("grid resolution must be >= 4")
        return v

    @field_validator("friction_mu", "coupling_friction", "damping")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @property
    def substep_dt(self) -> float:
        return self.dt / self.substeps

    @property
    def ground(self) -> Optional[Plane]:
        return None if self.ground_height is None else Plane.ground(self.ground_height)


@dataclass(frozen=True)
class SteamParams:
    jitter_coefficient: float = STEAM_CONFIG["jitter_coefficient"]
    damping_height: float = STEAM_CONFIG["damping_height"]
    damping_factor: float = STEAM_CONFIG["damping_factor"]
    recycle_height: float = STEAM_CONFIG["recycle_height"]
    recycle: bool = STEAM_CONFIG["recycle"]
    source_center: Tuple[float, float, float] = STEAM_CONFIG["source_center"]
    source_radius: float = STEAM_CONFIG["source_radius"]
    source_height: float = STEAM_CONFIG["source_height"]

    def __post_init__(self):
        if not 0.0 <= self.damping_factor <= 1.0:
            raise DomainError("steam damping factor must lie in [0, 1]")
        if self.jitter_coefficient < 0:
            raise DomainError("steam jitter coefficient must be >= 0")


@dataclass(frozen=True)
class RigidParams:
    """Striking-arm parameters.

    Only the end-effector is simulated (``KinematicSphere``); the joint PD
    gains are carried with the scene so a run records the full arm setup.
    """

    density: float = RIGID_CONFIG["density"]
    kp: Tuple[float, ...] = RIGID_CONFIG["kp"]
    kv: Tuple[float, ...] = RIGID_CONFIG["kv"]

    def __post_init__(self):
        if not self.density > 0:
            raise DomainError(f"rigid density must be positive, got {self.density}")
        if len(self.kp) != len(self.kv):
            raise DomainError(f"kp has {len(self.kp)} gains but kv has {len(self.kv)}")
        if min(self.kp + self.kv, default=0.0) < 0:
            raise DomainError("PD gains must be >= 0")


@dataclass(frozen=True)
class SphParams:
    """Liquid parameters recorded with a run; no SPH solver consumes them."""

    viscosity: float = SPH_CONFIG["viscosity"]
    particle_size: float = SPH_CONFIG["particle_size"]
    sampler: str = SPH_CONFIG["sampler"]

    def __post_init__(self):
        if self.viscosity < 0:
            raise DomainError(f"viscosity must be >= 0, got {self.viscosity}")
        if not self.particle_size > 0:
            raise DomainError(f"particle size must be positive, got {self.particle_size}")


def lame_from_material(m: MaterialParams) -> Tuple[float, float]:
    """(lambda, mu) from Young's modulus and Poisson ratio."""
    if m.poisson_nu >= 0.5:
        raise DomainError(f"Poisson ratio must be < 0.5, got {m.poisson_nu}")
    mu = m.youngs_E / (2.0 * (1.0 + m.poisson_nu))
    lam = m.youngs_E * m.poisson_nu / ((1.0 + m.poisson_nu) * (1.0 - 2.0 * m.poisson_nu))
    return lam, mu


# ============================================================================
# States
# ============================================================================

@dataclass
class ParticleSet:
    """MPM particles.

    ``plastic_J`` tracks the plastic volume change of snow particles; it is
    one for elastic ones.
    """

    positions: np.ndarray
    velocities: np.ndarray
    deformation_grad: np.ndarray
    affine_C: np.ndarray
    masses: np.ndarray
    volumes: np.ndarray
    material_id: np.ndarray
    materials: Tuple[MaterialParams, ...]
    colors: np.ndarray
    object_ids: np.ndarray
    plastic_J: Optional[np.ndarray] = None

    def __post_init__(self):
        n = np.asarray(self.positions).reshape(-1, 3).shape[0]
        if self.plastic_J is None:
            self.plastic_J = np.ones(n)
        for name, shape in (("velocities", (n, 3)), ("deformation_grad", (n, 3, 3)),
                            ("affine_C", (n, 3, 3)), ("masses", (n,)), ("volumes", (n,)),
                            ("material_id", (n,)), ("colors", (n, 3)), ("object_ids", (n,)),
                            ("plastic_J", (n,))):
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"ParticleSet.{name} has shape {np.shape(getattr(self, name))}, "
                                 f"expected {shape}")
        if n and np.any(np.asarray(self.masses) <= 0):
            raise DomainError("particle masses must be positive")
        if n and (self.material_id.min() < 0 or self.material_id.max() >= len(self.materials)):
            raise DomainError("material_id refers to an unknown material")

    @classmethod
    def from_cloud(cls, cloud: PointCloud, material: MaterialParams, spacing: float,
                   velocity: Sequence[float] = (0.0, 0.0, 0.0)) -> "ParticleSet":
        """Particles of one material with volume spacing^3 and uniform initial velocity."""
        n = len(cloud)
        volume = spacing ** 3
        return cls(positions=cloud.positions.copy(),
                   velocities=np.tile(np.asarray(velocity, dtype=np.float64), (n, 1)),
                   deformation_grad=np.tile(np.eye(3), (n, 1, 1)),
                   affine_C=np.zeros((n, 3, 3)),
                   masses=np.full(n, material.density_rho * volume),
                   volumes=np.full(n, volume),
                   material_id=np.zeros(n, dtype=np.int64),
                   materials=(material,),
                   colors=cloud.colors.copy(),
                   object_ids=cloud.object_ids.copy())

    @classmethod
    def merge(cls, sets: Sequence["ParticleSet"]) -> "ParticleSet":
        materials: List[MaterialParams] = []
        ids = []
        for s in sets:
            offset = len(materials)
            materials.extend(s.materials)
            ids.append(s.material_id + offset)
        cat = lambda name: np.concatenate([getattr(s, name) for s in sets])  # noqa: E731
        return cls(cat("positions"), cat("velocities"), cat("deformation_grad"), cat("affine_C"),
                   cat("masses"), cat("volumes"), np.concatenate(ids), tuple(materials),
                   cat("colors"), cat("object_ids"), cat("plastic_J"))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.positions.copy(), self.velocities.copy(),
                           self.deformation_grad.copy(), self.affine_C.copy(), self.masses.copy(),
                           self.volumes.copy(), self.material_id.copy(), self.materials,
                           self.colors.copy(), self.object_ids.copy(), self.plastic_J.copy())


@dataclass
class ClothState:
    positions: np.ndarray
    velocities: np.ndarray
    edges: np.ndarray
    rest_lengths: np.ndarray
    bends: np.ndarray
    rest_angles: np.ndarray
    pinned: np.ndarray
    anchors: np.ndarray
    inv_masses: np.ndarray
    stretch_compliance: float = PBD_CONFIG["stretch_compliance"]
    bend_compliance: float = PBD_CONFIG["bend_compliance"]
    colors: Optional[np.ndarray] = None
    object_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        m = self.positions.shape[0]
        if self.colors is None:
            self.colors = np.full((m, 3), 0.5)
        if self.object_ids is None:
            self.object_ids = np.ones(m, dtype=np.int64)
        if np.any(self.rest_lengths <= 0):
            raise DomainError("cloth rest lengths must be positive")
        if self.pinned.size and (self.pinned.min() < 0 or self.pinned.max() >= m):
            raise DomainError("pinned index outside the cloth")
        if self.anchors.shape != (self.pinned.size, 3):
            raise ShapeError("one anchor position is required per pinned particle")

    @classmethod
    def grid(cls, nx: int, ny: int, spacing: float, origin: Sequence[float] = (0.0, 0.0, 1.0),
             pin_top_row: bool = True, particle_mass: float = PBD_CONFIG["particle_mass"],
             stretch_compliance: float = PBD_CONFIG["stretch_compliance"],
             bend_compliance: float = PBD_CONFIG["bend_compliance"],
             color: Sequence[float] = (0.5, 0.5, 0.5), object_id: int = 1) -> "ClothState":
        """Triangulated nx x ny sheet hanging in the x-z plane from its top row."""
        if nx < 2 or ny < 2:
            raise DomainError("cloth grid needs at least 2 x 2 vertices")
        origin = np.asarray(origin, dtype=np.float64)
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        positions = origin + np.column_stack([ii.ravel() * spacing, np.zeros(nx * ny),
                                              -jj.ravel() * spacing])
        vid = lambda i, j: i * ny + j  # noqa: E731
        triangles = []
        for i in range(nx - 1):
            for j in range(ny - 1):
                a, b, c, d = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
                triangles += [(a, b, c), (b, d, c)]

        edge_tris = {}
        for t, tri in enumerate(triangles):
            for k in range(3):
                e = tuple(sorted((tri[k], tri[(k + 1) % 3])))
                edge_tris.setdefault(e, []).append(t)
        edges = np.array(sorted(edge_tris), dtype=np.int64)
        bends = []
        for (a, b), tris in sorted(edge_tris.items()):
            if len(tris) == 2:
                c = next(v for v in triangles[tris[0]] if v not in (a, b))
                d = next(v for v in triangles[tris[1]] if v not in (a, b))
                bends.append((a, b, c, d))
        bends = np.array(bends, dtype=np.int64).reshape(-1, 4)

        pinned = np.array([vid(i, 0) for i in range(nx)] if pin_top_row else [], dtype=np.int64)
        inv_masses = np.full(nx * ny, 1.0 / particle_mass)
        inv_masses[pinned] = 0.0
        rest_lengths = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
        return cls(positions=positions, velocities=np.zeros_like(positions), edges=edges,
                   rest_lengths=rest_lengths, bends=bends,
                   rest_angles=dihedral_angles(positions, bends), pinned=pinned,
                   anchors=positions[pinned].copy(), inv_masses=inv_masses,
                   stretch_compliance=stretch_compliance, bend_compliance=bend_compliance,
                   colors=np.tile(np.asarray(color, dtype=np.float64), (nx * ny, 1)),
                   object_ids=np.full(nx * ny, object_id, dtype=np.int64))

    @property
    def masses(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.inv_masses > 0, 1.0 / self.inv_masses, 0.0)

    def copy(self) -> "ClothState":
        return replace(self, positions=self.positions.copy(), velocities=self.velocities.copy())


# ============================================================================
# Analytic drivers
# ============================================================================

def strike_z(t: float, z0: float, h: float, d: float, n: float) -> float:
    """Strike height z0 + h - (h + d) s with s = (1 - cos 2 pi n t) / 2."""
    s = 0.5 * (1.0 - np.cos(2.0 * np.pi * n * t))
    return z0 + h - (h + d) * s


def vortex_force(pos, t: float, c: float, omega: float,
                 axis: Sequence[float] = (0.0, 0.0),
                 decay: float = STEAM_CONFIG["vortex_decay"]) -> np.ndarray:
    """Tangential curl c e^{-r/decay} sin(omega t) (-sin theta, cos theta, 0) about a vertical axis."""
    pos = np.asarray(pos, dtype=np.float64)
    rel_x = pos[..., 0] - axis[0]
    rel_y = pos[..., 1] - axis[1]
    r = np.hypot(rel_x, rel_y)
    theta = np.arctan2(rel_y, rel_x)  # 0 at r = 0
    mag = c * np.exp(-r / decay) * np.sin(omega * t)
    return np.stack([-mag * np.sin(theta), mag * np.cos(theta), np.zeros_like(r)], axis=-1)


@runtime_checkable
class ForceField(Protocol):
    def acceleration(self, positions: np.ndarray, t: float) -> np.ndarray:
        ...


@dataclass(frozen=True)
class VortexField:
    c: float
    omega: float
    axis: Tuple[float, float] = (0.0, 0.0)
    decay: float = STEAM_CONFIG["vortex_decay"]

    def acceleration(self, positions: np.ndarray, t: float) -> np.ndarray:
        return vortex_force(positions, t, self.c, self.omega, self.axis, self.decay)


@dataclass(frozen=True)
class WindField:
    """Spatially uniform wind acceleration a sin(2 pi t / period) along ``direction``."""

    amplitude: float
    period: float
    direction: Tuple[float, float, float] = (0.0, 1.0, 0.0)

    def acceleration(self, positions: np.ndarray, t: float) -> np.ndarray:
        a = self.amplitude * np.sin(2.0 * np.pi * t / self.period) * _unit(self.direction)
        return np.broadcast_to(a, np.shape(positions)).copy()


@dataclass(frozen=True)
class KinematicSphere:
    """End-effector collider riding the strike trajectory above (x, y)."""

    x: float
    y: float
    radius: float
    z0: float
    h: float
    d: float
    n: float
    friction: float = SIM_CONFIG["coupling_friction"]

    def center(self, t: float) -> np.ndarray:
        return np.array([self.x, self.y, strike_z(t, self.z0, self.h, self.d, self.n)])

    def velocity(self, t: float) -> np.ndarray:
        vz = -(self.h + self.d) * np.pi * self.n * np.sin(2.0 * np.pi * self.n * t)
        return np.array([0.0, 0.0, vz])


def wind_impulse(p, frame_index: int, amplitude: float,
                 period_frames: int = WIND_CONFIG["period_frames"],
                 direction: Sequence[float] = (0.0, 1.0, 0.0),
                 sway_period_frames: int = WIND_CONFIG["sway_period_frames"]):
    """Every ``period_frames`` frames add amplitude sin(2 pi f / sway_period) along ``direction``.

    Works on ParticleSet and ClothState; pinned cloth particles are skipped.
    """
    if period_frames < 1:
        raise DomainError("period_frames must be >= 1")
    if frame_index % period_frames != 0:
        return p
    p = p.copy()
    dv = amplitude * np.sin(2.0 * np.pi * frame_index / sway_period_frames) * _unit(direction)
    free = np.ones(len(p.positions), dtype=bool)
    if isinstance(p, ClothState):
        free[p.pinned] = False
    p.velocities[free] += dv
    return p


def steam_modifiers(p: ParticleSet, t: float, params: SteamParams,
                    rng: Optional[np.random.Generator] = None) -> ParticleSet:
    """
    Per-step steam rules, applied in order: lateral jitter with standard
    deviation jitter_coefficient * z, damping of v_z above damping_height,
    teleport above recycle_height back into the source cylinder.

    Buoyancy is a gravity sign flip configured on SimConfig.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    p = p.copy()
    z = p.positions[:, 2]
    sigma = params.jitter_coefficient * np.maximum(z, 0.0)
    p.velocities[:, :2] += sigma[:, None] * rng.standard_normal((len(p), 2))

    above = z > params.damping_height
    p.velocities[above, 2] *= params.damping_factor

    if params.recycle:
        hit = np.flatnonzero(z > params.recycle_height)
        if hit.size:
            r = params.source_radius * np.sqrt(rng.random(hit.size))
            phi = 2.0 * np.pi * rng.random(hit.size)
            cx, cy, cz = params.source_center
            p.positions[hit] = np.column_stack([cx + r * np.cos(phi), cy + r * np.sin(phi),
                                                cz + params.source_height * rng.random(hit.size)])
            p.velocities[hit] = 0.0
            p.affine_C[hit] = 0.0
            p.deformation_grad[hit] = np.eye(3)
            p.plastic_J[hit] = 1.0
            logger.debug("steam recycled %d particles at t=%.4f", hit.size, t)
    return p


@dataclass
class WindImpulse:
    amplitude: float = WIND_CONFIG["amplitude"]
    period_frames: int = WIND_CONFIG["period_frames"]
    direction: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    sway_period_frames: int = WIND_CONFIG["sway_period_frames"]

    def apply(self, state, frame_index: int, t: float):
        return wind_impulse(state, frame_index, self.amplitude, self.period_frames,
                            self.direction, self.sway_period_frames)


@dataclass
class SteamModifier:
    params: SteamParams = field(default_factory=SteamParams)
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def apply(self, state, frame_index: int, t: float):
        if isinstance(state, ParticleSet):
            return steam_modifiers(state, t, self.params, self._rng)
        return state


def _unit(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise DomainError("direction must be non-zero")
    return v / n


# ============================================================================
# MLS-MPM
# ============================================================================

@dataclass
class GridTransfer:
    """Active grid nodes of one P2G scatter, with the stencil that produced them."""

    nodes: np.ndarray
    mass: np.ndarray
    momentum: np.ndarray
    inverse: np.ndarray
    weights: np.ndarray
    dpos: np.ndarray


def _stencil(x: np.ndarray, cfg: SimConfig, substep: int):
    origin = np.asarray(cfg.grid_origin)
    res, dx = cfg.grid_res, cfg.grid_dx
    xp = (x - origin) / dx
    base = np.floor(xp - 0.5).astype(np.int64)
    if np.any(base < 0) or np.any(base > res - 3):
        raise NumericalError(f"particle left the simulation grid at substep {substep}",
                             stage="mpm", index=substep)
    fx = xp - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2])
    weights = w[_OFFSETS[:, 0], :, 0] * w[_OFFSETS[:, 1], :, 1] * w[_OFFSETS[:, 2], :, 2]
    dpos = (_OFFSETS[:, None, :] - fx[None, :, :]) * dx
    idx = base[None, :, :] + _OFFSETS[:, None, :]
    linear = (idx[..., 0] * res + idx[..., 1]) * res + idx[..., 2]
    return linear, weights, dpos


def _kirchhoff(p: ParticleSet, lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Fixed-corotated P F^T, with snow hardening."""
    F = p.deformation_grad
    U, _, Vt = np.linalg.svd(F)
    R = U @ Vt
    J = np.linalg.det(F)
    hardening = np.ones(len(p))
    snow = np.array([p.materials[m].kind == "snow" for m in p.material_id], dtype=bool)
    if snow.any():
        hardening[snow] = np.clip(np.exp(SNOW_HARDENING * (1.0 - p.plastic_J[snow])), 0.1, 5.0)
    mu_h, lam_h = mu * hardening, lam * hardening
    return (2.0 * mu_h[:, None, None] * (F - R) @ np.transpose(F, (0, 2, 1))
            + (lam_h * (J - 1.0) * J)[:, None, None] * np.eye(3))


def _lame_arrays(p: ParticleSet) -> Tuple[np.ndarray, np.ndarray]:
    table = np.array([lame_from_material(m) for m in p.materials])
    return table[p.material_id, 0], table[p.material_id, 1]


def particle_to_grid(p: ParticleSet, cfg: SimConfig, substep: int = 0) -> GridTransfer:
    """APIC / MLS scatter of mass and momentum (stress impulse included)."""
    h, dx = cfg.substep_dt, cfg.grid_dx
    linear, weights, dpos = _stencil(p.positions, cfg, substep)
    lam, mu = _lame_arrays(p)
    stress = (-h * 4.0 / (dx * dx)) * p.volumes[:, None, None] * _kirchhoff(p, lam, mu)
    affine = stress + p.masses[:, None, None] * p.affine_C

    nodes, inverse = np.unique(linear.ravel(), return_inverse=True)
    inverse = inverse.reshape(linear.shape)
    contrib = weights[..., None] * (p.masses[None, :, None] * p.velocities[None, :, :]
                                    + np.einsum("nij,knj->kni", affine, dpos))
    mass = np.bincount(inverse.ravel(), weights=(weights * p.masses[None, :]).ravel(),
                       minlength=nodes.size)
    momentum = np.column_stack([np.bincount(inverse.ravel(), weights=contrib[..., a].ravel(),
                                            minlength=nodes.size) for a in range(3)])
    return GridTransfer(nodes, mass, momentum, inverse, weights, dpos)


def _node_positions(nodes: np.ndarray, cfg: SimConfig) -> Tuple[np.ndarray, np.ndarray]:
    res = cfg.grid_res
    ijk = np.column_stack([nodes // (res * res), (nodes // res) % res, nodes % res])
    return ijk, np.asarray(cfg.grid_origin) + ijk * cfg.grid_dx


def _friction_project(v: np.ndarray, normal: np.ndarray, mu: float) -> np.ndarray:
    """Remove the approaching normal component and apply Coulomb friction to the rest."""
    vn = np.einsum("ij,ij->i", v, normal) if normal.ndim == 2 else v @ normal
    approaching = vn < 0
    if not approaching.any():
        return v
    n = normal[approaching] if normal.ndim == 2 else normal
    va, vna = v[approaching], vn[approaching]
    vt = va - vna[:, None] * n
    vt_norm = np.linalg.norm(vt, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(vt_norm > 0, np.maximum(0.0, 1.0 - mu * np.abs(vna) / vt_norm), 0.0)
    out = v.copy()
    out[approaching] = vt * scale[:, None]
    return out


def _grid_update(grid: GridTransfer, cfg: SimConfig, t: float, fields: Sequence[ForceField],
                 colliders: Sequence[KinematicSphere]) -> np.ndarray:
    h = cfg.substep_dt
    v = grid.momentum / np.maximum(grid.mass, 1e-30)[:, None]
    ijk, xn = _node_positions(grid.nodes, cfg)
    v += h * np.asarray(cfg.gravity)
    for f in fields:
        v += h * f.acceleration(xn, t)
    if cfg.damping > 0:
        v *= np.exp(-cfg.damping * h)

    ground = cfg.ground
    if ground is not None:
        below = ground.signed_distance(xn) <= 0.0
        if below.any():
            v[below] = _friction_project(v[below], ground.normal, cfg.friction_mu)

    for sphere in colliders:
        rel = xn - sphere.center(t)
        dist = np.linalg.norm(rel, axis=1)
        inside = (dist < sphere.radius) & (dist > 0)
        if inside.any():
            vs = sphere.velocity(t)
            normal = rel[inside] / dist[inside, None]
            v[inside] = vs + _friction_project(v[inside] - vs, normal, sphere.friction)

    if cfg.walls:
        bc, res = cfg.boundary_cells, cfg.grid_res
        for a in range(3):
            v[(ijk[:, a] < bc) & (v[:, a] < 0), a] = 0.0
            v[(ijk[:, a] >= res - bc) & (v[:, a] > 0), a] = 0.0
    return v


def _snow_clamp(p: ParticleSet) -> None:
    snow = np.flatnonzero([p.materials[m].kind == "snow" for m in p.material_id])
    if snow.size == 0:
        return
    lo = 1.0 - MATERIAL_CONFIG["snow_critical_compression"]
    hi = 1.0 + MATERIAL_CONFIG["snow_critical_stretch"]
    U, sig, Vt = np.linalg.svd(p.deformation_grad[snow])
    clamped = np.clip(sig, lo, hi)
    p.plastic_J[snow] *= np.prod(sig, axis=1) / np.prod(clamped, axis=1)
    p.deformation_grad[snow] = U @ (clamped[:, :, None] * Vt)


def _check_state(x: np.ndarray, v: np.ndarray, cfg: SimConfig, substep: int, stage: str) -> None:
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise NumericalError(f"non-finite {stage} state at substep {substep}", stage=stage, index=substep)
    if v.size and float(np.max(np.abs(v))) * cfg.substep_dt >= cfg.grid_dx:
        raise NumericalError(f"CFL violation at substep {substep}: max |v| "
                             f"{float(np.max(np.abs(v))):.4g} m/s", stage=stage, index=substep)


def mpm_substep(p: ParticleSet, cfg: SimConfig, external: Sequence[ForceField] = (),
                t: float = 0.0, colliders: Sequence[KinematicSphere] = (),
                substep: int = 0) -> ParticleSet:
    """One P2G / grid / G2P cycle of length dt / substeps."""
    _check_state(p.positions, p.velocities, cfg, substep, "mpm")
    if len(p) == 0:
        return p.copy()
    h, dx = cfg.substep_dt, cfg.grid_dx
    grid = particle_to_grid(p, cfg, substep)
    v_grid = _grid_update(grid, cfg, t, external, colliders)

    vg = v_grid[grid.inverse]
    w = grid.weights
    new_v = np.einsum("kn,kni->ni", w, vg)
    new_C = (4.0 / (dx * dx)) * np.einsum("kn,kni,knj->nij", w, vg, grid.dpos)

    out = p.copy()
    out.velocities = new_v
    out.affine_C = new_C
    out.deformation_grad = (np.eye(3) + h * new_C) @ p.deformation_grad
    _snow_clamp(out)
    out.positions = p.positions + h * new_v

    ground = cfg.ground
    if ground is not None:
        dist = ground.signed_distance(out.positions)
        under = dist < 0
        if under.any():
            out.positions[under] = ground.project(out.positions[under])
            vn = out.velocities[under] @ ground.normal
            out.velocities[under] -= np.minimum(vn, 0.0)[:, None] * ground.normal
    if not (np.all(np.isfinite(out.positions)) and np.all(np.isfinite(out.velocities))
            and np.all(np.isfinite(out.deformation_grad))):
        raise NumericalError(f"non-finite MPM state at substep {substep}", stage="mpm", index=substep)
    return out


def mpm_step(p: ParticleSet, cfg: SimConfig, external: Sequence[ForceField] = (),
             t0: float = 0.0, colliders: Sequence[KinematicSphere] = (),
             frame: int = 0) -> ParticleSet:
    """Advance one frame (cfg.substeps substeps)."""
    h = cfg.substep_dt
    for s in range(cfg.substeps):
        p = mpm_substep(p, cfg, external, t0 + s * h, colliders, frame * cfg.substeps + s)
    return p


# ============================================================================
# XPBD cloth
# ============================================================================

def dihedral_angles(x: np.ndarray, bends: np.ndarray) -> np.ndarray:
    """Signed dihedral angle about the shared edge (a, b) of each (a, b, c, d)."""
    if bends.size == 0:
        return np.zeros(0)
    a, b, c, d = (x[bends[:, k]] for k in range(4))
    e = b - a
    e_hat = e / np.linalg.norm(e, axis=1, keepdims=True)
    n1 = np.cross(e, c - a)
    n2 = np.cross(d - a, e)
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 /= np.linalg.norm(n2, axis=1, keepdims=True)
    return np.arctan2(np.einsum("ij,ij->i", np.cross(n1, n2), e_hat), np.einsum("ij,ij->i", n1, n2))


def _dihedral_gradients(x: np.ndarray, bends: np.ndarray) -> Tuple[np.ndarray, ...]:
    a, b, c, d = (x[bends[:, k]] for k in range(4))
    e = b - a
    length = np.linalg.norm(e, axis=1, keepdims=True)
    e_hat = e / length
    n1 = np.cross(e, c - a)
    n2 = np.cross(d - a, e)
    q1 = n1 / np.einsum("ij,ij->i", n1, n1)[:, None]
    q2 = n2 / np.einsum("ij,ij->i", n2, n2)[:, None]
    dot = lambda u: np.einsum("ij,ij->i", u, e_hat)[:, None]  # noqa: E731
    gc = -length * q1
    gd = -length * q2
    ga = -dot(c - b) * q1 - dot(d - b) * q2
    gb = dot(c - a) * q1 + dot(d - a) * q2
    return ga, gb, gc, gd


def greedy_coloring(groups: np.ndarray) -> List[np.ndarray]:
    """Partition constraint rows so that no two rows of a colour share a vertex."""
    colours: List[List[int]] = []
    used: List[set] = []
    for row, verts in enumerate(groups):
        verts = set(int(v) for v in verts)
        for k, taken in enumerate(used):
            if not taken & verts:
                colours[k].append(row)
                taken |= verts
                break
        else:
            colours.append([row])
            used.append(set(verts))
    return [np.array(c, dtype=np.int64) for c in colours]


def pbd_cloth_step(c: ClothState, cfg: SimConfig, external: Sequence[ForceField] = (),
                   t0: float = 0.0, frame: int = 0) -> ClothState:
    """Advance one frame of XPBD: predict, project constraints colour by colour, update velocities."""
    h = cfg.substep_dt
    w = c.inv_masses
    free = w > 0
    edge_colours = greedy_coloring(c.edges)
    bend_colours = greedy_coloring(c.bends)
    alpha_s = c.stretch_compliance / (h * h)
    alpha_b = c.bend_compliance / (h * h)
    gravity = np.asarray(cfg.gravity)
    ground = cfg.ground

    x, v = c.positions.copy(), c.velocities.copy()
    for s in range(cfg.substeps):
        t = t0 + s * h
        accel = np.broadcast_to(gravity, x.shape).copy()
        for f in external:
            accel += f.acceleration(x, t)
        x_prev = x.copy()
        x[free] = x[free] + h * v[free] + h * h * accel[free]
        lam_s = np.zeros(len(c.edges))
        lam_b = np.zeros(len(c.bends))
        for _ in range(cfg.cloth_iterations):
            for rows in edge_colours:
                i, j = c.edges[rows, 0], c.edges[rows, 1]
                diff = x[i] - x[j]
                dist = np.linalg.norm(diff, axis=1)
                n = diff / np.maximum(dist, 1e-12)[:, None]
                C = dist - c.rest_lengths[rows]
                denom = w[i] + w[j] + alpha_s
                dl = np.where(denom > 0, (-C - alpha_s * lam_s[rows]) / np.maximum(denom, 1e-30), 0.0)
                lam_s[rows] += dl
                x[i] += (w[i] * dl)[:, None] * n
                x[j] -= (w[j] * dl)[:, None] * n
            for rows in bend_colours:
                quad = c.bends[rows]
                theta = dihedral_angles(x, quad)
                C = np.angle(np.exp(1j * (theta - c.rest_angles[rows])))
                grads = _dihedral_gradients(x, quad)
                denom = sum(w[quad[:, k]] * np.einsum("ij,ij->i", g, g) for k, g in enumerate(grads))
                denom = denom + alpha_b
                dl = np.where(denom > 0, (-C - alpha_b * lam_b[rows]) / np.maximum(denom, 1e-30), 0.0)
                lam_b[rows] += dl
                for k, g in enumerate(grads):
                    x[quad[:, k]] += (w[quad[:, k]] * dl)[:, None] * g
        if ground is not None:
            under = ground.signed_distance(x) < 0
            x[under] = ground.project(x[under])
        x[c.pinned] = c.anchors
        v = (x - x_prev) / h
        v[c.pinned] = 0.0
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            index = frame * cfg.substeps + s
            raise NumericalError(f"non-finite cloth state at substep {index}", stage="cloth", index=index)
    out = c.copy()
    out.positions, out.velocities = x, v
    return out


# ============================================================================
# Trajectories
# ============================================================================

@dataclass
class FrameDiagnostics:
    total_mass: float
    momentum: np.ndarray
    kinetic_energy: float
    min_height: float


@dataclass
class PointTrajectories:
    """Per-frame particle positions; frame 0 is the initial state."""

    positions: np.ndarray
    colors: np.ndarray
    object_ids: np.ndarray
    diagnostics: List[FrameDiagnostics] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_points(self) -> int:
        return self.positions.shape[1]

    def frame(self, i: int) -> PointCloud:
        return PointCloud(self.positions[i], self.colors, self.object_ids)

    def kinetic_energy(self) -> np.ndarray:
        return np.array([d.kinetic_energy for d in self.diagnostics])


Driver = Union[ForceField, KinematicSphere, WindImpulse, SteamModifier]


def _diagnostics(parts: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]],
                 ground: Optional[Plane]) -> FrameDiagnostics:
    mass = sum(float(m.sum()) for _, _, m in parts)
    momentum = sum((m[:, None] * v).sum(axis=0) for _, v, m in parts) if parts else np.zeros(3)
    energy = sum(0.5 * float((m * np.einsum("ij,ij->i", v, v)).sum()) for _, v, m in parts)
    xs = [x for x, _, _ in parts if len(x)]
    if ground is not None and xs:
        min_height = float(min(ground.signed_distance(x).min() for x in xs))
    else:
        min_height = float("nan")
    return FrameDiagnostics(mass, np.asarray(momentum, dtype=np.float64), energy, min_height)


def simulate(particles: Optional[ParticleSet], cloths: Sequence[ClothState], cfg: SimConfig,
             drivers: Sequence[Driver] = (), n_frames: int = 0) -> PointTrajectories:
    """
    Run the coupled scene for ``n_frames`` frame advances.

    Args:
        particles: MPM particles (None for cloth-only scenes)
        cloths: XPBD cloths
        cfg: Solver settings
        drivers: Force fields, kinematic colliders and per-frame drivers
        n_frames: Number of frames L

    Returns:
        PointTrajectories: L + 1 frames of MPM particles followed by cloth vertices
    """
    if n_frames < 0:
        raise DomainError("n_frames must be >= 0")
    fields = [d for d in drivers if isinstance(d, ForceField)]
    colliders = [d for d in drivers if isinstance(d, KinematicSphere)]
    per_frame = [d for d in drivers if hasattr(d, "apply")]
    particles = particles if particles is not None and len(particles) else None
    cloths = list(cloths)

    def snapshot() -> Tuple[np.ndarray, FrameDiagnostics]:
        parts = []
        if particles is not None:
            parts.append((particles.positions, particles.velocities, particles.masses))
        for cl in cloths:
            parts.append((cl.positions, cl.velocities, cl.masses))
        pos = np.concatenate([x for x, _, _ in parts]) if parts else np.zeros((0, 3))
        return pos, _diagnostics(parts, cfg.ground)

    colors = [particles.colors] if particles is not None else []
    ids = [particles.object_ids] if particles is not None else []
    colors += [cl.colors for cl in cloths]
    ids += [cl.object_ids for cl in cloths]

    frames, diags = [], []
    pos, diag = snapshot()
    frames.append(pos)
    diags.append(diag)
    for f in range(n_frames):
        t0 = f * cfg.dt
        for driver in per_frame:
            if particles is not None:
                particles = driver.apply(particles, f, t0)
            cloths = [driver.apply(cl, f, t0) for cl in cloths]
        if particles is not None:
            particles = mpm_step(particles, cfg, fields, t0, colliders, frame=f)
        cloths = [pbd_cloth_step(cl, cfg, fields, t0, frame=f) for cl in cloths]
        pos, diag = snapshot()
        frames.append(pos)
        diags.append(diag)
        logger.debug("frame %d: mass=%.6g KE=%.6g min_h=%.4g", f + 1, diag.total_mass,
                     diag.kinetic_energy, diag.min_height)

    return PointTrajectories(
        positions=np.stack(frames),
        colors=np.concatenate(colors) if colors else np.zeros((0, 3)),
        object_ids=np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64),
        diagnostics=diags,
    )
