# test_physics_sim.py - MLS-MPM, XPBD cloth and analytic drivers

import unittest

import numpy as np
import pytest
from pydantic import ValidationError

from cg_flow.errors import DomainError, NumericalError
from cg_flow.geometry import PointCloud
from cg_flow.physics_sim import (
    ClothState,
    KinematicSphere,
    MaterialParams,
    ParticleSet,
    SimConfig,
    SteamParams,
    VortexField,
    WindField,
    lame_from_material,
    mpm_step,
    pbd_cloth_step,
    simulate,
    steam_modifiers,
    strike_z,
    wind_impulse,
)

ELASTIC = MaterialParams(8e4, 0.32, 40.0, "elastic")


def _block(center=(0.0, 0.0, 0.5), n=3, spacing=0.02, material=ELASTIC, velocity=(0, 0, 0),
           object_id=1):
    g = (np.arange(n) - (n - 1) / 2.0) * spacing
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3) + np.asarray(center)
    cloud = PointCloud(pts, np.full(pts.shape, 0.5), np.full(len(pts), object_id))
    return ParticleSet.from_cloud(cloud, material, spacing, velocity)


class TestParameters(unittest.TestCase):
    """Materials and solver configuration"""

    def test_lame_parameters(self):
        lam, mu = lame_from_material(MaterialParams(1000.0, 0.25, 1.0))
        self.assertAlmostEqual(mu, 400.0)
        self.assertAlmostEqual(lam, 400.0)

    def test_incompressible_material_rejected(self):
        with self.assertRaises(DomainError):
            MaterialParams(1000.0, 0.5, 1.0)

    def test_unknown_kind_rejected(self):
        with self.assertRaises(DomainError):
            MaterialParams(1000.0, 0.3, 1.0, "jelly")

    def test_snow_from_config(self):
        snow = MaterialParams.from_config("mpm")
        self.assertEqual(snow.kind, "snow")

    def test_sim_config_validation(self):
        with self.assertRaises(ValidationError):
            SimConfig(dt=0.0)
        with self.assertRaises(ValidationError):
            SimConfig(substeps=0)
        with self.assertRaises(ValidationError):
            SimConfig(unknown=1)
        self.assertAlmostEqual(SimConfig(dt=0.01, substeps=4).substep_dt, 0.0025)
        self.assertIsNone(SimConfig(ground_height=None).ground)

    def test_particle_set_from_cloud(self):
        p = _block(n=2, spacing=0.1)
        self.assertEqual(len(p), 8)
        np.testing.assert_allclose(p.masses, 40.0 * 1e-3)
        np.testing.assert_allclose(p.volumes, 1e-3)

    def test_merge_offsets_material_ids(self):
        a = _block(n=2)
        b = _block(center=(0.2, 0.0, 0.5), n=2, material=MaterialParams.from_config("mpm"))
        merged = ParticleSet.merge([a, b])
        self.assertEqual(len(merged.materials), 2)
        np.testing.assert_array_equal(merged.material_id, [0] * 8 + [1] * 8)


class TestMpm(unittest.TestCase):
    """Conservation and boundary behaviour of the MPM solver"""

    def test_free_fall_momentum(self):
        """Without contacts the centre of mass accelerates at g"""
        cfg = SimConfig(ground_height=None, walls=False)
        p = _block()
        n_frames = 5
        traj = simulate(p, [], cfg, n_frames=n_frames)
        total = traj.diagnostics[-1].total_mass
        vz = traj.diagnostics[-1].momentum[2] / total
        self.assertAlmostEqual(vz, -9.81 * n_frames * cfg.dt, places=9)
        self.assertEqual(traj.positions.shape, (n_frames + 1, 27, 3))

    def test_mass_conserved(self):
        traj = simulate(_block(), [], SimConfig(), n_frames=3)
        masses = [d.total_mass for d in traj.diagnostics]
        self.assertTrue(np.allclose(masses, masses[0], rtol=0, atol=1e-15))

    def test_ground_is_not_penetrated(self):
        p = _block(center=(0.0, 0.0, 0.05), velocity=(0.0, 0.0, -1.0))
        traj = simulate(p, [], SimConfig(), n_frames=10)
        self.assertGreaterEqual(min(d.min_height for d in traj.diagnostics), -1e-9)

    def test_cfl_violation(self):
        p = _block(velocity=(0.0, 0.0, 100.0))
        with self.assertRaises(NumericalError) as ctx:
            mpm_step(p, SimConfig())
        self.assertIn("CFL", str(ctx.exception))
        self.assertEqual(ctx.exception.index, 0)

    def test_particle_outside_grid(self):
        with self.assertRaises(NumericalError):
            mpm_step(_block(center=(5.0, 0.0, 0.5)), SimConfig())

    def test_vortex_field_adds_angular_momentum(self):
        cfg = SimConfig(ground_height=None, walls=False, gravity=(0.0, 0.0, 0.0))
        p = _block(center=(0.1, 0.0, 0.5))
        traj = simulate(p, [], cfg, [VortexField(c=5.0, omega=20.0)], n_frames=3)
        self.assertGreater(traj.diagnostics[-1].momentum[1], 0.0)

    def test_empty_particle_set(self):
        traj = simulate(None, [], SimConfig(), n_frames=2)
        self.assertEqual(traj.positions.shape, (3, 0, 3))


class TestCloth(unittest.TestCase):
    """XPBD cloth hanging from its top row"""

    def test_pins_hold_and_sheet_stays_finite(self):
        cloth = ClothState.grid(4, 4, 0.05, origin=(0.0, 0.0, 0.6))
        traj = simulate(None, [cloth], SimConfig(), n_frames=5)
        pinned = cloth.pinned
        np.testing.assert_array_equal(traj.positions[-1][pinned], cloth.anchors)
        self.assertTrue(np.all(np.isfinite(traj.positions)))
        rest = cloth.rest_lengths
        x = traj.positions[-1]
        stretch = np.linalg.norm(x[cloth.edges[:, 0]] - x[cloth.edges[:, 1]], axis=1) / rest
        self.assertLess(float(np.max(np.abs(stretch - 1.0))), 0.05)

    def test_small_grid_rejected(self):
        with self.assertRaises(DomainError):
            ClothState.grid(1, 3, 0.1)

    def _single_edge(self, stretch: float, compliance: float) -> ClothState:
        positions = np.array([[0.0, 0.0, 0.5], [0.1 * stretch, 0.0, 0.5]])
        return ClothState(positions=positions, velocities=np.zeros((2, 3)),
                          edges=np.array([[0, 1]]), rest_lengths=np.array([0.1]),
                          bends=np.zeros((0, 4), dtype=np.int64), rest_angles=np.zeros(0),
                          pinned=np.zeros(0, dtype=np.int64), anchors=np.zeros((0, 3)),
                          inv_masses=np.full(2, 100.0), stretch_compliance=compliance)

    def test_single_edge_returns_to_rest_length(self):
        """One distance constraint without external forces settles at its rest length"""
        cfg = SimConfig(gravity=(0.0, 0.0, 0.0), ground_height=None)
        for stretch in (1.5, 0.6):
            for compliance in (0.0, 1e-7):
                cloth = self._single_edge(stretch, compliance)
                midpoint = cloth.positions.mean(axis=0)
                for frame in range(3):
                    cloth = pbd_cloth_step(cloth, cfg, frame=frame)
                length = np.linalg.norm(cloth.positions[1] - cloth.positions[0])
                self.assertAlmostEqual(length, 0.1, delta=1e-7, msg=f"stretch={stretch}")
                np.testing.assert_allclose(cloth.positions.mean(axis=0), midpoint, atol=1e-9)


class TestDrivers(unittest.TestCase):

    def test_strike_endpoints(self):
        self.assertAlmostEqual(strike_z(0.0, 0.5, 0.1, 0.05, 2.0), 0.6)
        self.assertAlmostEqual(strike_z(0.25, 0.5, 0.1, 0.05, 2.0), 0.45)

    def test_sphere_velocity_is_strike_derivative(self):
        s = KinematicSphere(0.0, 0.0, 0.05, 0.5, 0.1, 0.05, 2.0)
        t, h = 0.1, 1e-6
        fd = (s.center(t + h)[2] - s.center(t - h)[2]) / (2 * h)
        self.assertAlmostEqual(s.velocity(t)[2], fd, places=5)

    def test_wind_impulse_period_and_pins(self):
        cloth = ClothState.grid(3, 3, 0.1)
        unchanged = wind_impulse(cloth, 3, amplitude=1.0, period_frames=8)
        np.testing.assert_array_equal(unchanged.velocities, 0.0)
        pushed = wind_impulse(cloth, 16, amplitude=1.0, period_frames=8, sway_period_frames=64)
        free = np.setdiff1d(np.arange(9), cloth.pinned)
        np.testing.assert_allclose(pushed.velocities[free, 1], 1.0)
        np.testing.assert_array_equal(pushed.velocities[cloth.pinned], 0.0)

    def test_wind_impulse_over_many_periods(self):
        """Kicks land only on multiples of the period; pins stay at rest throughout"""
        cloth = ClothState.grid(3, 3, 0.1, origin=(0.0, 0.0, 1.0))
        cfg = SimConfig(ground_height=None)
        kicked = []
        for frame in range(41):
            before = cloth.velocities.copy()
            cloth = wind_impulse(cloth, frame, amplitude=1.0, period_frames=8, sway_period_frames=100)
            if not np.array_equal(cloth.velocities, before):
                kicked.append(frame)
            np.testing.assert_array_equal(cloth.velocities[cloth.pinned], 0.0)
            cloth = pbd_cloth_step(cloth, cfg, frame=frame)
            np.testing.assert_array_equal(cloth.velocities[cloth.pinned], 0.0)
            np.testing.assert_array_equal(cloth.positions[cloth.pinned], cloth.anchors)
        # frame 0 has sin(0) = 0
        self.assertEqual(kicked, [8, 16, 24, 32, 40])

    def test_wind_field_is_uniform(self):
        a = WindField(2.0, 1.0, (1.0, 0.0, 0.0)).acceleration(np.zeros((4, 3)), 0.25)
        np.testing.assert_allclose(a, np.tile([2.0, 0.0, 0.0], (4, 1)))

    def test_steam_recycles_and_damps(self):
        params = SteamParams(jitter_coefficient=0.0, damping_height=0.5, damping_factor=0.5,
                             recycle_height=0.8)
        p = _block(center=(0.0, 0.0, 0.6), n=2, spacing=0.02, velocity=(0.0, 0.0, 1.0))
        p.positions[0, 2] = 0.9
        out = steam_modifiers(p, 0.0, params, np.random.default_rng(0))
        self.assertLessEqual(out.positions[0, 2], params.source_center[2] + params.source_height)
        np.testing.assert_array_equal(out.velocities[0], 0.0)
        np.testing.assert_allclose(out.velocities[1:, 2], 0.5)


@pytest.mark.parametrize("nu", [0.0, 0.2, 0.45])
def test_shear_modulus(nu):
    _, mu = lame_from_material(MaterialParams(1.0, nu, 1.0))
    assert mu == pytest.approx(1.0 / (2.0 * (1.0 + nu)))
