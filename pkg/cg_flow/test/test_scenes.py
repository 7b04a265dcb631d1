# test_scenes.py - analytic primitives, ray casting and oracle datasets

import unittest

import numpy as np

from cg_flow.errors import ConfigError, DomainError
from cg_flow.geometry import CameraIntrinsics, OrbitSpec, look_at
from cg_flow.physics_sim import PointTrajectories
from cg_flow.scenes import (
    LATENT_CHANNELS,
    SKY_COLOR,
    SceneObject,
    background_image,
    bounding_sphere,
    default_orbit,
    falling_block_objects,
    raycast,
    render_trajectory,
    segment_points,
    stage1_dataset,
    stage2_dataset,
)


class TestPrimitives(unittest.TestCase):
    """Signed distances and ray intersections"""

    def setUp(self):
        self.box = SceneObject(1, "box", center=(0.0, 0.0, 0.5), size=(0.2, 0.2, 0.2))
        self.ball = SceneObject(2, "sphere", center=(1.0, 0.0, 0.5), radius=0.1)

    def test_sdf_sign(self):
        np.testing.assert_allclose(self.box.sdf([[0, 0, 0.5], [0, 0, 0.7]]), [-0.1, 0.1], atol=1e-12)
        np.testing.assert_allclose(self.ball.sdf([[1.0, 0.0, 0.7]]), [0.1], atol=1e-12)

    def test_ray_hits_near_face(self):
        t = self.box.intersect(np.array([0.0, -1.0, 0.5]), np.array([[0.0, 1.0, 0.0]]))
        self.assertAlmostEqual(t[0], 0.9)
        t = self.ball.intersect(np.array([1.0, -1.0, 0.5]), np.array([[0.0, 1.0, 0.0]]))
        self.assertAlmostEqual(t[0], 0.9)

    def test_ray_miss_is_inf(self):
        t = self.box.intersect(np.array([0.0, -1.0, 2.0]), np.array([[0.0, 1.0, 0.0]]))
        self.assertTrue(np.isinf(t[0]))

    def test_composite_bounds(self):
        obj = SceneObject(3, "composite", boxes=(((0, 0, 0.1), (0.2, 0.2, 0.2)),
                                                 ((0, 0, 0.3), (0.1, 0.1, 0.2))))
        lo, hi = obj.bounds()
        np.testing.assert_allclose(lo, [-0.1, -0.1, 0.0])
        np.testing.assert_allclose(hi, [0.1, 0.1, 0.4])

    def test_invalid_objects(self):
        with self.assertRaises(ConfigError):
            SceneObject(0, "box", size=(1, 1, 1))
        with self.assertRaises(ConfigError):
            SceneObject(1, "cone")
        with self.assertRaises(ConfigError):
            SceneObject(1, "sphere")

    def test_default_orbit_encloses_objects(self):
        orbit = default_orbit(falling_block_objects(), n_frames=6, elevation_deg=30, radius_factor=2.0)
        center, radius = bounding_sphere(falling_block_objects())
        self.assertAlmostEqual(orbit.radius, 2.0 * radius)
        np.testing.assert_allclose(orbit.center, center)


class TestRaycast(unittest.TestCase):
    """Ground-truth renders of the golden scene"""

    def setUp(self):
        self.objects = falling_block_objects()
        self.intr = CameraIntrinsics.centered(16, 16, 20.0)
        self.pose = look_at([0.0, -0.9, 0.45], [0.0, 0.0, 0.3])

    def test_ids_cover_sky_ground_and_block(self):
        render = raycast(self.objects, self.intr, self.pose)
        self.assertEqual(set(np.unique(render.ids)), {-1, 0, 1})
        np.testing.assert_array_equal(render.alpha, (render.ids == 1).astype(float))

    def test_latent_frame_channels(self):
        frame = raycast(self.objects, self.intr, self.pose).latent_frame()
        self.assertEqual(frame.shape, (16, 16, LATENT_CHANNELS))
        off = frame[..., 4] == 0
        np.testing.assert_array_equal(frame[..., 3][off], 0.0)

    def test_background_has_no_objects(self):
        bg = background_image(self.intr, self.pose)
        render = raycast(self.objects, self.intr, self.pose)
        sky = render.ids == -1
        np.testing.assert_array_equal(bg[sky], np.tile(SKY_COLOR, (int(sky.sum()), 1)))
        ground = render.ids == 0
        np.testing.assert_array_equal(bg[ground], render.rgb[ground])

    def test_segment_points(self):
        pts = np.array([[0.0, 0.0, 0.6], [0.8, 0.8, 0.0], [0.0, 0.0, 0.41]])
        np.testing.assert_array_equal(segment_points(pts, self.objects), [1, 0, 1])


class TestDatasets(unittest.TestCase):
    """Oracle datasets for both stages"""

    def setUp(self):
        self.objects = falling_block_objects()
        self.intr = CameraIntrinsics.centered(8, 8, 10.0)
        self.pose = look_at([0.0, -0.9, 0.45], [0.0, 0.0, 0.3])

    def test_stage1_dataset_keys(self):
        orbit = OrbitSpec((0.0, 0.0, 0.5), 0.6, np.radians(30), 3)
        oracle, cond = stage1_dataset(self.objects, self.intr, orbit, self.pose, n_jitter=1)
        self.assertEqual(oracle.keys, ["scene", "scene", "distractor", "distractor"])
        self.assertEqual(oracle.sample_shape, (3, 8, 8, LATENT_CHANNELS))
        self.assertEqual(cond.shape, (3, 8, 8, LATENT_CHANNELS))
        self.assertEqual(oracle.resolve_key(cond), "scene")

    def test_stage2_dataset_and_trajectory_render(self):
        pts = np.array([[0.0, 0.0, 0.4], [0.0, 0.0, 0.3], [0.0, 0.0, 0.2]])
        traj = PointTrajectories(positions=np.stack([pts, pts - 0.01, pts - 0.02]),
                                 colors=np.full((3, 3), 0.9), object_ids=np.ones(3, dtype=int))
        bg = background_image(self.intr, self.pose)
        frames, masks = render_trajectory(traj, self.intr, self.pose, bg, 1.0)
        self.assertEqual(frames.shape, (2, 8, 8, 3))
        self.assertTrue(masks.any())
        oracle = stage2_dataset(traj, self.intr, self.pose, bg, bg, n_jitter=2)
        self.assertEqual(len(oracle.keys), 3)
        self.assertEqual(oracle.sample_shape, (2, 8, 8, 3))

    def test_stage2_needs_frames(self):
        traj = PointTrajectories(positions=np.zeros((1, 1, 3)), colors=np.zeros((1, 3)),
                                 object_ids=np.ones(1, dtype=int))
        with self.assertRaises(DomainError):
            stage2_dataset(traj, self.intr, self.pose, np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
