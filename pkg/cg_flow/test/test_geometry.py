# test_geometry.py - cameras, splatting, RANSAC and volumetric sampling

import unittest

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cg_flow.errors import DegenerateGeometryError, DomainError, ShapeError
from cg_flow.geometry import (
    CameraIntrinsics,
    CameraPose,
    OrbitSpec,
    Plane,
    PointCloud,
    ground_contact,
    look_at,
    orbit_trajectory,
    project,
    ransac_plane,
    remove_density_outliers,
    render_points,
    stack_masks,
    unproject,
    volumetric_sample,
)


def _cloud(positions, object_id=1, color=(0.5, 0.5, 0.5)):
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = positions.shape[0]
    return PointCloud(positions, np.tile(color, (n, 1)), np.full(n, object_id))


def _cube_surface(size=0.2, n=21, bottom=True):
    """Points on the faces of an axis-aligned cube with a corner at the origin."""
    g = np.linspace(0.0, size, n)
    a, b = np.meshgrid(g, g, indexing="ij")
    a, b = a.ravel(), b.ravel()
    zero, full = np.zeros_like(a), np.full_like(a, size)
    faces = [np.column_stack([zero, a, b]), np.column_stack([full, a, b]),
             np.column_stack([a, zero, b]), np.column_stack([a, full, b]),
             np.column_stack([a, b, full])]
    if bottom:
        faces.append(np.column_stack([a, b, zero]))
    return np.unique(np.concatenate(faces), axis=0)


class TestCameras(unittest.TestCase):
    """Look-at poses, projection and orbits"""

    def test_look_at_axis_points_at_target(self):
        pose = look_at([1.0, -2.0, 0.5], [0.0, 0.0, 0.2])
        uv, depth = project(np.array([[0.0, 0.0, 0.2]]), CameraIntrinsics.centered(32, 32, 40), pose)
        np.testing.assert_allclose(uv[0], [15.5, 15.5], atol=1e-9)
        self.assertAlmostEqual(depth[0], np.linalg.norm([1.0, -2.0, 0.3]))

    def test_look_at_up_is_image_up(self):
        pose = look_at([0.0, -2.0, 0.0], [0.0, 0.0, 0.0])
        uv, _ = project(np.array([[0.0, 0.0, 0.5]]), CameraIntrinsics.centered(32, 32, 40), pose)
        self.assertLess(uv[0, 1], 15.5)

    def test_vertical_look_at_is_degenerate(self):
        with self.assertRaises(DegenerateGeometryError):
            look_at([0.0, 0.0, 2.0], [0.0, 0.0, 0.0])

    def test_pose_round_trip(self):
        pose = look_at([0.3, 0.7, 1.1], [0.0, 0.1, 0.0])
        pts = np.random.default_rng(0).standard_normal((10, 3))
        np.testing.assert_allclose(pose.to_world(pose.to_camera(pts)), pts, atol=1e-12)

    def test_non_orthonormal_rotation_rejected(self):
        with self.assertRaises(DomainError):
            CameraPose(2.0 * np.eye(3), np.zeros(3))

    def test_orbit_is_equiangular(self):
        spec = OrbitSpec((0.0, 0.0, 0.5), 1.5, np.radians(30), 12)
        poses = orbit_trajectory(spec)
        self.assertEqual(len(poses), 12)
        center = np.array(spec.center)
        for a, b in zip(poses, poses[1:]):
            self.assertAlmostEqual(np.linalg.norm(a.position - center), 1.5)
            cos = np.clip(np.trace(a.rotation.T @ b.rotation) / 2.0 - 0.5, -1, 1)
            rel = np.degrees(np.arccos(cos))
            self.assertAlmostEqual(rel, 30.0, places=6)
        for p in poses:
            np.testing.assert_allclose(p.forward, (center - p.position) / 1.5, atol=1e-12)

    def test_orbit_needs_two_frames(self):
        with self.assertRaises(DomainError):
            OrbitSpec((0.0, 0.0, 0.0), 1.0, 0.0, 1)


class TestSplatting(unittest.TestCase):
    """Z-buffered disc rendering and unprojection"""

    def setUp(self):
        self.intr = CameraIntrinsics.centered(8, 6, 10.0)
        self.pose = CameraPose.identity()

    def test_render_unproject_round_trip(self):
        """Points placed on pixel centres come back from their depth map"""
        vs, us = np.mgrid[0:6, 0:8]
        d = 2.0 + 0.1 * us.ravel()
        cam = np.column_stack([(us.ravel() - self.intr.cx) / self.intr.fx * d,
                               (vs.ravel() - self.intr.cy) / self.intr.fy * d, d])
        cloud = _cloud(cam)
        frame, mask, depth = render_points(cloud, self.intr, self.pose, point_radius_px=0.5)
        self.assertTrue(np.all(mask == 1.0))
        back = unproject(depth, self.intr, self.pose, frame, mask)
        np.testing.assert_allclose(back.positions, cam, atol=1e-9)

    def test_nearest_point_wins(self):
        near = _cloud([[0.0, 0.0, 1.0]], color=(1.0, 0.0, 0.0))
        far = _cloud([[0.0, 0.0, 3.0]], color=(0.0, 0.0, 1.0))
        cloud = PointCloud.concat([far, near])
        res = render_points(cloud, CameraIntrinsics.centered(9, 9, 10.0), self.pose, 1.0)
        np.testing.assert_array_equal(res.frame[4, 4], [1.0, 0.0, 0.0])
        self.assertEqual(res.depth[4, 4], 1.0)

    def test_points_behind_camera_are_dropped(self):
        res = render_points(_cloud([[0.0, 0.0, -1.0]]), self.intr, self.pose, 1.0)
        self.assertFalse(res.mask.any())

    def test_background_passthrough(self):
        bg = np.full((6, 8, 3), 0.25)
        res = render_points(PointCloud.empty(), self.intr, self.pose, 1.0, bg)
        np.testing.assert_array_equal(res.frame, bg)

    def test_radius_floor(self):
        with self.assertRaises(DomainError):
            render_points(_cloud([[0, 0, 1]]), self.intr, self.pose, point_radius_px=0.4)

    def test_unproject_requires_positive_depth(self):
        with self.assertRaises(DomainError):
            unproject(np.zeros((6, 8)), self.intr, self.pose, np.zeros((6, 8, 3)), np.ones((6, 8)))

    def test_stack_masks_shape_check(self):
        with self.assertRaises(ShapeError):
            stack_masks([np.zeros((2, 2)), np.zeros((3, 2))])
        self.assertEqual(stack_masks([np.zeros((2, 2))] * 3).shape, (3, 2, 2))


class TestRansac(unittest.TestCase):

    def test_tilted_plane_with_outliers(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(-1, 1, (400, 2))
        z = 0.1 + 0.05 * xy[:, 0] + 1e-3 * rng.standard_normal(400)
        pts = np.vstack([np.column_stack([xy, z]), rng.uniform(-1, 1, (100, 3))])
        plane, inliers = ransac_plane(pts, n_iters=300, inlier_thresh=5e-3, seed=0)
        expected = np.array([-0.05, 0.0, 1.0]) / np.linalg.norm([-0.05, 0.0, 1.0])
        angle = np.degrees(np.arccos(np.clip(plane.normal @ expected, -1, 1)))
        self.assertLess(angle, 1.0)
        self.assertGreaterEqual(plane.normal[2], 0.0)
        self.assertGreater(inliers.size, 350)

    def test_rigid_transform_moves_plane_and_keeps_inliers(self):
        """Same seed on rotated and shifted points: same inliers, transformed plane"""
        rng = np.random.default_rng(5)
        xy = rng.uniform(-1, 1, (300, 2))
        z = 0.2 + 0.1 * xy[:, 1] + 1e-3 * rng.standard_normal(300)
        # 25% outliers
        pts = np.vstack([np.column_stack([xy, z]), rng.uniform(-1, 1, (100, 3))])
        rot = Rotation.from_euler("xyz", [20.0, -35.0, 50.0], degrees=True)
        shift = np.array([0.4, -1.2, 2.5])
        moved = rot.apply(pts) + shift

        plane, inliers = ransac_plane(pts, n_iters=200, inlier_thresh=5e-3, seed=4)
        moved_plane, moved_inliers = ransac_plane(moved, n_iters=200, inlier_thresh=5e-3, seed=4)

        np.testing.assert_array_equal(moved_inliers, inliers)
        expected = rot.apply(plane.normal)
        angle = np.degrees(np.arccos(np.clip(abs(moved_plane.normal @ expected), -1, 1)))
        self.assertLess(angle, 1.0)
        np.testing.assert_allclose(np.abs(moved_plane.signed_distance(moved[inliers])),
                                   np.abs(plane.signed_distance(pts[inliers])), atol=1e-9)

    def test_too_few_points(self):
        with self.assertRaises(DegenerateGeometryError):
            ransac_plane(np.zeros((2, 3)))

    def test_collinear_points(self):
        line = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
        with self.assertRaises(DegenerateGeometryError):
            ransac_plane(line, n_iters=20)


class TestVolumetric(unittest.TestCase):
    """Lattice filling of closed and open-bottom surfaces"""

    def test_closed_cube_fills_lattice(self):
        vol = volumetric_sample(_cloud(_cube_surface()), voxel_size=0.04, particle_spacing=0.02)
        self.assertEqual(len(vol), 1000)

    def test_open_bottom_cube_is_not_hollow(self):
        vol = volumetric_sample(_cloud(_cube_surface(bottom=False)), voxel_size=0.04,
                                particle_spacing=0.02)
        self.assertEqual(len(vol), 1000)
        self.assertTrue(np.all(vol.object_ids == 1))

    def test_single_point(self):
        vol = volumetric_sample(_cloud([[0.1, 0.2, 0.3]]))
        self.assertEqual(len(vol), 1)

    def test_spacing_larger_than_extent(self):
        with self.assertRaises(DomainError):
            volumetric_sample(_cloud([[0, 0, 0], [0.01, 0, 0]]), voxel_size=0.04, particle_spacing=0.05)


class TestCleanup(unittest.TestCase):

    def test_isolated_point_removed(self):
        rng = np.random.default_rng(0)
        cluster = rng.uniform(0, 0.1, (200, 3))
        cloud = _cloud(np.vstack([cluster, [[5.0, 5.0, 5.0]]]))
        kept = remove_density_outliers(cloud, k=8)
        self.assertEqual(len(kept), 200)

    def test_ground_contact_snaps_and_prunes(self):
        hovering = _cloud(np.array([[0, 0, 0.01], [0, 0, 0.2]]), object_id=1)
        sunk = _cloud(np.array([[1, 0, -0.5], [1, 0, 0.3]]), object_id=2)
        ground = _cloud(np.array([[2, 0, 0.0]]), object_id=0)
        out = ground_contact(PointCloud.concat([hovering, sunk, ground]), Plane.ground(0.0),
                             contact_tol=0.02)
        parts = out.split_by_object()
        np.testing.assert_allclose(parts[1].positions[:, 2], [0.0, 0.19], atol=1e-12)
        np.testing.assert_allclose(parts[2].positions[:, 2], [0.3])
        self.assertEqual(len(parts[0]), 1)


@pytest.mark.parametrize("offset", [0.0, 0.35])
def test_plane_projection_lands_on_plane(offset):
    plane = Plane([0.0, 0.2, 1.0], offset)
    pts = np.random.default_rng(2).standard_normal((20, 3))
    np.testing.assert_allclose(plane.signed_distance(plane.project(pts)), 0.0, atol=1e-12)
