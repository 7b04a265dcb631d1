# test_flow_core.py - latent containers, schedules, noising and Euler steps

import unittest

import numpy as np
import pytest

from cg_flow.errors import DomainError, NumericalError, ShapeError
from cg_flow.flow_core import (
    LatentVideo,
    TimeSchedule,
    VideoMask,
    denoised_estimate,
    euler_generate_step,
    euler_invert_step,
    forward_noise,
    generate_from_tau,
    invert_to_tau,
    iter_inversion,
    mask_mix,
)
from cg_flow.oracle_flow import VelocityOracle


class TestContainers(unittest.TestCase):
    """LatentVideo / VideoMask validation"""

    def test_latent_requires_four_dims(self):
        with self.assertRaises(ShapeError):
            LatentVideo(np.zeros((2, 3, 4)))

    def test_latent_rejects_non_finite(self):
        data = np.zeros((1, 2, 2, 1))
        data[0, 0, 0, 0] = np.nan
        with self.assertRaises(NumericalError):
            LatentVideo(data)

    def test_from_image_broadcasts_frames(self):
        image = np.arange(12, dtype=float).reshape(2, 2, 3)
        video = LatentVideo.from_image(image, 4)
        self.assertEqual(video.shape, (4, 2, 2, 3))
        for k in range(4):
            np.testing.assert_array_equal(video.data[k], image)

    def test_mask_must_be_binary(self):
        with self.assertRaises(DomainError):
            VideoMask(np.full((1, 2, 2), 0.5))

    def test_mask_broadcasts_over_channels(self):
        m = VideoMask.ones((2, 3, 3))
        self.assertEqual(m.broadcast().shape, (2, 3, 3, 1))


class TestTimeSchedule(unittest.TestCase):
    """Uniform schedules and tau insertion"""

    def test_uniform_grid_endpoints(self):
        s = TimeSchedule.uniform(n_steps=25, t_min=1e-3)
        self.assertEqual(s.steps.size, 26)
        self.assertAlmostEqual(s.steps[0], 1.0)
        self.assertAlmostEqual(s.t_min, 1e-3)
        self.assertEqual(s.tau_index, 25)

    def test_tau_inserted_when_off_grid(self):
        s = TimeSchedule.uniform(n_steps=4, t_min=1e-3, tau=0.77)
        self.assertEqual(s.steps.size, 6)
        self.assertEqual(s.tau, 0.77)
        self.assertTrue(np.all(np.diff(s.steps) < 0))

    def test_tau_on_grid_is_not_duplicated(self):
        base = TimeSchedule.uniform(n_steps=4, t_min=1e-3)
        s = TimeSchedule.uniform(n_steps=4, t_min=1e-3, tau=float(base.steps[2]))
        self.assertEqual(s.steps.size, 5)
        self.assertEqual(s.tau_index, 2)

    def test_tau_below_t_min_rejected(self):
        with self.assertRaises(DomainError):
            TimeSchedule.uniform(n_steps=4, t_min=1e-3, tau=1e-4)

    def test_increasing_steps_rejected(self):
        with self.assertRaises(DomainError):
            TimeSchedule(np.array([0.2, 0.5]), 0)


class TestSteps(unittest.TestCase):
    """Forward noising, Euler steps and masked mixing"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.x = LatentVideo(rng.standard_normal((2, 3, 3, 2)))
        self.eps = LatentVideo(rng.standard_normal((2, 3, 3, 2)))

    def test_forward_noise_endpoints(self):
        np.testing.assert_array_equal(forward_noise(self.x, 0.0, self.eps).data, self.x.data)
        np.testing.assert_array_equal(forward_noise(self.x, 1.0, self.eps).data, self.eps.data)

    def test_straight_path_velocity_recovers_data(self):
        t = 0.3
        z = forward_noise(self.x, t, self.eps)
        v = LatentVideo(self.x.data - self.eps.data)
        np.testing.assert_allclose(denoised_estimate(z, v, t).data, self.x.data, atol=1e-12)

    def test_generate_then_invert_cancels_with_constant_velocity(self):
        v = LatentVideo(np.ones(self.x.shape))
        z = euler_invert_step(euler_generate_step(self.x, v, 0.6, 0.4), v, 0.4, 0.6)
        np.testing.assert_allclose(z.data, self.x.data, atol=1e-12)

    def test_generate_step_direction_checked(self):
        with self.assertRaises(DomainError):
            euler_generate_step(self.x, self.eps, 0.2, 0.4)

    def test_mask_mix_selects_exactly(self):
        rng = np.random.default_rng(1)
        m = VideoMask((rng.uniform(size=(2, 3, 3)) < 0.5).astype(float))
        out = mask_mix(self.x, self.eps, m)
        sel = np.broadcast_to(m.broadcast() > 0, self.x.shape)
        np.testing.assert_array_equal(out.data[sel], self.x.data[sel])
        np.testing.assert_array_equal(out.data[~sel], self.eps.data[~sel])

    def test_mask_mix_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            mask_mix(self.x, self.eps, VideoMask.ones((1, 3, 3)))


class TestInversionGeneration(unittest.TestCase):
    """Chained loops against a dirac oracle"""

    def setUp(self):
        self.mu = LatentVideo(np.full((1, 2, 2, 1), 2.0))
        self.oracle = VelocityOracle.dirac(self.mu)

    def test_generation_lands_on_dirac(self):
        schedule = TimeSchedule.uniform(n_steps=25, tau=0.8)
        z = LatentVideo(np.random.default_rng(0).standard_normal(self.mu.shape))
        out = generate_from_tau(z, None, schedule, self.oracle)
        np.testing.assert_allclose(out.data, self.mu.data, atol=1e-9)

    def test_inversion_yields_tau_last(self):
        schedule = TimeSchedule.uniform(n_steps=10, tau=0.55)
        times = [t for t, _ in iter_inversion(self.mu, None, schedule, self.oracle)]
        self.assertAlmostEqual(times[0], schedule.t_min)
        self.assertAlmostEqual(times[-1], 0.55)
        self.assertTrue(np.all(np.diff(times) > 0))

    def test_inversion_of_dirac_sample_is_line_point(self):
        # the straight line through mu stays on (1 - t) mu
        schedule = TimeSchedule.uniform(n_steps=10, tau=0.5)
        x = LatentVideo((1.0 - schedule.t_min) * self.mu.data)
        z = invert_to_tau(x, None, schedule, self.oracle)
        np.testing.assert_allclose(z.data, 0.5 * self.mu.data, atol=1e-9)


@pytest.mark.parametrize("tau", [0.2, 0.5, 0.9])
def test_forward_noise_is_convex_combination(tau):
    x = LatentVideo.full((1, 1, 1, 1), 3.0)
    eps = LatentVideo.full((1, 1, 1, 1), -1.0)
    assert forward_noise(x, tau, eps).data.item() == pytest.approx((1 - tau) * 3.0 - tau)
