# test_cg_sde.py - Phi_CF sampler, SDE steps and Langevin tilting

import unittest

import numpy as np
import pytest
from pydantic import ValidationError

from cg_flow.cg_sde import (
    SdeConfig,
    SdeTrace,
    beta_for_tau,
    cf_sde_step,
    consistency_bias,
    euler_maruyama_variance,
    general_sde_step,
    langevin_tilt_sample,
    latent_norm_trace,
    run_phi_cf,
    run_phi_cf_detailed,
    run_sde_chain,
    score_from_v_eps,
    tilted_gaussian_moments,
)
from cg_flow.errors import ConfigError, DomainError, ShapeError
from cg_flow.flow_core import LatentVideo, TimeSchedule, VideoMask
from cg_flow.oracle_flow import VelocityOracle, analytic_score_q


class TestSdeConfig(unittest.TestCase):
    """pydantic validation of the sampler parameters"""

    def test_beta_defaults_to_cancellation_value(self):
        cfg = SdeConfig(tau=0.8, gamma=0.2)
        self.assertAlmostEqual(cfg.beta, 0.25)
        self.assertFalse(cfg.uses_general_step)

    def test_explicit_beta_uses_general_step(self):
        self.assertTrue(SdeConfig(tau=0.8, gamma=0.2, beta=1.28).uses_general_step)

    def test_gamma_must_stay_below_tau(self):
        with self.assertRaises(ValidationError):
            SdeConfig(tau=0.5, gamma=0.5)

    def test_tau_range(self):
        for tau in (0.0, 1.0, 1.5):
            with self.assertRaises(ValidationError):
                SdeConfig(tau=tau, gamma=0.01)

    def test_unknown_field_rejected(self):
        with self.assertRaises(ValidationError):
            SdeConfig(tau=0.8, gamma=0.2, temperature=1.0)

    def test_beta_for_tau_domain(self):
        self.assertAlmostEqual(beta_for_tau(0.8), 0.25)
        with self.assertRaises(DomainError):
            beta_for_tau(1.0)


class TestSteps(unittest.TestCase):
    """Single SDE updates"""

    def setUp(self):
        rng = np.random.default_rng(11)
        shape = (2, 3, 3, 2)
        self.z, self.v_theta, self.v_eps, self.noise = (rng.standard_normal(shape) for _ in range(4))

    def test_general_step_reduces_to_cf_step(self):
        """At beta = (1 - tau)/tau the v_eps term vanishes"""
        for tau in (0.3, 0.8, 0.95):
            beta = beta_for_tau(tau)
            a = general_sde_step(self.z, self.v_theta, self.v_eps, tau, 0.1, beta, self.noise)
            b = cf_sde_step(self.z, self.v_theta, tau, 0.1, self.noise)
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_general_step_coefficients(self):
        """The general step is a consistency-bias drift on top of beta_tau v_eps"""
        tau, gamma, beta = 0.7, 0.15, 2.3
        out = general_sde_step(self.z, self.v_theta, self.v_eps, tau, gamma, beta, self.noise)
        v_c = consistency_bias(self.v_theta, self.v_eps)
        expected = ((1 - gamma / tau) * self.z
                    + gamma * (beta_for_tau(tau) * self.v_eps + beta * v_c)
                    + np.sqrt(2 * gamma) * self.noise)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_latent_container_preserved(self):
        out = cf_sde_step(LatentVideo(self.z), LatentVideo(self.v_theta), 0.8, 0.2,
                          LatentVideo(self.noise))
        self.assertIsInstance(out, LatentVideo)

    def test_non_positive_gamma(self):
        with self.assertRaises(DomainError):
            cf_sde_step(self.z, self.v_theta, 0.8, 0.0, self.noise)

    def test_bias_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            consistency_bias(self.z, self.z[:1])

    def test_score_from_dirac_v_eps_is_exact(self):
        """For a dirac, the v_eps score approximation equals the score of q"""
        mu = np.full((1, 2, 2, 1), 3.0)
        tau = 0.6
        oracle = VelocityOracle.dirac(LatentVideo(mu))
        z = LatentVideo(np.random.default_rng(0).standard_normal(mu.shape))
        approx = score_from_v_eps(z, oracle.v_eps(z, tau), tau)
        np.testing.assert_allclose(approx.data, analytic_score_q(z, tau, mu).data, atol=1e-10)


class TestLangevin(unittest.TestCase):
    """Tilted Langevin sampling with a quadratic consistency term"""

    def setUp(self):
        self.tau, self.beta, self.gamma = 0.8, 1.0, 0.05
        self.mu = np.array([1.0])
        self.z_ref = np.array([2.0])
        self.grad_C = lambda z: -(z - self.z_ref[None, :])

    def test_moments_match_tilted_gaussian(self):
        """Sample mean and variance follow q * exp(beta C)"""
        samples = langevin_tilt_sample(self.mu, self.tau, self.grad_C, self.beta, self.gamma,
                                       burn_in=200, n_samples=20000, seed=0, n_chains=200, thin=5)
        mean, var = tilted_gaussian_moments(self.mu, self.tau, self.beta, self.z_ref)
        var_em = euler_maruyama_variance(1.0 / var, self.gamma)
        self.assertEqual(samples.shape, (20000, 1))
        self.assertAlmostEqual(float(samples.mean()), float(mean[0]), delta=0.05)
        self.assertAlmostEqual(float(samples.var()), var_em, delta=0.05 * var_em)

    def test_zero_temperature_converges_to_mode(self):
        samples = langevin_tilt_sample(self.mu, self.tau, self.grad_C, self.beta, self.gamma,
                                       burn_in=500, n_samples=1, seed=0, temperature=0.0)
        mean, _ = tilted_gaussian_moments(self.mu, self.tau, self.beta, self.z_ref)
        np.testing.assert_allclose(samples[0], mean, atol=1e-8)

    def test_step_bound_enforced(self):
        with self.assertRaises(DomainError):
            langevin_tilt_sample(self.mu, self.tau, self.grad_C, self.beta, 0.7,
                                 burn_in=1, n_samples=1, seed=0)


class TestPhiCF(unittest.TestCase):
    """Full sampler on an empirical oracle"""

    def setUp(self):
        rng = np.random.default_rng(5)
        self.shape = (3, 4, 4, 2)
        samples = [LatentVideo(rng.standard_normal(self.shape)) for _ in range(4)]
        self.oracle = VelocityOracle.empirical(samples, ["A", "A", "B", "B"])
        self.input = LatentVideo(rng.standard_normal(self.shape))
        self.bg = LatentVideo(rng.standard_normal(self.shape))
        self.mask = VideoMask((rng.uniform(size=self.shape[:3]) < 0.5).astype(float))
        self.schedule = TimeSchedule.uniform(n_steps=10, tau=0.8)

    def _run(self, stage, seed=0, n_steps=4):
        cfg = SdeConfig(tau=0.8, gamma=0.2, n_steps=n_steps, stage=stage, seed=seed)
        bg = self.bg if stage == "stage2" else None
        return run_phi_cf_detailed(self.input, "A", bg, self.mask, self.oracle, self.schedule, cfg)

    def test_stage1_keeps_masked_region(self):
        sel = np.broadcast_to(self.mask.broadcast() > 0, self.shape)
        for seed in range(5):
            r = self._run("stage1", seed)
            np.testing.assert_array_equal(r.z_tau_star.data[sel], r.z_tau_inv.data[sel])

    def test_stage2_updates_only_masked_region(self):
        keep = np.broadcast_to(self.mask.broadcast() == 0, self.shape)
        for seed in range(5):
            r = self._run("stage2", seed)
            np.testing.assert_array_equal(r.z_tau_star.data[keep], r.z_tau_noisy.data[keep])

    def test_trace_has_n_plus_one_entries(self):
        r = self._run("stage1", n_steps=6)
        self.assertEqual(len(r.trace), 7)
        self.assertTrue(r.trace.to_table().startswith("iteration\tnorm\tproxy"))

    def test_same_seed_is_deterministic(self):
        a = self._run("stage2", seed=3).output.data
        b = self._run("stage2", seed=3).output.data
        np.testing.assert_array_equal(a, b)

    def test_zero_iterations_keeps_init(self):
        r = self._run("stage1", n_steps=0)
        np.testing.assert_array_equal(r.z_tau_star.data, r.z_tau_init.data)

    def test_stage2_requires_background(self):
        cfg = SdeConfig(tau=0.8, gamma=0.2, stage="stage2")
        with self.assertRaises(ConfigError):
            run_phi_cf(self.input, "A", None, self.mask, self.oracle, self.schedule, cfg)

    def test_schedule_tau_must_match(self):
        cfg = SdeConfig(tau=0.7, gamma=0.2)
        with self.assertRaises(ConfigError):
            run_phi_cf(self.input, "A", None, self.mask, self.oracle, self.schedule, cfg)

    def test_dirac_line_input_round_trips(self):
        """A point on the dirac line inverts, holds, and regenerates to mu"""
        mu = LatentVideo(np.full((1, 2, 2, 1), 4.0))
        oracle = VelocityOracle.dirac(mu)
        schedule = TimeSchedule.uniform(tau=0.8)
        x = LatentVideo((1.0 - schedule.t_min) * mu.data)
        cfg = SdeConfig(tau=0.8, gamma=0.2, n_steps=5)
        out, _ = run_phi_cf(x, None, None, VideoMask.ones((1, 2, 2)), oracle, schedule, cfg)
        np.testing.assert_allclose(out.data, mu.data, atol=1e-9)


class TestNormDiagnostics(unittest.TestCase):
    """SDE chain stability against a dirac with a large centre"""

    def setUp(self):
        self.tau = 0.85
        self.mu = LatentVideo(np.full((1, 4, 4, 3), 10.0))
        self.oracle = VelocityOracle.dirac(self.mu)
        rng = np.random.default_rng(0)
        self.z0 = LatentVideo((1 - self.tau) * self.mu.data + self.tau * rng.standard_normal(self.mu.shape))

    def test_small_gamma_stays_bounded(self):
        trace = run_sde_chain(self.z0, self.oracle, self.tau, 0.2, n_iters=50, seed=0)
        report = latent_norm_trace(trace)
        self.assertEqual(len(trace), 51)
        self.assertFalse(report.diverged)

    def test_large_gamma_diverges(self):
        trace = run_sde_chain(self.z0, self.oracle, self.tau, 2.5 * self.tau, n_iters=50, seed=0)
        report = latent_norm_trace(trace)
        self.assertTrue(report.diverged)
        self.assertGreater(report.final_norm, report.initial_norm)

    def test_non_finite_trace_flags_divergence(self):
        trace = SdeTrace()
        trace.append(0, 1.0)
        trace.append(1, float("inf"))
        self.assertTrue(latent_norm_trace(trace).diverged)

    def test_empty_trace_rejected(self):
        with self.assertRaises(DomainError):
            latent_norm_trace(SdeTrace())


@pytest.mark.parametrize("tau", [0.5, 0.8, 0.95])
def test_cancellation_beta_positive(tau):
    assert beta_for_tau(tau) == pytest.approx((1 - tau) / tau)
