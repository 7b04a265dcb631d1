"""
hyperparams.py - Hyperparameter Analyses of the Consistency-Guided SDE

Sweeps over the step size gamma, the tilt strength beta, the SDE time tau
and the iteration count N, run against closed-form oracles so that each
behaviour can be read off exactly:
- gamma: latent-norm stability of the SDE chain
- beta: condition adherence against departure from q
- tau / N: condition adherence of the full Phi_CF loop
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import SDE_CONFIG
from cg_flow.cg_sde import (
    NormTraceReport,
    SdeConfig,
    SdeTrace,
    beta_for_tau,
    latent_norm_trace,
    run_phi_cf,
    run_sde_chain,
    sde_update,
)
from cg_flow.errors import DomainError
from cg_flow.flow_core import LatentVideo, TimeSchedule, VideoMask, generate_from_tau, forward_noise
from cg_flow.oracle_flow import VelocityOracle

logger = logging.getLogger(__name__)


@dataclass
class GammaSweepRow:
    gamma: float
    report: NormTraceReport
    trace: SdeTrace


@dataclass
class BetaSweepRow:
    beta: float
    adherence: float
    q_departure: float


@dataclass
class AdherenceReport:
    """Fraction of runs whose output's nearest dataset sample carries the key."""

    key: str
    n_seeds: int
    rate: float
    rate_n0: float
    rate_unconditional: float

    def as_dict(self) -> Dict[str, float]:
        return {"key": self.key, "n_seeds": self.n_seeds, "rate": self.rate,
                "rate_n0": self.rate_n0, "rate_unconditional": self.rate_unconditional}


def dirac_stationary_variance(tau: float, gamma: float) -> float:
    """Per-dimension stationary variance of the simplified chain under a dirac oracle."""
    a = 1.0 - gamma / tau - (1.0 - tau) * gamma / (tau * tau)
    if abs(a) >= 1.0:
        raise DomainError(f"chain has no stationary law at tau={tau}, gamma={gamma}")
    return 2.0 * gamma / (1.0 - a * a)


def toy_condition_oracle(shape: Tuple[int, int, int, int] = (1, 2, 2, 2),
                         separation: float = 3.0, per_key: int = 2,
                         seed: int = 0) -> Tuple[VelocityOracle, Dict[str, LatentVideo]]:
    """Two-condition dataset: key ``A`` around +separation, key ``B`` around -separation.

    Returns:
        The oracle and the condition latent registered for each key.
    """
    rng = np.random.default_rng(seed)
    samples, keys, conditions = [], [], {}
    for key, sign in (("A", 1.0), ("B", -1.0)):
        image = np.full(shape[1:], sign)
        conditions[key] = image
        for _ in range(per_key):
            samples.append(LatentVideo(sign * separation + 0.3 * rng.standard_normal(shape)))
            keys.append(key)
    oracle = VelocityOracle.empirical(samples, keys, conditions=conditions)
    cond_latents = {k: LatentVideo.from_image(v, shape[0]) for k, v in conditions.items()}
    return oracle, cond_latents


def gamma_sweep(gammas: Sequence[float], tau: float, oracle: VelocityOracle, z0: LatentVideo,
                n_iters: int = 50, seed: int = 0, cond=None) -> List[GammaSweepRow]:
    """Norm stability of the SDE chain for each step size."""
    rows = []
    for gamma in gammas:
        trace = run_sde_chain(z0, oracle, tau, gamma, n_iters, seed, cond=cond)
        report = latent_norm_trace(trace)
        logger.info("gamma=%.4g deviation=%.4g diverged=%s", gamma, report.max_rel_deviation,
                    report.diverged)
        rows.append(GammaSweepRow(gamma, report, trace))
    return rows


def beta_sweep(betas: Sequence[float], tau: float, gamma: float, oracle: VelocityOracle,
               cond: LatentVideo, key: str, z0: LatentVideo, n_iters: int = 10,
               n_seeds: int = 20) -> List[BetaSweepRow]:
    """Adherence and departure from q of the general-beta chain.

    ``q_departure`` is the mean of |z - (1 - tau) x_bar|^2 / (D tau^2) over
    seeds, with x_bar the condition-agnostic posterior mean at z; a typical
    sample of q scores close to one.
    """
    rows = []
    dim = z0.flat().size
    for beta in betas:
        hits, departures = 0, []
        for seed in range(n_seeds):
            trace_beta = None if beta == beta_for_tau(tau) else beta
            z = _chain_state(z0, oracle, tau, gamma, n_iters, seed, cond, trace_beta)
            x_hat = generate_from_tau(z, cond, TimeSchedule.uniform(tau=tau), oracle)
            hits += oracle.nearest_sample(x_hat)[1] == key
            w = oracle.posterior_weights(z, tau, None)
            centre = (1.0 - tau) * (w @ oracle.samples)
            departures.append(float(np.sum((z.flat() - centre) ** 2)) / (dim * tau * tau))
        rows.append(BetaSweepRow(beta, hits / n_seeds, float(np.mean(departures))))
        logger.info("beta=%.4g adherence=%.3f departure=%.3f", beta, rows[-1].adherence,
                    rows[-1].q_departure)
    return rows


def _chain_state(z0, oracle, tau, gamma, n_iters, seed, cond, beta) -> LatentVideo:
    rng = np.random.default_rng(seed)
    z = forward_noise(z0, tau, LatentVideo(rng.standard_normal(z0.shape)))
    for _ in range(n_iters):
        z = sde_update(z, oracle, cond, tau, gamma, beta, LatentVideo(rng.standard_normal(z.shape)))
    return z


def condition_adherence(oracle: VelocityOracle, input_video: LatentVideo, cond: LatentVideo,
                        key: str, tau: float = 0.8, gamma: float = SDE_CONFIG["gamma"],
                        n_steps: int = SDE_CONFIG["n_steps"], n_seeds: int = 100,
                        schedule_steps: Optional[int] = None) -> AdherenceReport:
    """
    Stage-1 Phi_CF with an empty mask, repeated over seeds.

    Args:
        oracle: Conditioned empirical oracle
        input_video: Latent to complete (typically a sample of another key)
        cond: Condition latent
        key: Dataset key the condition resolves to
        tau, gamma, n_steps: SDE parameters
        n_seeds: Number of seeded runs
        schedule_steps: Schedule intervals (configured default when None)

    Returns:
        AdherenceReport: rates for N = n_steps, N = 0 and unconditional generation
    """
    schedule = TimeSchedule.uniform(n_steps=schedule_steps, tau=tau)
    mask = VideoMask.zeros(input_video.shape[:3])

    def rate(n: int, condition) -> float:
        hits = 0
        for seed in range(n_seeds):
            cfg = SdeConfig(tau=tau, gamma=gamma, n_steps=n, stage="stage1", seed=seed)
            out, _ = run_phi_cf(input_video, condition, None, mask, oracle, schedule, cfg)
            hits += oracle.nearest_sample(out)[1] == key
        return hits / n_seeds

    report = AdherenceReport(key=key, n_seeds=n_seeds, rate=rate(n_steps, cond),
                             rate_n0=rate(0, cond), rate_unconditional=rate(0, None))
    logger.info("condition adherence %s", report.as_dict())
    return report


def iteration_sweep(n_values: Sequence[int], oracle: VelocityOracle, input_video: LatentVideo,
                    cond: LatentVideo, key: str, tau: float = 0.8,
                    gamma: float = SDE_CONFIG["gamma"], n_seeds: int = 20) -> Dict[int, float]:
    """Adherence rate as a function of the iteration count N."""
    return {n: condition_adherence(oracle, input_video, cond, key, tau, gamma, n, n_seeds).rate
            for n in n_values}


def tau_sweep(taus: Sequence[float], oracle: VelocityOracle, input_video: LatentVideo,
              cond: LatentVideo, key: str, gamma: float = SDE_CONFIG["gamma"],
              n_steps: int = SDE_CONFIG["n_steps"], n_seeds: int = 20) -> Dict[float, float]:
    """Adherence rate as a function of the SDE time tau (gamma < tau required)."""
    return {tau: condition_adherence(oracle, input_video, cond, key, tau, gamma, n_steps,
                                     n_seeds).rate
            for tau in taus}


def sweep_table(rows: Sequence, columns: Sequence[str]) -> str:
    """Tab-separated table of dataclass rows."""
    lines = ["\t".join(columns)]
    for row in rows:
        values = []
        for col in columns:
            value = getattr(row, col, None)
            if value is None and hasattr(row, "report"):
                value = getattr(row.report, col)
            values.append(f"{value:.6g}" if isinstance(value, float) else str(value))
        lines.append("\t".join(values))
    return "\n".join(lines) + "\n"
