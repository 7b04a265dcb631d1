"""
cg_sde.py - Consistency-Guided Flow SDE

This module implements the consistency-guided sampler Phi_CF and its
building blocks:
1. The simplified SDE step, in which the condition-agnostic velocity cancels
2. The general-beta step that keeps the v_eps term explicit
3. The score approximation of q from v_eps
4. A tilted Langevin sampler targeting q * exp(beta C) for explicit C
5. The full inversion / noising / SDE / generation loop for both stages
6. Latent-norm diagnostics of the SDE chain

Key Features:
- pydantic-validated SdeConfig (0 < gamma < tau < 1, beta > 0)
- Seeded numpy generators; noise drawn in iteration order
- Exact stage mask contracts (stage1 keeps the masked region, stage2
  updates only the masked region)
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from config import SDE_CONFIG
from cg_flow.errors import ConfigError, DomainError, NumericalError, ShapeError
from cg_flow.flow_core import (
    LatentVideo,
    TimeSchedule,
    VideoMask,
    as_array,
    forward_noise,
    generate_from_tau,
    invert_to_tau,
    mask_mix,
    wrap_like,
)
from cg_flow.oracle_flow import Condition, VelocityOracle, analytic_score_q

logger = logging.getLogger(__name__)


def beta_for_tau(tau: float) -> float:
    """The beta at which the v_eps term of the general step vanishes."""
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    return (1.0 - tau) / tau


class SdeConfig(BaseModel):
    """Parameters of one Phi_CF run."""

    model_config = ConfigDict(extra="forbid")

    tau: float = SDE_CONFIG["tau"]
    gamma: float = SDE_CONFIG["gamma"]
    n_steps: int = SDE_CONFIG["n_steps"]
    beta: Optional[float] = None
    stage: Literal["stage1", "stage2"] = "stage1"
    seed: int = SDE_CONFIG["seed"]

    @model_validator(mode="after")
    def _check(self) -> "SdeConfig":
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.gamma >= self.tau:
            raise ValueError(f"gamma ({self.gamma}) must be smaller than tau ({self.tau})")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.beta is None:
            self.beta = beta_for_tau(self.tau)
        elif self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        return self

    @property
    def uses_general_step(self) -> bool:
        return self.beta != beta_for_tau(self.tau)


@dataclass
class SdeTraceRecord:
    iteration: int
    norm: float
    proxy: Optional[float] = None


@dataclass
class SdeTrace:
    """Per-iteration norm record of the SDE chain (N + 1 entries)."""

    records: List[SdeTraceRecord] = field(default_factory=list)

    def append(self, iteration: int, norm: float, proxy: Optional[float] = None) -> None:
        self.records.append(SdeTraceRecord(iteration, float(norm), proxy))

    def norms(self) -> np.ndarray:
        return np.array([r.norm for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def to_table(self) -> str:
        lines = ["iteration\tnorm\tproxy"]
        for r in self.records:
            proxy = "nan" if r.proxy is None else repr(r.proxy)
            lines.append(f"{r.iteration}\t{r.norm!r}\t{proxy}")
        return "\n".join(lines) + "\n"


@dataclass
class NormTraceReport:
    max_rel_deviation: float
    diverged: bool
    initial_norm: float
    final_norm: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "max_rel_deviation": self.max_rel_deviation,
            "diverged": self.diverged,
            "initial_norm": self.initial_norm,
            "final_norm": self.final_norm,
        }


@dataclass
class PhiCFResult:
    """Every intermediate of one Phi_CF run."""

    output: LatentVideo
    trace: SdeTrace
    z_tau_inv: LatentVideo
    z_tau_noisy: LatentVideo
    z_tau_init: LatentVideo
    z_tau_star: LatentVideo


# ---------------------------------------------------------------------- steps
def _check_gamma(gamma: float) -> None:
    if gamma <= 0.0:
        raise DomainError(f"gamma must be positive, got {gamma}")


def consistency_bias(v_theta, v_eps):
    """v_c = v_theta - v_eps."""
    a, b = as_array(v_theta), as_array(v_eps)
    if a.shape != b.shape:
        raise ShapeError(f"velocity shape mismatch: {a.shape} vs {b.shape}")
    return wrap_like(a - b, v_theta)


def cf_sde_step(z, v_theta, tau: float, gamma: float, noise):
    """(1 - gamma/tau) z + ((1 - tau)/tau) gamma v_theta + sqrt(2 gamma) noise."""
    _check_gamma(gamma)
    out = ((1.0 - gamma / tau) * as_array(z)
           + beta_for_tau(tau) * gamma * as_array(v_theta)
           + np.sqrt(2.0 * gamma) * as_array(noise))
    return wrap_like(out, z)


def general_sde_step(z, v_theta, v_eps, tau: float, gamma: float, beta: float, noise):
    """General-beta update; the v_eps coefficient is zero at beta = (1 - tau)/tau."""
    _check_gamma(gamma)
    if beta <= 0.0:
        raise DomainError(f"beta must be positive, got {beta}")
    out = ((1.0 - gamma / tau) * as_array(z)
           + beta * gamma * as_array(v_theta)
           - (beta - beta_for_tau(tau)) * gamma * as_array(v_eps)
           + np.sqrt(2.0 * gamma) * as_array(noise))
    return wrap_like(out, z)


def score_from_v_eps(z, v_eps, tau: float):
    """Score of q approximated from the condition-agnostic velocity."""
    zd = as_array(z)
    return wrap_like(-(zd - (1.0 - tau) * (zd + tau * as_array(v_eps))) / (tau * tau), z)


# ---------------------------------------------------------------------- Langevin
def tilted_gaussian_moments(mu, tau: float, beta: float, z_ref):
    """Mean and variance of q * exp(beta C) for C(z) = -|z - z_ref|^2 / 2."""
    precision = 1.0 / (tau * tau) + beta
    mean = ((1.0 - tau) * as_array(mu) / (tau * tau) + beta * as_array(z_ref)) / precision
    return mean, 1.0 / precision


def euler_maruyama_variance(precision: float, gamma: float, temperature: float = 1.0) -> float:
    """Stationary variance of the discretised chain on a Gaussian of given precision."""
    return temperature / (precision * (1.0 - 0.5 * gamma * precision))


def langevin_tilt_sample(mu, tau: float, grad_C: Callable[[np.ndarray], np.ndarray],
                         beta: float, gamma: float, burn_in: int, n_samples: int, seed: int,
                         n_chains: int = 1, thin: int = 1, temperature: float = 1.0,
                         z0: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Overdamped Langevin sampling of p* proportional to q * exp(beta C).

    Args:
        mu: Centre of the data distribution behind q
        tau: SDE time
        grad_C: Gradient of C, applied row-wise to an (n_chains, D) array
        beta: Tilt strength (>= 0)
        gamma: Euler-Maruyama step, must satisfy gamma < tau^2 min(1, 1/beta)
        burn_in: Discarded steps per chain
        n_samples: Number of returned samples
        seed: Generator seed
        n_chains: Independent chains advanced together
        thin: Steps between collected samples
        temperature: Noise temperature; 0 gives the deterministic gradient flow
        z0: Initial state (defaults to zeros)

    Returns:
        np.ndarray: (n_samples, D) samples
    """
    mu_flat = as_array(mu).reshape(-1)
    limit = tau * tau * min(1.0, 1.0 / beta) if beta > 0 else tau * tau
    if not 0.0 < gamma < limit:
        raise DomainError(f"gamma={gamma} violates the stability bound {limit:.6g}")
    if beta < 0:
        raise DomainError("beta must be >= 0")
    if n_samples < 1 or n_chains < 1 or thin < 1 or burn_in < 0:
        raise DomainError("sample counts must be positive")

    rng = np.random.default_rng(seed)
    dim = mu_flat.size
    z = np.zeros((n_chains, dim)) if z0 is None else np.broadcast_to(
        np.asarray(z0, dtype=np.float64).reshape(-1), (n_chains, dim)).copy()
    noise_scale = np.sqrt(2.0 * gamma * temperature)
    norm_limit = SDE_CONFIG["langevin_norm_limit"]

    def advance(step: int) -> None:
        nonlocal z
        drift = beta * grad_C(z) + analytic_score_q(z, tau, mu_flat[None, :])
        z = z + gamma * drift + noise_scale * rng.standard_normal(z.shape)
        peak = float(np.max(np.linalg.norm(z, axis=1)))
        if not np.isfinite(peak) or peak > norm_limit:
            raise NumericalError(f"Langevin chain diverged at step {step} (|z| = {peak:.3g})",
                                 stage="langevin", index=step)

    step = 0
    for _ in range(burn_in):
        advance(step)
        step += 1
    rounds = -(-n_samples // n_chains)
    collected = []
    for _ in range(rounds):
        for _ in range(thin):
            advance(step)
            step += 1
        collected.append(z.copy())
    samples = np.concatenate(collected, axis=0)[:n_samples]
    logger.debug("Langevin: %d samples from %d chains after %d steps", n_samples, n_chains, step)
    return samples


# ---------------------------------------------------------------------- Phi_CF
def _proxy(v: LatentVideo, tau: float) -> float:
    # -|z - x_hat|^2 with x_hat = z + tau v
    return float(-(tau * tau) * np.sum(v.data * v.data))


def sde_update(z: LatentVideo, oracle: VelocityOracle, cond: Condition, tau: float,
               gamma: float, beta: Optional[float], noise: LatentVideo,
               v_theta: Optional[LatentVideo] = None):
    """One unmasked SDE update.

    ``beta=None`` selects the simplified step; any other value the general
    step with an explicit v_eps evaluation.
    """
    v_theta = oracle.v_theta(z, tau, cond) if v_theta is None else v_theta
    if beta is not None:
        return general_sde_step(z, v_theta, oracle.v_eps(z, tau), tau, gamma, beta, noise)
    return cf_sde_step(z, v_theta, tau, gamma, noise)


def run_sde_chain(z0: LatentVideo, oracle: VelocityOracle, tau: float, gamma: float,
                  n_iters: int, seed: int, cond: Condition = None,
                  beta: Optional[float] = None) -> SdeTrace:
    """Unmasked SDE chain at fixed tau, for stability diagnostics.

    Unlike Phi_CF this does not enforce gamma < tau.
    """
    rng = np.random.default_rng(seed)
    trace = SdeTrace()
    z = z0
    trace.append(0, z.norm())
    for n in range(n_iters):
        noise = rng.standard_normal(z.shape)
        try:
            z = sde_update(z, oracle, cond, tau, gamma, beta, LatentVideo(noise))
        except NumericalError:
            trace.append(n + 1, float("inf"))
            break
        trace.append(n + 1, z.norm())
    return trace


def run_phi_cf_detailed(input_video: LatentVideo, cond_image: Condition,
                        bg_image: Optional[LatentVideo], mask: VideoMask,
                        oracle: VelocityOracle, schedule: Optional[TimeSchedule],
                        cfg: SdeConfig) -> PhiCFResult:
    """Run Phi_CF and keep every intermediate latent."""
    if cfg.stage == "stage2" and bg_image is None:
        raise ConfigError("stage2 requires a background latent", key="bg_image")
    if mask.shape != input_video.shape[:3]:
        raise ShapeError(f"mask shape {mask.shape} does not match latent {input_video.shape}")
    if schedule is None:
        schedule = TimeSchedule.uniform(tau=cfg.tau)
    tau = schedule.tau
    if abs(tau - cfg.tau) > 1e-12:
        raise ConfigError(f"schedule tau {tau} differs from configured tau {cfg.tau}", key="sde.tau")

    # identity encoder
    z = input_video
    z_inv = invert_to_tau(z, cond_image, schedule, oracle)

    rng = np.random.default_rng(cfg.seed)
    eps = LatentVideo(rng.standard_normal(z.shape))
    base = z if cfg.stage == "stage1" else bg_image
    z_noisy = forward_noise(base, tau, eps)
    z_init = mask_mix(z_inv, z_noisy, mask)

    beta = cfg.beta if cfg.uses_general_step else None
    trace = SdeTrace()
    z_n = z_init
    for n in range(cfg.n_steps):
        v = oracle.v_theta(z_n, tau, cond_image)
        trace.append(n, z_n.norm(), _proxy(v, tau))
        noise = LatentVideo(rng.standard_normal(z.shape))
        try:
            z_hat = sde_update(z_n, oracle, cond_image, tau, cfg.gamma, beta, noise, v_theta=v)
        except NumericalError as exc:
            raise NumericalError(f"non-finite latent at SDE iteration {n}: {exc}",
                                 stage="phi_cf", index=n) from exc
        if cfg.stage == "stage1":
            z_n = mask_mix(z_n, z_hat, mask)
        else:
            z_n = mask_mix(z_hat, z_n, mask)
        logger.debug("phi_cf %s iteration %d norm %.6g", cfg.stage, n, z_n.norm())
    trace.append(cfg.n_steps, z_n.norm(), _proxy(oracle.v_theta(z_n, tau, cond_image), tau))

    output = generate_from_tau(z_n, cond_image, schedule, oracle)
    # identity decoder
    return PhiCFResult(output=output, trace=trace, z_tau_inv=z_inv, z_tau_noisy=z_noisy,
                       z_tau_init=z_init, z_tau_star=z_n)


def run_phi_cf(input_video: LatentVideo, cond_image: Condition, bg_image: Optional[LatentVideo],
               mask: VideoMask, oracle: VelocityOracle, schedule: Optional[TimeSchedule],
               cfg: SdeConfig):
    """Consistency-guided flow SDE; returns (output latent, norm trace)."""
    result = run_phi_cf_detailed(input_video, cond_image, bg_image, mask, oracle, schedule, cfg)
    return result.output, result.trace


def latent_norm_trace(trace: SdeTrace, divergence_factor: float = SDE_CONFIG["divergence_factor"],
                      window: int = SDE_CONFIG["divergence_window"]) -> NormTraceReport:
    """Maximum relative norm deviation from the initial state and a divergence flag.

    The chain counts as diverged when a norm is non-finite, or when the final
    norm exceeds ``divergence_factor`` times the initial one while the last
    ``window`` norms are non-decreasing.
    """
    norms = trace.norms()
    if norms.size == 0:
        raise DomainError("empty SDE trace")
    n0 = norms[0]
    if not np.all(np.isfinite(norms)):
        return NormTraceReport(float("inf"), True, float(n0), float(norms[-1]))
    scale = n0 if n0 > 0 else 1.0
    deviation = float(np.max(np.abs(norms - n0)) / scale)
    tail = norms[-(window + 1):]
    growing = bool(np.all(np.diff(tail) >= 0)) if tail.size > 1 else False
    diverged = bool(growing and norms[-1] > divergence_factor * scale)
    return NormTraceReport(deviation, diverged, float(n0), float(norms[-1]))
