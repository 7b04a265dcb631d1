"""
oracle_flow.py - Closed-Form Velocity Fields

This module implements the VelocityOracle class, which stands in for a
pretrained image-to-video model with velocity fields that are exactly
computable:
1. Empirical mode: the flow-matching marginal velocity of a finite,
   conditioned dataset (mixture of diracs)
2. Dirac mode: data concentrated at a single latent mu
3. Gaussian mode: data distributed as N(mu, s^2 I)

The same oracle answers both the conditioned query v_theta(z, z_I, t) and
the condition-agnostic query v_eps(z, t) (uniform prior over samples), so
the consistency bias v_c = v_theta - v_eps is a concrete quantity.

Key Features:
- Posterior weights computed in the log domain (no underflow at small t)
- Hard key selection or soft Gaussian-similarity condition weighting
- Condition latents resolved to the key of the nearest registered image
- Nearest-sample lookup for argmax-level adherence checks
"""

import logging
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from sklearn.neighbors import NearestNeighbors

from cg_flow.errors import ConfigError, DomainError, ShapeError
from cg_flow.flow_core import T_MIN, LatentVideo, as_array, check_time, wrap_like

logger = logging.getLogger(__name__)

Condition = Union[None, str, LatentVideo, np.ndarray]
MODES = ("empirical", "dirac", "gaussian")
WEIGHTINGS = ("hard", "soft")


class VelocityOracle:
    """
    Exactly solvable velocity field over a conditioned dataset.

    Attributes:
        mode (str): one of ``empirical``, ``dirac``, ``gaussian``
        samples (np.ndarray): dataset stacked as (K, D) for empirical mode
        keys (List[str]): condition key of every sample
        mu (np.ndarray): flattened centre for dirac / gaussian mode
        s (float): data standard deviation for gaussian mode
        weighting (str): ``hard`` key selection or ``soft`` similarity prior
        conditions (Dict[str, np.ndarray]): registered condition image per key
    """

    def __init__(self, mode: str, samples: Optional[Sequence[LatentVideo]] = None,
                 keys: Optional[Sequence[str]] = None, mu: Optional[LatentVideo] = None,
                 s: float = 0.0, weighting: str = "hard",
                 conditions: Optional[Dict[str, np.ndarray]] = None,
                 condition_bandwidth: float = 1.0, t_min: float = T_MIN):
        if mode not in MODES:
            raise ConfigError(f"unknown oracle mode '{mode}'", key="oracle.mode")
        if weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown condition weighting '{weighting}'", key="oracle.weighting")
        if condition_bandwidth <= 0:
            raise ConfigError("condition bandwidth must be positive", key="oracle.bandwidth")
        self.mode = mode
        self.weighting = weighting
        self.condition_bandwidth = float(condition_bandwidth)
        self.t_min = float(t_min)
        self.s = float(s)
        self.conditions = {k: np.asarray(as_array(v), dtype=np.float64)
                           for k, v in (conditions or {}).items()}
        self._index: Optional[NearestNeighbors] = None

        if mode == "empirical":
            if not samples:
                raise ConfigError("empirical oracle needs a non-empty dataset", key="oracle.dataset")
            shape = samples[0].shape
            for sample in samples:
                if sample.shape != shape:
                    raise ShapeError(f"dataset sample shape {sample.shape} differs from {shape}")
            keys = list(keys) if keys is not None else [""] * len(samples)
            if len(keys) != len(samples):
                raise ConfigError("one condition key is required per sample", key="oracle.dataset")
            self.sample_shape = shape
            self.samples = np.stack([sample.flat() for sample in samples])
            self.keys = [str(k) for k in keys]
            self.mu = None
        else:
            if mu is None:
                raise ConfigError(f"{mode} oracle needs mu", key="oracle.mu")
            if self.s < 0:
                raise DomainError("data_std s must be >= 0")
            self.sample_shape = mu.shape
            self.mu = mu.flat().copy()
            self.samples = self.mu[None, :]
            self.keys = [""]
        logger.debug("VelocityOracle(mode=%s, K=%d, shape=%s)", mode, len(self.keys), self.sample_shape)

    # ------------------------------------------------------------------ factories
    @classmethod
    def empirical(cls, samples: Sequence[LatentVideo], keys: Sequence[str],
                  conditions: Optional[Dict[str, np.ndarray]] = None,
                  weighting: str = "hard", condition_bandwidth: float = 1.0) -> "VelocityOracle":
        return cls("empirical", samples=samples, keys=keys, conditions=conditions,
                   weighting=weighting, condition_bandwidth=condition_bandwidth)

    @classmethod
    def dirac(cls, mu: LatentVideo) -> "VelocityOracle":
        return cls("dirac", mu=mu)

    @classmethod
    def gaussian(cls, mu: LatentVideo, s: float) -> "VelocityOracle":
        return cls("gaussian", mu=mu, s=s)

    @classmethod
    def from_manifest(cls, path: str, weighting: str = "hard") -> "VelocityOracle":
        """Load an empirical oracle from a dataset manifest of (file, key) lines."""
        from data_layer.formats import read_dataset_manifest, read_latent

        entries = read_dataset_manifest(path)
        samples = [read_latent(p) for p, _ in entries]
        logger.info("Loaded %d dataset samples from %s", len(samples), path)
        return cls.empirical(samples, [k for _, k in entries], weighting=weighting)

    # ------------------------------------------------------------------ conditioning
    def resolve_key(self, cond: Condition) -> Optional[str]:
        """Map a condition (key or latent) to a dataset key."""
        if cond is None:
            return None
        if isinstance(cond, str):
            if cond not in self.keys:
                raise ConfigError(f"condition key '{cond}' matches no dataset sample", key="oracle.condition")
            return cond
        if not self.conditions:
            raise ConfigError("a latent condition needs registered condition images", key="oracle.condition")
        image = as_array(cond)
        if image.ndim == 4:
            image = image[0]
        best, best_dist = None, np.inf
        for key in sorted(self.conditions):
            ref = self.conditions[key]
            if ref.shape != image.shape:
                raise ShapeError(f"condition shape {image.shape} does not match {ref.shape}")
            dist = float(np.sum((ref - image) ** 2))
            if dist < best_dist:
                best, best_dist = key, dist
        return best

    def log_prior(self, cond: Condition) -> np.ndarray:
        """Per-sample log prior for the given condition."""
        k = len(self.keys)
        if cond is None or self.mode != "empirical":
            return np.zeros(k)
        if self.weighting == "hard":
            key = self.resolve_key(cond)
            match = np.array([sample_key == key for sample_key in self.keys])
            with np.errstate(divide="ignore"):
                return np.log(match.astype(np.float64))
        if isinstance(cond, str):
            if cond not in self.conditions:
                raise ConfigError(f"no registered condition image for key '{cond}'", key="oracle.dataset")
            image = self.conditions[cond]
        else:
            image = as_array(cond)
            image = image[0] if image.ndim == 4 else image
        logp = np.empty(k)
        for i, sample_key in enumerate(self.keys):
            ref = self.conditions.get(sample_key)
            if ref is None:
                raise ConfigError(f"soft weighting needs a condition image for key '{sample_key}'",
                                  key="oracle.dataset")
            logp[i] = -np.sum((ref - image) ** 2) / (2.0 * self.condition_bandwidth ** 2)
        return logp

    # ------------------------------------------------------------------ velocities
    def posterior_weights(self, z: LatentVideo, t: float, cond: Condition = None) -> np.ndarray:
        """Posterior weights over the dataset; they sum to one."""
        t = check_time(t, self.t_min)
        self._check_shape(z)
        logp = self.log_prior(cond)
        if not np.any(np.isfinite(logp)):
            raise DomainError(f"no dataset sample carries condition {self.resolve_key(cond)!r}")
        diff = (1.0 - t) * self.samples - z.flat()[None, :]
        logw = logp - np.einsum("kd,kd->k", diff, diff) / (2.0 * t * t)
        return np.exp(logw - logsumexp(logw))

    def velocity(self, z: LatentVideo, t: float, cond: Condition = None) -> LatentVideo:
        if self.mode == "empirical":
            return empirical_velocity(z, t, self, cond)
        mu = LatentVideo(self.mu.reshape(self.sample_shape))
        if self.mode == "dirac":
            return dirac_velocity(z, t, mu, self.t_min)
        return gaussian_velocity(z, t, mu, self.s, self.t_min)

    def v_theta(self, z: LatentVideo, t: float, cond: Condition = None) -> LatentVideo:
        """Conditioned velocity v_theta(z, z_I, t)."""
        return self.velocity(z, t, cond)

    def v_eps(self, z: LatentVideo, t: float) -> LatentVideo:
        """Condition-agnostic velocity (uniform prior)."""
        return self.velocity(z, t, None)

    def nearest_sample(self, x: LatentVideo) -> Tuple[int, str]:
        """Index and condition key of the dataset sample closest to ``x``."""
        self._check_shape(x)
        if self._index is None:
            self._index = NearestNeighbors(n_neighbors=1, algorithm="brute").fit(self.samples)
        _, idx = self._index.kneighbors(x.flat()[None, :])
        i = int(idx[0, 0])
        return i, self.keys[i]

    def _check_shape(self, z: LatentVideo) -> None:
        if z.shape != self.sample_shape:
            raise ShapeError(f"latent shape {z.shape} does not match oracle shape {self.sample_shape}")


def empirical_velocity(z: LatentVideo, t: float, oracle: VelocityOracle,
                       cond: Condition = None) -> LatentVideo:
    """(x_bar_w - z) / t with posterior weights over the oracle dataset."""
    w = oracle.posterior_weights(z, t, cond)
    x_bar = w @ oracle.samples
    return LatentVideo(((x_bar - z.flat()) / t).reshape(z.shape))


def dirac_velocity(z, t: float, mu, t_min: float = T_MIN):
    """(mu - z) / t."""
    t = check_time(t, t_min)
    return wrap_like((as_array(mu) - as_array(z)) / t, z)


def gaussian_velocity(z, t: float, mu, s: float, t_min: float = T_MIN):
    """(E[x | z_t = z] - z) / t for data distributed as N(mu, s^2 I)."""
    if s < 0:
        raise DomainError("data_std s must be >= 0")
    t = check_time(t, t_min)
    zd, md = as_array(z), as_array(mu)
    gain = (1.0 - t) * s * s / ((1.0 - t) ** 2 * s * s + t * t)
    posterior_mean = md + gain * (zd - (1.0 - t) * md)
    return wrap_like((posterior_mean - zd) / t, z)


def analytic_score_q(z, tau: float, mu):
    """Score of q = N((1 - tau) mu, tau^2 I)."""
    return wrap_like(-(as_array(z) - (1.0 - tau) * as_array(mu)) / (tau * tau), z)


def log_density_q(z: np.ndarray, tau: float, mu: np.ndarray) -> float:
    """Unnormalised log density of q, used by finite-difference checks."""
    d = np.asarray(z, dtype=np.float64) - (1.0 - tau) * np.asarray(mu, dtype=np.float64)
    return float(-np.sum(d * d) / (2.0 * tau * tau))
