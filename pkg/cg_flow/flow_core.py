"""
flow_core.py - Flow Matching Substrate

This module holds the latent containers and the time conventions every
sampler in the package runs on:
1. LatentVideo / VideoMask containers (identity codec: latent space is pixel space)
2. TimeSchedule, a strictly decreasing grid on [t_min, 1] carrying the SDE time tau
3. Forward noising along the straight path z_t = (1 - t) x + t eps
4. Euler generation and inversion steps
5. Masked latent mixing and the chained inversion / generation loops

Key Features:
- Velocity convention v = x - eps, so the denoised estimate is x_hat = z + t v
- Pure functions with no hidden random state; callers own the noise
- Float64 arithmetic throughout, float32 only on disk
"""

import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Protocol, Tuple, Union

import numpy as np

from config import FLOW_CONFIG
from cg_flow.errors import DomainError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

T_MIN = FLOW_CONFIG["t_min"]


@dataclass(frozen=True)
class LatentVideo:
    """Dense F x H x W x C latent tensor.

    Attributes:
        data: float64 array of shape (frames, height, width, channels)
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise ShapeError(f"LatentVideo expects a 4-D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"LatentVideo dimensions must be >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericalError("LatentVideo contains non-finite entries")
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int, int]) -> "LatentVideo":
        return cls(np.zeros(shape))

    @classmethod
    def full(cls, shape: Tuple[int, int, int, int], value: float) -> "LatentVideo":
        return cls(np.full(shape, float(value)))

    @classmethod
    def from_image(cls, image: np.ndarray, n_frames: int) -> "LatentVideo":
        """Broadcast a single H x W x C image to ``n_frames`` frames."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[..., None]
        return cls(np.repeat(image[None], n_frames, axis=0))

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def norm(self) -> float:
        return float(np.linalg.norm(self.data.ravel()))

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class VideoMask:
    """Binary F x H x W mask, broadcast over latent channels."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeError(f"VideoMask expects a 3-D array, got shape {data.shape}")
        if not np.all((data == 0.0) | (data == 1.0)):
            raise DomainError("VideoMask entries must be 0 or 1")
        object.__setattr__(self, "data", data)

    @classmethod
    def ones(cls, shape: Tuple[int, int, int]) -> "VideoMask":
        return cls(np.ones(shape))

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int]) -> "VideoMask":
        return cls(np.zeros(shape))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def broadcast(self) -> np.ndarray:
        return self.data[..., None]

    def any(self) -> bool:
        return bool(self.data.any())


@dataclass(frozen=True)
class TimeSchedule:
    """Strictly decreasing time grid from 1 toward t_min.

    ``steps[tau_index]`` is the SDE time tau. Inversion walks the grid from
    its last entry (the data end) up to tau; generation walks from tau down.
    """

    steps: np.ndarray
    tau_index: int

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.float64)
        if steps.ndim != 1 or steps.size < 1:
            raise ShapeError("TimeSchedule needs a non-empty 1-D step array")
        if np.any(np.diff(steps) >= 0):
            raise DomainError("TimeSchedule steps must be strictly decreasing")
        if steps[0] > 1.0 or steps[-1] <= 0.0:
            raise DomainError("TimeSchedule steps must lie in (0, 1]")
        if not 0 <= self.tau_index < steps.size:
            raise DomainError(f"tau_index {self.tau_index} outside schedule of {steps.size} steps")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def uniform(cls, n_steps: Optional[int] = None, t_min: float = T_MIN,
                tau: Optional[float] = None) -> "TimeSchedule":
        """Uniform grid with ``n_steps`` intervals on [t_min, 1].

        Args:
            n_steps: Number of intervals (defaults to the configured 25)
            t_min: Time floor
            tau: SDE time; inserted into the grid when it is not a grid point.
                Defaults to the data end (zero-length inversion).

        Returns:
            TimeSchedule: the grid with tau_index pointing at tau
        """
        n_steps = FLOW_CONFIG["n_schedule_steps"] if n_steps is None else n_steps
        if n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        steps = np.linspace(1.0, t_min, n_steps + 1)
        if tau is None:
            return cls(steps, steps.size - 1)
        check_time(tau, t_min)
        hit = np.flatnonzero(np.abs(steps - tau) <= 1e-12)
        if hit.size:
            return cls(steps, int(hit[0]))
        steps = np.sort(np.append(steps, tau))[::-1]
        return cls(steps, int(np.flatnonzero(steps == tau)[0]))

    @property
    def tau(self) -> float:
        return float(self.steps[self.tau_index])

    @property
    def t_min(self) -> float:
        return float(self.steps[-1])


class VelocityField(Protocol):
    def v_theta(self, z: LatentVideo, t: float, cond=None) -> LatentVideo:
        ...


def check_time(t: float, t_min: float = T_MIN) -> float:
    """Validate a TimePoint."""
    if not np.isfinite(t) or t < t_min - 1e-15 or t > 1.0:
        raise DomainError(f"time {t} outside [{t_min}, 1]")
    return float(t)


def _same_shape(*latents: LatentVideo) -> None:
    shape = latents[0].shape
    for other in latents[1:]:
        if other.shape != shape:
            raise ShapeError(f"latent shape mismatch: {shape} vs {other.shape}")


def forward_noise(z: LatentVideo, tau: float, eps: LatentVideo) -> LatentVideo:
    """Forward process (1 - tau) z + tau eps."""
    _same_shape(z, eps)
    tau = check_time(tau, 0.0)
    return LatentVideo((1.0 - tau) * z.data + tau * eps.data)


def euler_generate_step(z: LatentVideo, v: LatentVideo, t: float, t_next: float) -> LatentVideo:
    """One generation step from t down to t_next."""
    _same_shape(z, v)
    if not t > t_next:
        raise DomainError(f"generation step needs t > t_next, got {t} -> {t_next}")
    return LatentVideo(z.data + (t - t_next) * v.data)


def euler_invert_step(z: LatentVideo, v: LatentVideo, t: float, t_next: float) -> LatentVideo:
    """One inversion step from t up to t_next."""
    _same_shape(z, v)
    if not t < t_next:
        raise DomainError(f"inversion step needs t < t_next, got {t} -> {t_next}")
    return LatentVideo(z.data - (t_next - t) * v.data)


def mask_mix(a: LatentVideo, b: LatentVideo, m: VideoMask) -> LatentVideo:
    """m * a + (1 - m) * b with the mask broadcast over channels."""
    _same_shape(a, b)
    if m.shape != a.shape[:3]:
        raise ShapeError(f"mask shape {m.shape} does not match latent {a.shape}")
    mb = m.broadcast()
    return LatentVideo(mb * a.data + (1.0 - mb) * b.data)


def iter_inversion(z: LatentVideo, cond, schedule: TimeSchedule,
                   oracle: VelocityField) -> Iterator[Tuple[float, LatentVideo]]:
    """Yield (t, z_t) along the inversion, starting with the data end."""
    steps = schedule.steps
    j = steps.size - 1
    yield float(steps[j]), z
    while j > schedule.tau_index:
        t, t_next = float(steps[j]), float(steps[j - 1])
        z = euler_invert_step(z, oracle.v_theta(z, t, cond), t, t_next)
        j -= 1
        yield t_next, z


def invert_to_tau(z: LatentVideo, cond, schedule: TimeSchedule,
                  oracle: VelocityField) -> LatentVideo:
    """Chain inversion steps from the data end of the schedule up to tau."""
    for _, z in iter_inversion(z, cond, schedule, oracle):
        pass
    return z


def generate_from_tau(z: LatentVideo, cond, schedule: TimeSchedule, oracle: VelocityField,
                      denoise_final: bool = True) -> LatentVideo:
    """Chain generation steps from tau down to t_min.

    With ``denoise_final`` the last latent is replaced by its denoised
    estimate z + t_min v, i.e. the step to t = 0 taken with the velocity
    evaluated at t_min.
    """
    steps = schedule.steps
    for j in range(schedule.tau_index, steps.size - 1):
        t, t_next = float(steps[j]), float(steps[j + 1])
        z = euler_generate_step(z, oracle.v_theta(z, t, cond), t, t_next)
    if denoise_final:
        t_end = float(steps[-1])
        z = LatentVideo(z.data + t_end * oracle.v_theta(z, t_end, cond).data)
    return z


def denoised_estimate(z: LatentVideo, v: LatentVideo, t: float) -> LatentVideo:
    return LatentVideo(z.data + t * v.data)


ArrayOrLatent = Union[np.ndarray, LatentVideo]


def as_array(x: ArrayOrLatent) -> np.ndarray:
    return x.data if isinstance(x, LatentVideo) else np.asarray(x, dtype=np.float64)


def wrap_like(result: np.ndarray, template: ArrayOrLatent) -> ArrayOrLatent:
    """Return ``result`` in the container type of ``template``."""
    return LatentVideo(result) if isinstance(template, LatentVideo) else result
