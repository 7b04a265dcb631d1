"""
Consistency-guided flow toolkit: flow-matching oracles, the consistency
SDE, desk-scale geometry and physics, and the two-stage pipeline.
"""

from .cg_sde import SdeConfig, run_phi_cf, run_phi_cf_detailed
from .errors import CGFlowError, ConfigError, DomainError, NumericalError, ShapeError, StageError
from .flow_core import LatentVideo, TimeSchedule, VideoMask
from .oracle_flow import VelocityOracle

__all__ = [
    "CGFlowError",
    "ConfigError",
    "DomainError",
    "LatentVideo",
    "NumericalError",
    "SdeConfig",
    "ShapeError",
    "StageError",
    "TimeSchedule",
    "VelocityOracle",
    "VideoMask",
    "run_phi_cf",
    "run_phi_cf_detailed",
]
