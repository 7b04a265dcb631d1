"""
Configuration settings for the cgflow toolkit.

Default parameters used throughout the library and the command line, loaded
from environment variables with sensible defaults. Grid and image sizes are
desk-scale so that a full run finishes in minutes on a laptop.
"""

import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _floats(value: str):
    return tuple(float(v) for v in value.split(","))


# === Flow matching ===
FLOW_CONFIG = {
    "t_min": float(os.getenv("CGFLOW_T_MIN", "1e-3")),
    "n_schedule_steps": int(os.getenv("CGFLOW_SCHEDULE_STEPS", "25")),
    "inversion_steps": int(os.getenv("CGFLOW_INVERSION_STEPS", "20")),
}

# === Consistency-guided SDE ===
SDE_CONFIG = {
    # beta = (1 - tau) / tau = 0.0357 at this tau
    "tau": float(os.getenv("CGFLOW_TAU", str(1.0 / 1.0357))),
    "gamma": float(os.getenv("CGFLOW_GAMMA", "0.2")),
    "n_steps": int(os.getenv("CGFLOW_SDE_STEPS", "10")),
    "seed": int(os.getenv("CGFLOW_SEED", "0")),
    "divergence_factor": 10.0,
    "divergence_window": 5,
    "langevin_norm_limit": 1e6,
    "beta_ablation": (1e-6, 0.0357, 1.28, 2.58),
}

# === Simulation (MPM / XPBD) ===
SIM_CONFIG = {
    "dt": float(os.getenv("CGFLOW_SIM_DT", "4e-3")),
    "substeps": int(os.getenv("CGFLOW_SIM_SUBSTEPS", "10")),
    "grid_res": int(os.getenv("CGFLOW_GRID_RES", "64")),  # full scale: 128
    "grid_dx": float(os.getenv("CGFLOW_GRID_DX", str(2.0 / 64))),
    "grid_origin": (-1.0, -1.0, -0.25),
    "gravity": _floats(os.getenv("CGFLOW_GRAVITY", "0,0,-9.81")),
    "friction_mu": 0.2,
    "coupling_friction": 0.3,
    "particle_spacing": 1.3e-2,
    "damping": 0.0,
    "boundary_cells": 3,
    "cloth_iterations": 10,
}

MATERIAL_CONFIG = {
    "mpm": {"youngs_E": 8e4, "poisson_nu": 0.32, "density_rho": 40.0, "kind": "snow"},
    "steam": {"youngs_E": 1e2, "poisson_nu": 0.10, "density_rho": 15.0, "kind": "elastic"},
    # snow plasticity limits
    "snow_critical_compression": 2.5e-2,
    "snow_critical_stretch": 7.5e-3,
}

PBD_CONFIG = {
    "stretch_compliance": 1e-7,
    "bend_compliance": 1e-5,
    "particle_mass": 1e-2,
}

STEAM_CONFIG = {
    "jitter_coefficient": 0.02,
    "damping_height": 0.7,
    "damping_factor": 0.9,
    "recycle_height": 0.85,
    "recycle": True,
    "source_center": (0.0, 0.0, 0.05),
    "source_radius": 0.05,
    "source_height": 0.05,
    "vortex_decay": 0.20,
}

# Articulated striker; only its end-effector is simulated, the gains are run metadata
RIGID_CONFIG = {
    "density": 180.0,
    "kp": (9000.0, 9000.0, 7000.0, 7000.0, 4000.0, 4000.0, 4000.0, 200.0, 200.0),
    "kv": (700.0, 700.0, 600.0, 600.0, 350.0, 350.0, 350.0, 15.0, 15.0),
}

# Liquid parameters, recorded with each run; there is no SPH solver
SPH_CONFIG = {
    "viscosity": 5e-3,
    "particle_size": 1.3e-2,
    "sampler": "regular",
}

WIND_CONFIG = {
    "period_frames": 8,
    "sway_period_frames": 64,
    "amplitude": 0.5,
}

# === Geometry / rendering ===
GEOMETRY_CONFIG = {
    "image_width": 32,
    "image_height": 32,
    "focal": 40.0,
    "orbit_frames": 36,
    "orbit_elevation_deg": 15.0,
    "orbit_radius_factor": 2.0,
    "point_radius_px": 1.0,
    "ransac_iters": 200,
    "ransac_thresh": 5e-3,
    "voxel_size": 0.04,
    "coverage_voxel": 0.08,
    "outlier_k": 10,
    "contact_tol": 0.02,
}

# === Runtime ===
RUNTIME_CONFIG = {
    "threads": int(os.getenv("CGFLOW_THREADS", "1")),
    "output_dir": os.getenv("CGFLOW_OUTPUT_DIR", "runs"),
}

# === Logging Configuration ===
LOGGING_CONFIG = {
    "log_dir": os.getenv("CGFLOW_LOG_DIR", "logs"),
    "log_file": "cgflow.log",
    "max_file_size_mb": 10,
    "backup_count": 5,
    "level": os.getenv("CGFLOW_LOG_LEVEL", "INFO"),
    "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
}

