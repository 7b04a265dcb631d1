"""
Argument validation middleware for the cgflow command line.

Every sub-command has a validation rule that runs on the parsed arguments
before any computation starts; failures raise ConfigError, which the entry
point maps to exit code 2.
"""

import re
from argparse import Namespace
from pathlib import Path
from typing import Callable, Dict

from cg_flow.errors import ConfigError

OVERRIDE_PATTERN = re.compile(r"^[A-Za-z0-9_.]+\.[A-Za-z0-9_]+=.*$")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ArgumentValidator:
    """Validates parsed arguments per sub-command."""

    def __init__(self):
        # Define validation rules for the different commands
        self.validation_rules: Dict[str, Callable[[Namespace], None]] = {
            "simulate": self._validate_scene_command,
            "orbit": self._validate_scene_command,
            "pipeline": self._validate_scene_command,
            "sweep": self._validate_sweep,
            "verify": self._validate_common,
        }

    def __call__(self, args: Namespace) -> Namespace:
        validator = self.validation_rules.get(args.command)
        if validator is None:
            raise ConfigError(f"unknown command '{args.command}'", key="command")
        validator(args)
        return args

    def _validate_common(self, args: Namespace) -> None:
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be >= 1", key="threads")
        if args.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"--log-level must be one of {', '.join(LOG_LEVELS)}", key="log-level")
        for item in getattr(args, "overrides", None) or []:
            if not OVERRIDE_PATTERN.match(item):
                raise ConfigError(f"override '{item}' is not of the form section.key=value", key="set")

    def _validate_scene_command(self, args: Namespace) -> None:
        """Scene commands need an existing scene file and a usable output directory."""
        self._validate_common(args)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0", key="seed")
        scene = Path(args.scene)
        if not scene.is_file():
            raise ConfigError(f"scene file not found: {scene}", key="scene")
        if args.out is not None and Path(args.out).exists() and not Path(args.out).is_dir():
            raise ConfigError(f"output path {args.out} exists and is not a directory", key="out")

    def _validate_sweep(self, args: Namespace) -> None:
        self._validate_common(args)
        if args.n_seeds < 1:
            raise ConfigError("--n-seeds must be >= 1", key="n-seeds")
        if not 0.0 < args.tau < 1.0:
            raise ConfigError("--tau must lie in (0, 1)", key="tau")


def setup_validation(args: Namespace) -> Namespace:
    """Validate ``args`` with the default rule set and return them."""
    return ArgumentValidator()(args)
