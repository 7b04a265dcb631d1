"""
Test configuration and fixtures for the cgflow command line.
"""
import logging
import sys
from pathlib import Path
from unittest.mock import patch

import pytest

# Add the project root to the Python path
project_root = str(Path(__file__).parent.parent.parent)
if project_root not in sys.path:
    sys.path.insert(0, project_root)

GOLDEN_SCENE = str(Path(project_root) / "scenes" / "falling_block.cfg")


@pytest.fixture(autouse=True)
def isolated_logging(tmp_path):
    """Send the CLI's rotating log file to a temporary directory."""
    with patch.dict("config.LOGGING_CONFIG", {"log_dir": str(tmp_path / "logs")}):
        yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_cgflow", False):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def golden_scene():
    return GOLDEN_SCENE


@pytest.fixture
def out_dir(tmp_path):
    return str(tmp_path / "run")
