"""
Data layer package for on-disk formats and scene configuration files.
"""

from .formats import RunArtifactStore, read_manifest

__all__ = ['RunArtifactStore', 'read_manifest']
