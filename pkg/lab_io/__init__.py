"""
Run I/O for viscosity-lab.
==========================

Configuration loading, artifact writing and run manifests.
"""

from .artifact_store import ArtifactRecord, ArtifactStore, export_triplets, file_sha256, to_jsonable
from .manifest import MANIFEST_NAME, RunManifest
from .run_config import RunConfig, config_hash, load_run_config, parse_run_config

__all__ = [
    "ArtifactRecord",
    "ArtifactStore",
    "MANIFEST_NAME",
    "RunConfig",
    "RunManifest",
    "config_hash",
    "export_triplets",
    "file_sha256",
    "load_run_config",
    "parse_run_config",
    "to_jsonable",
]
