"""
Run Manifest.
=============

manifest.json: config hash, toolkit version, seeds, per-stage timings and
the inventory of emitted files with their content hashes.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from .artifact_store import ArtifactStore

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """Provenance record written last by every command."""

    command: str
    config_hash: str
    version: str
    seeds: Dict[str, int] = field(default_factory=dict)
    timings: List[Dict[str, Any]] = field(default_factory=list)
    files: Dict[str, str] = field(default_factory=dict)
    status: str = "ok"
    error: Optional[str] = None
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )

    def add_timing(self, stage: str, seconds: float, rss_mb: Optional[float] = None) -> None:
        self.timings.append({"stage": stage, "seconds": seconds, "rss_mb": rss_mb})

    def finalize(self, store: ArtifactStore) -> None:
        """Write manifest.json covering every file already in the store."""
        self.files = {k: v for k, v in store.inventory().items() if k != MANIFEST_NAME}
        store.write_json(MANIFEST_NAME, self)
        logger.info(f"Manifest for {self.command}: {len(self.files)} files, status {self.status}")
