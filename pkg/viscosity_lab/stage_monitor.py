"""
Stage Monitor
=============

Records wall time and process memory for each pipeline stage and exposes
them as Prometheus metrics.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import psutil
from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile


@dataclass
class StageMetrics:
    """Resource usage of one stage."""

    stage: str
    seconds: float
    rss_mb: float
    rss_delta_mb: float
    ok: bool


class StageMonitor:
    """
    Per-run stage accounting.

    Tracks:
    - wall time per stage (perf_counter)
    - resident set size before and after (psutil)
    - a Prometheus registry with stage durations and run counts
    """

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        self.config = config or {}
        self.logger = logging.getLogger(__name__)
        self.metrics_history: List[StageMetrics] = []
        self._process = psutil.Process()

        self.registry = CollectorRegistry()
        self.stage_duration = Histogram(
            "lab_stage_duration_seconds",
            "Wall time of a pipeline stage",
            ["stage"],
            registry=self.registry,
        )
        self.stage_runs = Counter(
            "lab_stage_runs_total",
            "Completed pipeline stages",
            ["stage", "outcome"],
            registry=self.registry,
        )

    def current_rss_mb(self) -> float:
        try:
            return self._process.memory_info().rss / (1024 * 1024)
        except psutil.Error as e:
            self.logger.debug(f"RSS unavailable: {e}")
            return float("nan")

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Time the enclosed block; failures are recorded and re-raised."""
        rss_before = self.current_rss_mb()
        start = time.perf_counter()
        ok = False
        self.logger.info(f"Stage {name} started")
        try:
            yield
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            rss_after = self.current_rss_mb()
            metrics = StageMetrics(name, elapsed, rss_after, rss_after - rss_before, ok)
            self.metrics_history.append(metrics)
            self.stage_duration.labels(stage=name).observe(elapsed)
            self.stage_runs.labels(stage=name, outcome="ok" if ok else "error").inc()
            level = logging.INFO if ok else logging.ERROR
            self.logger.log(level, f"Stage {name} {'finished' if ok else 'failed'} in {elapsed:.3f}s")

    def summary(self) -> List[Dict[str, Any]]:
        return [asdict(m) for m in self.metrics_history]

    def total_seconds(self) -> float:
        return sum(m.seconds for m in self.metrics_history)

    def write_textfile(self, path: Union[str, Path]) -> None:
        write_to_textfile(str(path), self.registry)
        self.logger.debug(f"Prometheus metrics written to {path}")
