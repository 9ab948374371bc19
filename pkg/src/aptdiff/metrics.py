"""Run metrics: step latency, counters and a process snapshot via psutil.

Written as ``metrics.json`` in the run directory when a run finishes.
Metrics never feed back into training, so logs stay reproducible.
"""

from __future__ import annotations

import datetime
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

logger = logging.getLogger(__name__)


@dataclass
class LatencyStats:
    count: int = 0
    sum_ms: float = 0.0
    min_ms: float = 0.0
    max_ms: float = 0.0

    def add(self, duration_ms: float) -> None:
        if self.count == 0:
            self.min_ms = self.max_ms = duration_ms
        else:
            self.min_ms = min(self.min_ms, duration_ms)
            self.max_ms = max(self.max_ms, duration_ms)
        self.count += 1
        self.sum_ms += duration_ms

    def summary(self) -> dict:
        avg = self.sum_ms / self.count if self.count else 0.0
        return {
            "count": self.count,
            "min_ms": round(self.min_ms, 3),
            "avg_ms": round(avg, 3),
            "max_ms": round(self.max_ms, 3),
        }


class RunMetrics:
    """Collects per-phase step latencies and event counters. Thread-safe."""

    def __init__(self, run_name: str = "") -> None:
        self._lock = threading.Lock()
        self._run_name = run_name
        self._start_time = time.monotonic()
        self._start_wall = time.time()
        self._phases: dict[str, LatencyStats] = {}
        self._counters: dict[str, int] = {}

    def record_step(self, duration_ms: float, phase: str = "train") -> None:
        with self._lock:
            self._phases.setdefault(phase, LatencyStats()).add(duration_ms)

    def increment(self, counter: str, amount: int = 1) -> None:
        with self._lock:
            self._counters[counter] = self._counters.get(counter, 0) + amount

    def timer(self, phase: str = "train") -> _StepTimer:
        """Context manager recording the elapsed time of one step."""
        return _StepTimer(self, phase)

    def snapshot(self) -> dict:
        with self._lock:
            phases = {name: stats.summary() for name, stats in self._phases.items()}
            counters = dict(self._counters)
            raw = {name: asdict(stats) for name, stats in self._phases.items()}
        return {
            "run": self._run_name,
            "started": datetime.datetime.fromtimestamp(
                self._start_wall, tz=datetime.timezone.utc
            ).isoformat(),
            "elapsed_seconds": round(time.monotonic() - self._start_time, 3),
            "phases": phases,
            "counters": counters,
            "raw": raw,
            "system": collect_system_metrics(),
        }

    def save(self, path: str | Path) -> None:
        """Write the snapshot atomically; failures are logged, never raised."""
        path = Path(path)
        data = self.snapshot()
        tmp_path = path.with_suffix(".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp_path.write_text(json.dumps(data, indent=2, default=str), encoding="utf-8")
            os.replace(tmp_path, path)
        except OSError:
            logger.debug("Failed to write metrics file", exc_info=True)
            try:
                tmp_path.unlink(missing_ok=True)
            except OSError:
                pass


class _StepTimer:
    def __init__(self, metrics: RunMetrics, phase: str) -> None:
        self._metrics = metrics
        self._phase = phase
        self._t0 = 0.0

    def __enter__(self) -> _StepTimer:
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc: object) -> None:
        self._metrics.record_step((time.perf_counter() - self._t0) * 1000.0, self._phase)


def collect_system_metrics() -> dict:
    """Process CPU/RAM via psutil, or an error dict if psutil is unavailable."""
    try:
        import psutil
    except ImportError:
        return {"error": "psutil not installed"}

    try:
        vm = psutil.virtual_memory()
        proc = psutil.Process()
        return {
            "cpu_count": psutil.cpu_count(logical=True),
            "ram_percent": vm.percent,
            "process_ram_mb": round(proc.memory_info().rss / (1024 * 1024)),
            "process_cpu_seconds": round(sum(proc.cpu_times()[:2]), 3),
            "num_threads": proc.num_threads(),
        }
    except Exception as exc:
        return {"error": str(exc)[:200]}
