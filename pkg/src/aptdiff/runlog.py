"""Append-only CSV run logs.

Both logs have a header row and a fixed column order. Floats are written
with ``repr`` so a resumed run reproduces an unbroken run byte for byte.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable
from pathlib import Path

from aptdiff.constants import INDICATOR_LOG_COLUMNS, TRAINING_LOG_COLUMNS

logger = logging.getLogger(__name__)

_INT_COLUMNS = frozenset({"step", "t", "bin", "augmented"})


class LogParseError(ValueError):
    """Raised when a log row cannot be parsed; carries the 1-based line number."""

    def __init__(self, path: Path, lineno: int, message: str) -> None:
        super().__init__(f"{path.name} line {lineno}: {message}")
        self.lineno = lineno


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(column: str, raw: str) -> int | float:
    if column in _INT_COLUMNS:
        return int(raw)
    value = float(raw)
    if math.isnan(value):
        raise ValueError(f"column '{column}' is NaN")
    return value


class CsvLog:
    """A CSV file with a fixed header, appended to one row at a time."""

    def __init__(self, path: str | Path, columns: tuple[str, ...]) -> None:
        self.path = Path(path)
        self.columns = columns

    def _ensure_header(self) -> None:
        if self.path.exists() and self.path.stat().st_size > 0:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def append(self, row: dict) -> None:
        self.extend([row])

    def extend(self, rows: Iterable[dict]) -> None:
        self._ensure_header()
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in rows:
                missing = [c for c in self.columns if c not in row]
                if missing:
                    raise ValueError(f"Log row missing columns: {missing}")
                writer.writerow([_format(row[c]) for c in self.columns])

    def read(self) -> list[dict]:
        """Parse every row.

        Raises:
            LogParseError: On a wrong header, wrong field count or bad number.
        """
        if not self.path.exists():
            return []
        rows: list[dict] = []
        with self.path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return []
            if tuple(header) != self.columns:
                raise LogParseError(self.path, 1, f"unexpected header {header}")
            for lineno, fields in enumerate(reader, start=2):
                if not fields:
                    continue
                if len(fields) != len(self.columns):
                    raise LogParseError(
                        self.path,
                        lineno,
                        f"expected {len(self.columns)} fields, got {len(fields)}",
                    )
                try:
                    rows.append({c: _parse(c, f) for c, f in zip(self.columns, fields)})
                except ValueError as exc:
                    raise LogParseError(self.path, lineno, str(exc)) from None
        return rows

    def truncate_after(self, step: int) -> int:
        """Drop rows whose ``step`` exceeds ``step``; returns the number dropped."""
        if not self.path.exists():
            return 0
        lines = self.path.read_text(encoding="utf-8").splitlines(keepends=True)
        if not lines:
            return 0
        kept = [lines[0]]
        dropped = 0
        step_col = self.columns.index("step")
        for line in lines[1:]:
            fields = line.rstrip("\n").split(",")
            if fields and fields[0] and int(fields[step_col]) > step:
                dropped += 1
            else:
                kept.append(line)
        if dropped:
            tmp = self.path.with_suffix(".tmp")
            tmp.write_text("".join(kept), encoding="utf-8")
            tmp.replace(self.path)
            logger.warning("Truncated %d rows after step %d from %s", dropped, step, self.path.name)
        return dropped


class IndicatorLog(CsvLog):
    """(step, bin, ema_phi, ema_theta, gamma), one row per indicator update."""

    def __init__(self, path: str | Path) -> None:
        super().__init__(path, INDICATOR_LOG_COLUMNS)


class TrainingLog(CsvLog):
    """Per-step losses, indicator reading and augmentation record."""

    def __init__(self, path: str | Path) -> None:
        super().__init__(path, TRAINING_LOG_COLUMNS)
