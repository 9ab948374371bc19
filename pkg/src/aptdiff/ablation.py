"""Ablation suite: base fine-tuning, +ATA, +RS and +AA (the full method).

Each variant is an independent personalization run with shared seeds. Runs
share no mutable state, so they can execute sequentially or in a process
pool; every run uses a single intra-op thread so results are identical
either way.
"""

from __future__ import annotations

import concurrent.futures
import contextlib
import csv
import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import torch

from aptdiff.config import ExperimentConfig, ablation_dir, run_dir, variant_name
from aptdiff.constants import ABLATION_COLUMNS
from aptdiff.corpus import CorpusItem
from aptdiff.diagnostics import delta_noise_for_run, gamma_report
from aptdiff.runlog import TrainingLog
from aptdiff.trainer import personalize

logger = logging.getLogger(__name__)

# (ata, rs, aa); each variant adds one component
VARIANTS: tuple[tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, True, True),
)

TABLE_FILE = "ablation.csv"


@dataclass
class AblationResult:
    table_path: Path
    rows: list[dict]
    plots: list[Path]
    out_dir: Path


@contextlib.contextmanager
def single_thread() -> Iterator[None]:
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _run_variant(
    config_dict: dict,
    flags: tuple[bool, bool, bool],
    references: list[CorpusItem],
    prior_path: str,
    runs_root: str,
    out_dir: str,
) -> dict:
    """Train one variant and evaluate it. Top-level so process pools can pickle it."""
    ata, rs, aa = flags
    config = ExperimentConfig.from_dict(config_dict).with_apt(ata=ata, rs=rs, aa=aa)
    name = variant_name(ata, rs, aa)
    with single_thread():
        result = personalize(
            references, config.apt, prior_path, run_dir(runs_root, config)
        )
        report = delta_noise_for_run(
            result.run_dir,
            config.apt.num_probes,
            config.apt.probe_seed,
            config.apt.delta_noise_conditioning,
        )
    gammas = gamma_report(
        result.indicator_log, config.apt.bins, Path(out_dir) / f"gamma_{name}.png"
    )
    rows = TrainingLog(result.training_log).read()
    logger.info("Variant %s finished: delta noise %.6g", name, report.final)
    return {
        "variant": name,
        "ata": ata,
        "rs": rs,
        "aa": aa,
        "steps": config.apt.steps,
        "delta_noise_first": report.first,
        "delta_noise_final": report.final,
        "gamma_low_noise_final": gammas.low_noise_mean,
        "gamma_high_noise_final": gammas.high_noise_mean,
        "final_total_loss": rows[-1]["total"] if rows else 0.0,
        "_plot": str(gammas.plot_path),
    }


def _cell(value: object) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(rows: list[dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in ABLATION_COLUMNS])
    return path


def run_ablation_suite(
    config: ExperimentConfig,
    reference_set: list[CorpusItem],
    prior_path: str | Path,
    runs_root: str | Path,
    max_workers: int = 1,
) -> AblationResult:
    """Train the four variants and write the comparison table and gamma plots.

    ``prior_path`` must point at a saved prior checkpoint so worker processes
    can load it.
    """
    if max_workers < 1:
        raise ValueError("max_workers must be >= 1")
    prior_path = Path(prior_path)
    if not prior_path.is_file():
        raise FileNotFoundError(f"Prior checkpoint not found: {prior_path.name}")
    out_dir = ablation_dir(runs_root, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    args = [
        (config.to_dict(), flags, reference_set, str(prior_path), str(runs_root), str(out_dir))
        for flags in VARIANTS
    ]
    logger.info("Running %d ablation variants (max_workers=%d)", len(args), max_workers)

    if max_workers == 1:
        rows = [_run_variant(*a) for a in args]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(_run_variant, *a) for a in args]
            rows = [f.result() for f in futures]

    plots = [Path(row.pop("_plot")) for row in rows]
    table = write_table(rows, out_dir / TABLE_FILE)
    logger.info("Ablation table written to %s", table.name)
    return AblationResult(table_path=table, rows=rows, plots=plots, out_dir=out_dir)
