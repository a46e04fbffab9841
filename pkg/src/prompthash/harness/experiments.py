"""Ablation table, one-weight-at-a-time sweeps and the gradient suite."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..hashing import SUPPORTED_BITS, WEIGHT_NAMES
from ..retrieval import DIRECTIONS
from .config import VARIANTS, ExperimentConfig
from .training import train_and_evaluate

log = logging.getLogger(__name__)

DEFAULT_SWEEP_GRIDS: dict[str, tuple[float, ...]] = {
    "alpha": (1.0, 5.0, 10.0),
    "beta": (1.0, 5.0, 10.0),
    "gamma": (0.001, 0.005, 0.05),
    "mu": (1.0, 5.0, 20.0),
    "sigma": (0.05, 0.1, 1.0),
    "zeta": (0.0001, 0.001, 0.01),
}


@dataclass
class Cell:
    variant: str
    bits: int
    seed: int
    mAP: dict[str, float | None] = field(default_factory=dict)
    error: str | None = None


def _run_cell(config: ExperimentConfig) -> Cell:
    cell = Cell(config.variant, config.bits, config.seed)
    try:
        report = train_and_evaluate(config).report
        cell.mAP = {d: report.map(d) for d in DIRECTIONS}
    except Exception as exc:  # recorded in the table, the run continues
        log.warning("variant %s K=%d seed=%d failed: %s", config.variant, config.bits, config.seed, exc)
        cell.mAP = dict.fromkeys(DIRECTIONS)
        cell.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return cell


def _run_all(configs: list[ExperimentConfig], workers: int) -> list[Cell]:
    if workers <= 1:
        return [_run_cell(c) for c in configs]
    with ProcessPoolExecutor(workers) as pool:
        # map preserves input order, so the merged table does not depend on scheduling
        return list(pool.map(_run_cell, configs))


@dataclass
class AblationTable:
    cells: list[Cell]

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(c.variant for c in self.cells))

    @property
    def bits(self) -> list[int]:
        return sorted({c.bits for c in self.cells})

    def mean(self, variant: str, bits: int, direction: str) -> float | None:
        values = [c.mAP[direction] for c in self.cells if c.variant == variant and c.bits == bits]
        if not values or any(v is None for v in values):
            return None
        return sum(values) / len(values)

    def rows(self, direction: str) -> list[dict]:
        """One row per variant with a column per code length."""
        return [
            {"direction": direction, "variant": v, **{str(k): self.mean(v, k, direction) for k in self.bits}}
            for v in self.variants
        ]

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / "ablation.json"
        json_path.write_text(json.dumps([asdict(c) for c in self.cells], indent=2))
        csv_path = out / "ablation.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["direction", "variant", *self.bits])
            for direction in DIRECTIONS:
                for row in self.rows(direction):
                    w.writerow([direction, row["variant"], *("FAILED" if row[str(k)] is None else f"{row[str(k)]:.4f}" for k in self.bits)])
        return json_path, csv_path


def run_ablation(
    config: ExperimentConfig,
    bits: tuple[int, ...] = SUPPORTED_BITS,
    seeds: tuple[int, ...] | None = None,
    variants: tuple[str, ...] = tuple(VARIANTS),
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> AblationTable:
    """Train and evaluate every variant at every code length, sharing seeds across variants."""
    seeds = seeds if seeds is not None else (config.seed,)
    configs = [
        replace(config.with_seed(s), variant=v, bits=k)
        for v in variants for k in bits for s in seeds
    ]
    table = AblationTable(_run_all(configs, workers))
    if out_dir is not None:
        table.write(out_dir)
    return table


@dataclass
class SweepPoint:
    weight: str
    value: float
    mAP_I2T: float | None
    mAP_T2I: float | None
    error: str | None = None


def sweep(
    config: ExperimentConfig,
    grids: dict[str, tuple[float, ...]] | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> dict[str, list[SweepPoint]]:
    """Vary one loss weight at a time, the rest at their configured values."""
    grids = DEFAULT_SWEEP_GRIDS if grids is None else grids
    unknown = set(grids) - set(WEIGHT_NAMES)
    if unknown:
        raise ValueError(f"unknown weights {sorted(unknown)}; choose from {WEIGHT_NAMES}")
    if any(len(g) == 0 for g in grids.values()):
        raise ValueError("every sweep grid needs at least one value")
    jobs = [(name, value) for name, grid in grids.items() for value in grid]
    configs = [replace(config, weights=replace(config.weights, **{name: value})) for name, value in jobs]
    cells = _run_all(configs, workers)
    series: dict[str, list[SweepPoint]] = {name: [] for name in grids}
    for (name, value), cell in zip(jobs, cells):
        series[name].append(SweepPoint(name, value, cell.mAP["I2T"], cell.mAP["T2I"], cell.error))
    if out_dir is not None:
        write_sweep(series, out_dir)
    return series


def write_sweep(series: dict[str, list[SweepPoint]], directory: str | Path) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["weight", "value", "mAP_I2T", "mAP_T2I", "error"])
        for points in series.values():
            for p in points:
                w.writerow([p.weight, p.value, p.mAP_I2T, p.mAP_T2I, p.error or ""])
    return path
