"""Hamming ranking, mAP@all and precision-recall curves over packed binary codes."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DIRECTIONS = ("I2T", "T2I")


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Popcount of ``a xor b`` for two packed codes of equal length."""
    a = np.asarray(a, dtype=np.uint8).ravel()
    b = np.asarray(b, dtype=np.uint8).ravel()
    if a.shape != b.shape:
        raise ValueError(f"code lengths differ: {a.size * 8} vs {b.size * 8} bits")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_matrix(query: np.ndarray, database: np.ndarray, chunk: int = 256) -> np.ndarray:
    """(Q, N) Hamming distances between packed query and database rows."""
    query = np.atleast_2d(np.asarray(query, dtype=np.uint8))
    database = np.atleast_2d(np.asarray(database, dtype=np.uint8))
    if query.shape[1] != database.shape[1]:
        raise ValueError(f"code lengths differ: {query.shape[1] * 8} vs {database.shape[1] * 8} bits")
    out = np.empty((query.shape[0], database.shape[0]), dtype=np.int32)
    for start in range(0, query.shape[0], chunk):
        q = query[start : start + chunk, None, :]
        out[start : start + chunk] = np.bitwise_count(q ^ database[None]).sum(axis=-1)
    return out


@dataclass
class RetrievalTask:
    direction: str
    query_codes: np.ndarray  # packed (Q, K/8)
    database_codes: np.ndarray  # packed (N, K/8)
    relevance: np.ndarray  # (Q, N) in {0, 1}
    bits: int

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if len(self.database_codes) == 0:
            raise ValueError("database is empty")
        expected = (len(self.query_codes), len(self.database_codes))
        if self.relevance.shape != expected:
            raise ValueError(f"relevance shape {self.relevance.shape} != {expected}")

    def distances(self) -> np.ndarray:
        return hamming_matrix(self.query_codes, self.database_codes)


@dataclass
class MapResult:
    mean_ap: float
    per_query_ap: list[float | None]
    excluded_queries: list[int] = field(default_factory=list)


def map_at_all(task: RetrievalTask, distances: np.ndarray | None = None) -> MapResult:
    """Average precision over the full ranking, ties broken by database index.

    Queries without any relevant database item are excluded and listed.
    """
    dist = task.distances() if distances is None else distances
    rel = np.asarray(task.relevance, dtype=np.float64)
    order = np.argsort(dist, axis=1, kind="stable")
    ranked = np.take_along_axis(rel, order, axis=1)
    hits = np.cumsum(ranked, axis=1)
    precision_at = hits / np.arange(1, ranked.shape[1] + 1)
    num_rel = ranked.sum(axis=1)
    scored = num_rel > 0
    ap = np.where(scored, (precision_at * ranked).sum(axis=1) / np.maximum(num_rel, 1), np.nan)
    per_query = [float(v) if s else None for v, s in zip(ap, scored)]
    mean_ap = float(ap[scored].mean()) if scored.any() else 0.0
    return MapResult(mean_ap, per_query, [int(i) for i in np.flatnonzero(~scored)])


def pr_curve(task: RetrievalTask, mode: str = "radius", cutoffs=None, distances: np.ndarray | None = None) -> list[tuple[float, float]]:
    """Micro-averaged (recall, precision) points over scored queries.

    ``radius`` mode gives one point per Hamming radius 0..K (items with
    distance <= r are retrieved); ``rank`` mode one point per top-k cutoff.
    With nothing retrieved, precision is reported as 1.0.
    """
    dist = task.distances() if distances is None else distances
    rel = np.asarray(task.relevance, dtype=bool)
    scored = rel.any(axis=1)
    dist, rel = dist[scored], rel[scored]
    total_rel = rel.sum()
    points = []
    if mode == "radius":
        for r in range(task.bits + 1):
            retrieved = dist <= r
            n_ret = retrieved.sum()
            tp = (retrieved & rel).sum()
            points.append(_point(tp, n_ret, total_rel))
    elif mode == "rank":
        n = dist.shape[1]
        cutoffs = cutoffs if cutoffs is not None else np.unique(np.linspace(1, n, min(n, 50)).astype(int))
        order = np.argsort(dist, axis=1, kind="stable")
        hits = np.cumsum(np.take_along_axis(rel, order, axis=1), axis=1)
        for k in cutoffs:
            tp = hits[:, k - 1].sum()
            points.append(_point(tp, k * len(dist), total_rel))
    else:
        raise ValueError(f"unknown PR mode {mode!r}")
    return points


def _point(tp, retrieved, relevant) -> tuple[float, float]:
    recall = float(tp / relevant) if relevant else 0.0
    precision = float(tp / retrieved) if retrieved else 1.0
    return recall, precision


@dataclass
class RetrievalReport:
    direction: str
    K: int
    mAP: float
    per_query_ap: list[float | None]
    pr_points: list[tuple[float, float]]
    excluded_queries: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pr_points"] = [list(p) for p in self.pr_points]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalReport":
        d = dict(d)
        d["pr_points"] = [tuple(p) for p in d["pr_points"]]
        return cls(**d)


def evaluate_task(task: RetrievalTask, pr_mode: str = "radius") -> RetrievalReport:
    dist = task.distances()
    result = map_at_all(task, dist)
    return RetrievalReport(task.direction, task.bits, result.mean_ap, result.per_query_ap,
                           pr_curve(task, pr_mode, distances=dist), result.excluded_queries)


def write_report(report: RetrievalReport, directory: str | Path, stem: str | None = None) -> tuple[Path, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{report.direction.lower()}_{report.K}"
    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2))
    csv_path = out / f"{stem}_pr.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "K", "recall", "precision"])
        for recall, precision in report.pr_points:
            w.writerow([report.direction, report.K, recall, precision])
    return json_path, csv_path
