"""Counting metrics, grouped evaluation tables and embedding diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import silhouette_score

from .config import NORMAL_CLASS
from .datagen import CrowdSample

ADVERSE_GROUP = "adverse"
TOTAL_GROUP = "total"


def count_of(density: np.ndarray) -> float:
    """Predicted count: total mass of the density map."""
    return float(np.asarray(density).sum())


def mae_rmse(preds, gts) -> tuple[float, float]:
    """Mean absolute and root mean squared error over paired counts."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 1 or preds.size == 0:
        raise ValueError("preds and gts must be equal-length nonempty 1-D sequences")
    err = preds - gts
    return float(np.abs(err).mean()), float(np.sqrt((err**2).mean()))


@dataclass
class MetricsRow:
    group: str
    n: int
    mae: float | None
    rmse: float | None


@dataclass
class MetricsTable:
    rows: list[MetricsRow]
    metadata: dict = field(default_factory=dict)

    def row(self, group: str) -> MetricsRow:
        for r in self.rows:
            if r.group == group:
                return r
        raise KeyError(group)


def _group_row(name: str, errs: list[float]) -> MetricsRow:
    if not errs:
        return MetricsRow(group=name, n=0, mae=None, rmse=None)
    arr = np.asarray(errs)
    return MetricsRow(
        group=name,
        n=len(errs),
        mae=float(np.abs(arr).mean()),
        rmse=float(np.sqrt((arr**2).mean())),
    )


def grouped_eval(
    predictor,
    samples: list[CrowdSample],
    classes: tuple[str, ...],
    metadata: dict | None = None,
) -> MetricsTable:
    """Per-class + normal/adverse/total counting errors over a sample list.

    ``predictor`` needs a ``predict_density(image) -> 2-D array`` method.
    Classes with no samples keep a row with ``n=0`` and absent metrics; the
    adverse row aggregates every non-normal class.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")
    errs_by_class: dict[int, list[float]] = {c: [] for c in range(len(classes))}
    for s in samples:
        err = count_of(predictor.predict_density(s.image)) - len(s.points)
        errs_by_class[s.weather].append(err)

    rows = [_group_row(classes[c], errs_by_class[c]) for c in range(len(classes))]
    adverse = [e for c, errs in errs_by_class.items() if c != NORMAL_CLASS for e in errs]
    rows.append(_group_row(ADVERSE_GROUP, adverse))
    rows.append(_group_row(TOTAL_GROUP, [e for errs in errs_by_class.values() for e in errs]))
    return MetricsTable(rows=rows, metadata=dict(metadata or {}))


def cluster_separation(vectors: np.ndarray, labels) -> float:
    """Mean silhouette coefficient of the embeddings under cosine distance."""
    vectors = np.asarray(vectors)
    labels = np.asarray(labels)
    if vectors.ndim != 2 or vectors.shape[0] != labels.shape[0]:
        raise ValueError("vectors must be (n, d) with one label per row")
    uniques, counts = np.unique(labels, return_counts=True)
    if len(uniques) < 2:
        raise ValueError("silhouette needs at least 2 classes")
    if (counts < 2).any():
        raise ValueError("silhouette needs at least 2 points per class")
    return float(silhouette_score(vectors, labels, metric="cosine"))


def adverse_domain_pull(bundle, samples: list[CrowdSample],
                        normal_class: int = NORMAL_CLASS) -> float:
    """Mean cosine between adverse-image embeddings and the normal-key centroid.

    The quantity the refinement stage is meant to increase: how close the
    (refined, when a refiner exists) embeddings of adverse-weather images sit
    to the center of the stored normal-weather keys.
    """
    centroid = bundle.normal_centroid(normal_class)
    centroid = centroid / (np.linalg.norm(centroid) + 1e-12)
    sims = [
        float(bundle.embed(s.image) @ centroid)
        for s in samples if s.weather != normal_class
    ]
    if not sims:
        raise ValueError("no adverse-weather samples to measure")
    return float(np.mean(sims))


def merge_tables(a: MetricsTable, b: MetricsTable) -> MetricsTable:
    """Size-weighted merge of two tables computed over disjoint sample sets.

    MAE merges as a weighted mean; RMSE through the merged mean of squares.
    """
    groups = [r.group for r in a.rows]
    if groups != [r.group for r in b.rows]:
        raise ValueError("tables have different group layouts")
    merged = []
    for ra, rb in zip(a.rows, b.rows):
        n = ra.n + rb.n
        if n == 0:
            merged.append(MetricsRow(ra.group, 0, None, None))
            continue
        mae = ((ra.mae or 0.0) * ra.n + (rb.mae or 0.0) * rb.n) / n
        msq = ((ra.rmse or 0.0) ** 2 * ra.n + (rb.rmse or 0.0) ** 2 * rb.n) / n
        merged.append(MetricsRow(ra.group, n, mae, math.sqrt(msq)))
    return MetricsTable(rows=merged, metadata={**a.metadata, **b.metadata})
