"""Point-cloud and depth-map quality metrics.

Distances follow the DTU protocol: accuracy is the mean distance from each
reconstructed point to the nearest reference point, completeness the
reverse, both clamped at ``max_dist``. Precision and recall count the
points within a threshold, and the f-score is their harmonic mean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DepthMap


class MetricError(ValueError):
    pass


@dataclass
class DepthErrorStats:
    mae: float
    rmse: float
    within: float  # fraction of shared pixels within the tolerance
    n: int


@dataclass
class MetricReport:
    accuracy: float
    completeness: float
    overall: float
    precision: float
    recall: float
    f_score: float
    threshold: float
    mae: float | None = None
    rmse: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _points(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise MetricError("point cloud is empty")
    return pts


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest neighbor in ``dst``."""
    d, _ = cKDTree(_points(dst)).query(_points(src), k=1)
    return d


def accuracy_completeness(recon, reference, max_dist: float = 20.0) -> tuple[float, float, float]:
    acc = float(np.minimum(nearest_distances(recon, reference), max_dist).mean())
    comp = float(np.minimum(nearest_distances(reference, recon), max_dist).mean())
    return acc, comp, (acc + comp) / 2.0


def f_score(recon, reference, threshold: float) -> tuple[float, float, float]:
    if not threshold > 0:
        raise MetricError("f-score threshold must be positive")
    precision = float(np.mean(nearest_distances(recon, reference) <= threshold))
    recall = float(np.mean(nearest_distances(reference, recon) <= threshold))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f


def depth_error_stats(estimated: DepthMap, truth: DepthMap, tolerance: float | None = None) -> DepthErrorStats:
    """Error statistics over pixels valid in both maps."""
    if estimated.shape != truth.shape:
        raise MetricError(f"depth maps differ in shape: {estimated.shape} vs {truth.shape}")
    both = estimated.mask & truth.mask
    if not both.any():
        raise MetricError("depth maps share no valid pixel")
    err = np.abs(estimated.values[both].astype(np.float64) - truth.values[both].astype(np.float64))
    within = float(np.mean(err <= tolerance)) if tolerance is not None else float("nan")
    return DepthErrorStats(float(err.mean()), float(np.sqrt(np.mean(err**2))), within, int(both.sum()))


def evaluate(recon, reference, threshold: float, max_dist: float = 20.0,
             depths=None, truths=None) -> MetricReport:
    """Full report; depth statistics are pooled over views when maps are given."""
    acc, comp, overall = accuracy_completeness(recon, reference, max_dist)
    p, r, f = f_score(recon, reference, threshold)
    mae = rmse = None
    if depths is not None and truths is not None:
        errs = []
        for d, t in zip(depths, truths):
            both = d.mask & t.mask
            errs.append(np.abs(d.values[both].astype(np.float64) - t.values[both].astype(np.float64)))
        e = np.concatenate(errs) if errs else np.zeros(0)
        if len(e):
            mae, rmse = float(e.mean()), float(np.sqrt(np.mean(e**2)))
    return MetricReport(acc, comp, overall, p, r, f, threshold, mae, rmse)


def pixel_footprint(depths, cameras) -> float:
    """Median world size of one pixel, ``depth / focal``, over all valid pixels."""
    vals = [d.values[d.mask] / c.focal for d, c in zip(depths, cameras) if d.mask.any()]
    if not vals:
        raise MetricError("no valid depth to measure a footprint")
    return float(np.median(np.concatenate(vals)))
