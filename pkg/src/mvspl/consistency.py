"""Cross-view geometric consistency of depth maps and the vote filter.

Each reference pixel is lifted to 3D with its own depth, projected into a
source view, lifted again with the source depth found there (bilinear),
and carried back into the reference frame. The depth discrepancy of that
round trip is the reprojection error; a pixel survives when enough source
views agree within ``r_max``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Camera, DepthMap, bilinear_sample, relative_pose, reproject_pixels


class ConsistencyError(ValueError):
    pass


@dataclass
class ReprojectionErrorMap:
    values: np.ndarray
    mask: np.ndarray
    source: int = -1


@dataclass
class FilterResult:
    depth: DepthMap
    votes: np.ndarray  # (H, W) count of agreeing source views


def neighbor_span(depth: DepthMap, x, y) -> np.ndarray:
    """Range (max - min) of the valid depths among the 4 bilinear neighbors of each sample."""
    H, W = depth.shape
    xs = np.where(np.isfinite(x), x, 0.0)
    ys = np.where(np.isfinite(y), y, 0.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    lo = np.full(xs.shape, np.inf)
    hi = np.full(xs.shape, -np.inf)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        v = depth.values[yy, xx]
        ok = depth.mask[yy, xx]
        lo = np.where(ok, np.minimum(lo, v), lo)
        hi = np.where(ok, np.maximum(hi, v), hi)
    return np.where(hi >= lo, hi - lo, 0.0)


def reprojection_error(depth_i: DepthMap, depth_j: DepthMap, cam_i: Camera, cam_j: Camera,
                       max_span: float | None = None, source: int = -1) -> ReprojectionErrorMap:
    """Round-trip depth discrepancy ``|D_i(x) - d_ji(x)|`` for every pixel of view i.

    ``max_span`` invalidates samples whose bilinear neighborhood in view j
    spans a larger depth range (a foreground/background blend).
    """
    if not depth_i.mask.any() or not depth_j.mask.any():
        raise ConsistencyError("both depth maps need valid pixels")
    xs, ys, _ = reproject_pixels(np.where(depth_i.mask, depth_i.values, 1.0), cam_i, cam_j)
    d_j, ok = bilinear_sample(depth_j.values, xs, ys, depth_j.mask)
    ok &= depth_i.mask
    if max_span is not None:
        ok &= neighbor_span(depth_j, xs, ys) <= max_span
    # lift the sampled source depth and carry it back into view i
    pts = np.stack([np.where(ok, xs, 0.0), np.where(ok, ys, 0.0), np.ones_like(xs)], axis=-1)
    X_j = (pts @ cam_j.K_inv.T) * d_j[..., None]
    R_ij, T_ij = relative_pose(cam_i, cam_j)
    X_ji = (X_j - T_ij) @ R_ij  # R_ij^-1 = R_ij^T
    r = np.abs(depth_i.values - X_ji[..., 2])
    ok &= np.isfinite(r)
    return ReprojectionErrorMap(np.where(ok, r, 0.0), ok, source)


def consistency_vote(r, r_max: float, valid=True):
    """1 where the error is valid and within ``r_max`` (inclusive), else 0."""
    r = np.asarray(r, dtype=np.float64)
    out = (np.asarray(valid, dtype=bool) & (r <= r_max)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def filter_depth(depth_i: DepthMap, sources: Sequence[DepthMap], cam_i: Camera, cams_src: Sequence[Camera],
                 r_max: float, n_min: int, strict: bool = True, guard: float | None = 10.0) -> FilterResult:
    """Keep pixels of ``depth_i`` confirmed by more than ``n_min`` source views.

    With ``strict=False`` the rule becomes ``votes >= n_min``. Kept depths
    pass through unchanged.
    """
    if len(sources) == 0:
        raise ConsistencyError("filtering needs at least one source view")
    if not r_max > 0:
        raise ConsistencyError("r_max must be positive")
    votes = np.zeros(depth_i.shape, dtype=np.int64)
    span = guard * r_max if guard is not None else None
    if depth_i.mask.any():
        for k, (d_j, cam_j) in enumerate(zip(sources, cams_src)):
            if not d_j.mask.any():
                continue
            err = reprojection_error(depth_i, d_j, cam_i, cam_j, span, source=k)
            votes += consistency_vote(err.values, r_max, err.mask)
    keep = (votes > n_min) if strict else (votes >= n_min)
    keep &= depth_i.mask
    return FilterResult(DepthMap(np.where(keep, depth_i.values, 0.0).astype(depth_i.values.dtype), keep), votes)
