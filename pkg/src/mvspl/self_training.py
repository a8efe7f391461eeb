"""Iterative pseudo-label refinement.

One iteration runs: label-guided inference at low resolution, refinement
at high resolution, the cross-view vote filter, fusion into a point cloud,
surface reconstruction, and rendering of the surface back into every view
at low resolution. The rendered maps become the labels that guide the next
iteration's inference.

Every stage output is stored as float32, the precision of the PFM files
written between CLI stages, so a run chained through files and an
in-memory run produce identical results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .consistency import filter_depth
from .evaluation import MetricError, depth_error_stats, evaluate, pixel_footprint
from .fusion_render import (EmptyCloudError, DegenerateInputError, PointCloud, TriangleMesh,
                            fuse_point_cloud, reconstruct_surface, render_depth)
from .geometry import DepthMap
from .photometric_loss import (LossError, pseudo_agreement, score_synthesis,
                               synthesis_gate, synthesis_loss_map, synthesize_views)
from .plane_sweep import (build_hypotheses_coarse, downsample_label,
                          finest_interval, infer_depth_pyramid, level_inputs, refine_high_resolution)
from .scene_io import (Config, Scene, save_depth_pfm, save_mesh_ply, save_pointcloud_ply, view_name)

log = logging.getLogger("mvspl")

MISSING_TOLERANCE = 1e-3  # largest fraction of new labels absent from the previous set at convergence
LOW_COVERAGE = 0.10  # below this label coverage the scene is reported as unsupported


class StageError(RuntimeError):
    """A pipeline stage produced no usable output."""

    def __init__(self, stage: str, message: str, iteration: int | None = None, view: int | None = None):
        where = [f"stage={stage}"]
        if iteration is not None:
            where.append(f"iteration={iteration}")
        if view is not None:
            where.append(f"view={view}")
        super().__init__(f"{' '.join(where)}: {message}")
        self.stage, self.iteration, self.view = stage, iteration, view


@dataclass
class Derived:
    """Scale-dependent defaults resolved against a scene."""

    finest_interval: float
    r_max: float
    eps_stop: float
    f_threshold: float
    voxel_size: float | None


def resolve(scene: Scene, config: Config) -> Derived:
    intervals = [finest_interval(c, config.hypotheses_coarse, config.pyramid_levels_coarse, scene.low_factor)
                 for c in scene.cameras_high]
    fine = float(np.median(intervals))
    r_max = config.r_max if config.r_max is not None else 0.5 * fine
    eps = config.eps_stop if config.eps_stop is not None else 0.01 * fine
    if config.f_threshold is not None:
        f_thr = config.f_threshold
    else:
        # mid-range depth over focal length: the high-resolution pixel footprint
        feet = [0.5 * (c.d_min + c.d_max) / c.focal for c in scene.cameras_high]
        if scene.gt_depths_low is not None:
            try:
                feet = [pixel_footprint(scene.gt_depths_low, scene.cameras_low) / scene.low_factor]
            except MetricError:
                pass
        f_thr = 2.5 * float(np.median(feet))
    return Derived(fine, r_max, eps, f_thr, config.voxel_size)


def _map(fn: Callable, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _f32(depth: DepthMap) -> DepthMap:
    return DepthMap(np.where(depth.mask, depth.values, 0.0).astype(np.float32), depth.mask.copy())


# ---------------------------------------------------------------------------
# stages


def stage_infer(scene: Scene, config: Config, labels=None, iteration: int | None = None):
    """Low-resolution depth per view (guided by ``labels`` when given); returns per-view level lists."""
    def one(v):
        label = labels[v] if labels is not None else None
        return infer_depth_pyramid(scene.images_low, scene.cameras_low, v, scene.pairs[v],
                                   config.pyramid_levels_coarse, config.hypotheses_coarse,
                                   config.hypotheses_fine, config.softmax_temperature,
                                   label=label, prior_weight=config.prior_bias if label is not None else 0.0)
    levels = _map(one, range(scene.n_views), config.jobs)
    for v, lv in enumerate(levels):
        if not lv[-1].depth.mask.any():
            raise StageError("infer", "no valid depth", iteration, v)
    return levels


def stage_refine(scene: Scene, config: Config, depths, iteration: int | None = None) -> list[DepthMap]:
    def one(v):
        return _f32(refine_high_resolution(scene.images_high, scene.cameras_high, v, scene.pairs[v],
                                           depths[v], config.pyramid_levels_coarse,
                                           config.pyramid_levels_fine, config.hypotheses_coarse,
                                           config.hypotheses_fine, config.softmax_temperature))
    return _map(one, range(scene.n_views), config.jobs)


def stage_filter(scene: Scene, config: Config, depths, iteration: int | None = None):
    """Vote filter on full-resolution depths; returns ``(kept, votes)`` lists."""
    r_max = resolve(scene, config).r_max

    def one(v):
        src = scene.pairs[v]
        res = filter_depth(depths[v], [depths[j] for j in src], scene.cameras_high[v],
                           [scene.cameras_high[j] for j in src], r_max, config.n_min,
                           strict=config.vote_strict, guard=config.discontinuity_guard)
        return _f32(res.depth), res.votes
    out = _map(one, range(scene.n_views), config.jobs)
    return [o[0] for o in out], [o[1] for o in out]


def stage_fuse(scene: Scene, depths, iteration: int | None = None) -> PointCloud:
    try:
        return fuse_point_cloud(depths, scene.cameras_high)
    except EmptyCloudError as exc:
        raise StageError("fuse", str(exc), iteration) from exc


def stage_reconstruct(scene: Scene, config: Config, cloud: PointCloud,
                      iteration: int | None = None) -> TriangleMesh:
    shapes = [im.shape[:2] for im in scene.images_high]
    try:
        mesh = reconstruct_surface(cloud, scene.cameras_high, shapes, config.voxel_size,
                                   config.truncation_voxels, config.max_hole_voxels)
    except DegenerateInputError as exc:
        raise StageError("reconstruct", str(exc), iteration) from exc
    if mesh.is_empty:
        raise StageError("reconstruct", "surface reconstruction produced an empty mesh", iteration)
    return mesh


def stage_render(scene: Scene, config: Config, mesh: TriangleMesh, iteration: int | None = None) -> list[DepthMap]:
    shape = scene.resolution_low

    def one(v):
        return _f32(render_depth(mesh, scene.cameras_low[v], shape))
    return _map(one, range(scene.n_views), config.jobs)


def initial_labels(scene: Scene, config: Config, levels=None):
    """Unguided inference gated by per-pixel synthesis quality.

    A pixel keeps its depth when its windowed synthesis loss under the
    inferred probabilities clearly beats the loss under a uniform
    distribution over the full depth range. Returns ``(labels, losses)``.
    """
    if levels is None:
        levels = stage_infer(scene, config, iteration=0)

    def one(v):
        last = levels[v][-1]
        ref_img, srcs, cam, cams = level_inputs(scene.images_low, scene.cameras_low, v, scene.pairs[v], 1)
        syn = synthesize_views(ref_img, srcs, cam, cams, last.hypotheses, last.probability)
        try:
            breakdown = score_synthesis(syn, ref_img, last.depth, config.alphas, config.ssim_window)
        except LossError:
            breakdown = None
        est, est_ok = synthesis_loss_map(syn, ref_img, last.depth, config.alphas,
                                         config.gate_window, config.ssim_window)
        uniform = build_hypotheses_coarse(cam.d_min, cam.d_max, config.hypotheses_coarse)
        P = np.full(ref_img.shape[:2] + (uniform.count,), 1.0 / uniform.count)
        base_syn = synthesize_views(ref_img, srcs, cam, cams, uniform, P)
        base, base_ok = synthesis_loss_map(base_syn, ref_img, None, config.alphas,
                                           config.gate_window, config.ssim_window)
        keep = synthesis_gate(est, est_ok, base, base_ok, config.gate_ratio, config.gate_margin)
        keep &= last.depth.mask
        return _f32(DepthMap(np.where(keep, last.depth.values, 0.0), keep)), breakdown
    out = _map(one, range(scene.n_views), config.jobs)
    return [o[0] for o in out], [o[1] for o in out]


# ---------------------------------------------------------------------------
# state and loop


@dataclass
class PipelineState:
    scene: Scene
    config: Config
    labels: list[DepthMap]
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    converged: bool = False

    @property
    def derived(self) -> Derived:
        return resolve(self.scene, self.config)


def label_pyramid(depth: DepthMap, levels: int) -> list[DepthMap]:
    """The label at its own resolution and at each coarser pyramid level, finest first."""
    out = [depth]
    h, w = depth.shape
    for lvl in range(1, levels):
        f = 2**lvl
        out.append(downsample_label(depth, (h // f, w // f)))
    return out


def agreement(estimated: list[DepthMap], labels: list[DepthMap], levels: int, require_estimate: bool):
    """Pooled L1 agreement over views; ``Omega`` is the label mask (and the estimate's when required).

    Returns ``(raw, mean, missing_fraction)`` where the last counts label
    pixels the estimate lacks.
    """
    raw, n, missing, total = 0.0, 0, 0, 0
    for e, p in zip(estimated, labels):
        ep, pp = label_pyramid(e, levels), label_pyramid(p, levels)
        omega = [a.mask & b.mask if require_estimate else b.mask for a, b in zip(ep, pp)]
        missing += int(p.mask.sum() - (p.mask & e.mask).sum())
        total += int(p.mask.sum())
        if any(o.any() for o in omega):
            a = pseudo_agreement(ep, pp, omega)
            raw += a.raw
            n += a.n_valid
    mean = raw / n if n else float("inf")
    return raw, mean, (missing / total if total else 1.0)


def _evaluate_labels(scene: Scene, labels, derived: Derived, config: Config) -> dict:
    coverage = float(np.mean([d.mask.mean() for d in labels]))
    row = {"coverage": coverage, "low_coverage": coverage < LOW_COVERAGE}
    if coverage < LOW_COVERAGE:
        log.warning("pseudo-label coverage %.2f%% is below %.0f%%; the views likely lack texture",
                    100 * coverage, 100 * LOW_COVERAGE)
    if scene.gt_depths_low is None:
        return row
    gt = scene.gt_depths_low
    gt_valid = sum(int(g.mask.sum()) for g in gt)
    row["completeness_px"] = sum(int((d.mask & g.mask).sum()) for d, g in zip(labels, gt)) / max(gt_valid, 1)
    tol = derived.f_threshold
    try:
        rep = evaluate(fuse_point_cloud(labels, scene.cameras_low), fuse_point_cloud(gt, scene.cameras_low),
                       tol, config.max_dist, labels, gt)
    except (EmptyCloudError, MetricError):
        row.update({"f_score": 0.0, "precision": 0.0, "recall": 0.0})
        return row
    row.update({"f_score": rep.f_score, "precision": rep.precision, "recall": rep.recall,
                "accuracy": rep.accuracy, "completeness": rep.completeness, "overall": rep.overall,
                "mae": rep.mae, "rmse": rep.rmse})
    within = []
    for d, g in zip(labels, gt):
        try:
            within.append(depth_error_stats(d, g, tol).within)
        except MetricError:
            pass
    if within:
        row["within_threshold"] = float(np.mean(within))
    return row


def _mean_breakdown(items) -> dict:
    items = [b for b in items if b is not None]
    if not items:
        return {}
    total = items[0]
    for b in items[1:]:
        total = total + b
    k = len(items)
    return {"l_g": total.l_g / k, "l_ssim": total.l_ssim / k, "l_p": total.l_p / k,
            "l_s": total.l_s / k, "l_syn": total.l_syn / k}


def initialize(scene: Scene, config: Config, out_dir=None) -> PipelineState:
    if scene.n_views < 2:
        raise ValueError("self-training needs at least 2 views")
    config.validate()
    levels = stage_infer(scene, config, iteration=0)
    labels, losses = initial_labels(scene, config, levels)
    derived = resolve(scene, config)
    row = {"iteration": 0, **_evaluate_labels(scene, labels, derived, config), **_mean_breakdown(losses)}
    state = PipelineState(scene, config, labels, 0, [row])
    if out_dir is not None:
        _write_depths(Path(out_dir) / "iter0" / "infer", [_f32(lv[-1].depth) for lv in levels])
        _write_depths(Path(out_dir) / "iter0" / "init", labels)
    log.info("init %s", _fmt(row))
    return state


def run_iteration(state: PipelineState, out_dir=None) -> PipelineState:
    """One pass of infer, refine, filter, fuse, reconstruct and render."""
    scene, config = state.scene, state.config
    t = state.iteration + 1
    if t > config.iterations:
        raise ValueError(f"iteration {t} exceeds the configured {config.iterations}")
    derived = resolve(scene, config)
    levels = stage_infer(scene, config, state.labels, iteration=t)
    inferred = [_f32(lv[-1].depth) for lv in levels]
    refined = stage_refine(scene, config, inferred, iteration=t)
    kept, votes = stage_filter(scene, config, refined, iteration=t)
    cloud = stage_fuse(scene, kept, iteration=t)
    mesh = stage_reconstruct(scene, config, cloud, iteration=t)
    rendered = stage_render(scene, config, mesh, iteration=t)
    if not any(d.mask.any() for d in rendered):
        raise StageError("render", "rendered labels are empty in every view", t)

    n_levels = config.pyramid_levels_coarse
    raw, mean, missing = agreement(state.labels, rendered, n_levels, require_estimate=True)
    _, inf_mean, _ = agreement(inferred, rendered, n_levels, require_estimate=False)
    converged = mean < derived.eps_stop and missing <= MISSING_TOLERANCE
    row = {"iteration": t, **_evaluate_labels(scene, rendered, derived, config),
           "pseudo_agreement": raw, "pseudo_agreement_mean": mean, "missing_fraction": missing,
           "inference_agreement_mean": inf_mean,
           "filter_kept": float(np.mean([k.mask.mean() for k in kept])),
           "n_points": len(cloud), "n_faces": int(len(mesh.faces)), "converged": converged}
    if out_dir is not None:
        base = Path(out_dir) / f"iter{t}"
        _write_depths(base / "infer", inferred)
        _write_depths(base / "refine", refined)
        _write_depths(base / "filter", kept)
        _write_depths(base / "votes", [DepthMap(v.astype(np.float64), v > 0) for v in votes])
        (base / "fuse").mkdir(parents=True, exist_ok=True)
        save_pointcloud_ply(cloud, base / "fuse" / "cloud.ply")
        save_mesh_ply(mesh, base / "fuse" / "mesh.ply")
        _write_depths(base / "render", rendered)
    log.info("iter %d %s", t, _fmt(row))
    return PipelineState(scene, config, rendered, t, state.history + [row], converged)


@dataclass
class PipelineResult:
    labels: list[DepthMap]
    history: list[dict]
    converged: bool


def run_pipeline(scene: Scene, config: Config, out_dir=None, keep_intermediate: bool = False) -> PipelineResult:
    """Initialize, then iterate until ``config.iterations`` or convergence.

    Final labels are written to ``out_dir/labels`` when ``out_dir`` is given;
    per-stage artifacts go under ``out_dir/iter{t}`` with ``keep_intermediate``.
    """
    inter = out_dir if keep_intermediate else None
    state = initialize(scene, config, inter)
    while state.iteration < config.iterations and not state.converged:
        state = run_iteration(state, inter)
    if out_dir is not None:
        _write_depths(Path(out_dir) / "labels", state.labels)
    return PipelineResult(state.labels, state.history, state.converged)


def _write_depths(path: Path, depths) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for v, d in enumerate(depths):
        save_depth_pfm(d, path / f"{view_name(v)}.pfm")


def _fmt(row: dict) -> str:
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())
