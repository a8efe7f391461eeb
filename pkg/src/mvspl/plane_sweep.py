"""Non-learned coarse-to-fine plane-sweep depth inference.

The coarsest pyramid level sweeps uniformly spaced fronto-parallel planes;
every finer level re-sweeps a narrow per-pixel band centered on the
upsampled estimate from the level below, halving the interval each time.
Matching cost is the across-view variance of 3x3-box-filtered intensity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .geometry import Camera, DepthMap, bilinear_sample, homography_warp, reproject_pixels
from .scene_io import area_downsample


class PyramidError(ValueError):
    pass


@dataclass
class HypothesisSet:
    """Depth candidates, either shared ``(M,)`` or per pixel ``(H, W, M)``.

    ``valid`` is an optional ``(H, W)`` mask of refinable pixels for
    per-pixel sets.
    """

    depths: np.ndarray
    level: int
    interval: float
    valid: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64)
        if d.shape[-1] < 2:
            raise ValueError("a hypothesis set needs at least 2 candidates")
        if not (np.all(np.isfinite(d)) and np.all(d > 0)):
            raise ValueError("hypotheses must be finite and positive")
        if np.any(np.diff(d, axis=-1) <= 0):
            raise ValueError("hypotheses must be strictly increasing")
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        self.depths = d

    @property
    def count(self) -> int:
        return self.depths.shape[-1]

    @property
    def per_pixel(self) -> bool:
        return self.depths.ndim == 3

    def grid(self, shape) -> np.ndarray:
        """Hypotheses broadcast to ``(H, W, M)``."""
        if self.per_pixel:
            return self.depths
        return np.broadcast_to(self.depths, tuple(shape) + (self.count,))


@dataclass
class CostVolume:
    cost: np.ndarray  # (H, W, M)
    n_views: np.ndarray  # (H, W, M) views contributing, reference included

    @property
    def valid(self) -> np.ndarray:
        return self.n_views >= 2


@dataclass
class ProbabilityVolume:
    prob: np.ndarray  # (H, W, M)
    valid: np.ndarray  # (H, W) pixels with at least one valid cell


def build_hypotheses_coarse(d_min: float, d_max: float, M: int, level: int = 0) -> HypothesisSet:
    if not (0 < d_min < d_max) or M < 2:
        raise ValueError(f"need 0 < d_min < d_max and M >= 2, got ({d_min}, {d_max}, {M})")
    return HypothesisSet(np.linspace(d_min, d_max, M), level, (d_max - d_min) / (M - 1))


def build_hypotheses_refined(prior: DepthMap, interval: float, M: int, level: int = 0) -> HypothesisSet:
    """Band of ``M`` candidates spaced ``interval`` apart, centered on the prior.

    A band reaching zero is shifted up so its lowest member sits at
    ``interval / 2``. Pixels without a valid prior are marked unrefinable.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if M < 2 or M % 2:
        raise ValueError("M must be an even count >= 2")
    offsets = (np.arange(M) - (M - 1) / 2.0) * interval
    center = np.where(prior.mask, prior.values, 1.0).astype(np.float64)
    depths = center[..., None] + offsets
    low = depths[..., 0]
    shift = np.where(low <= 0, interval / 2.0 - low, 0.0)
    return HypothesisSet(depths + shift[..., None], level, interval, valid=prior.mask.copy())


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=-1) if image.ndim == 3 else image


def warp_volume(src, cam_ref: Camera, cam_src: Camera, hyps: HypothesisSet, shape):
    """Source image sampled at every (pixel, hypothesis); ``(H, W, M[, C])`` plus mask."""
    if hyps.per_pixel:
        xs, ys, _ = reproject_pixels(hyps.depths, cam_ref, cam_src)
        return bilinear_sample(src, xs, ys)
    slices = [homography_warp(src, cam_ref, cam_src, d, shape=shape) for d in hyps.depths]
    return np.stack([s[0] for s in slices], axis=2), np.stack([s[1] for s in slices], axis=2)


def matching_cost(ref_image, src_images, cam_ref: Camera, cams_src, hyps: HypothesisSet) -> CostVolume:
    """Variance over the reference and valid warped sources of box-filtered intensity.

    Deviations are accumulated relative to the reference value, so identical
    views give a cost of exactly zero.
    """
    if len(src_images) == 0:
        raise ValueError("matching needs at least one source view")
    ref = uniform_filter(to_gray(ref_image), size=3, mode="nearest")
    shape = ref.shape
    M = hyps.count
    s1 = np.zeros(shape + (M,))
    s2 = np.zeros(shape + (M,))
    n = np.ones(shape + (M,), dtype=np.int32)
    for src, cam in zip(src_images, cams_src):
        smooth = uniform_filter(to_gray(src), size=3, mode="nearest")
        warped, ok = warp_volume(smooth, cam_ref, cam, hyps, shape)
        diff = np.where(ok, warped - ref[..., None], 0.0)
        s1 += diff
        s2 += diff * diff
        n += ok
    mean = s1 / n
    cost = np.maximum(s2 / n - mean * mean, 0.0)
    cost[n < 2] = 0.0
    return CostVolume(cost, n)


def cost_to_probability(volume: CostVolume, temperature: float, bias=None) -> ProbabilityVolume:
    """Softmax of ``-(cost + bias) / temperature`` over the valid cells of each pixel."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    valid = volume.valid
    logits = -volume.cost / temperature
    if bias is not None:
        logits = logits - bias / temperature
    logits = np.where(valid, logits, -np.inf)
    pix_valid = valid.any(axis=-1)
    peak = np.where(pix_valid, logits.max(axis=-1), 0.0)
    w = np.where(valid, np.exp(logits - peak[..., None]), 0.0)
    total = w.sum(axis=-1, keepdims=True)
    prob = np.where(pix_valid[..., None], w / np.where(total > 0, total, 1.0), 0.0)
    return ProbabilityVolume(prob, pix_valid)


def regress_depth(prob: ProbabilityVolume, hyps: HypothesisSet) -> DepthMap:
    """Soft-argmax: per-pixel expected depth under ``prob``."""
    grid = hyps.grid(prob.prob.shape[:2])
    depth = np.sum(prob.prob * grid, axis=-1)
    # guard the convex-hull bound against rounding in the weighted sum
    depth = np.clip(depth, grid[..., 0], grid[..., -1])
    mask = prob.valid.copy()
    if hyps.valid is not None:
        mask &= hyps.valid
    return DepthMap(np.where(mask, depth, 0.0), mask)


def upsample_depth(depth: DepthMap, shape) -> DepthMap:
    """Bilinear on values (normalized by valid weight), nearest on validity."""
    h, w = depth.shape
    H, W = shape
    if H % h or W % w or H // h != W // w:
        raise PyramidError(f"cannot upsample {depth.shape} to {tuple(shape)}")
    f = H // h
    if f == 1:
        return depth.copy()
    xs = (np.arange(W) + 0.5) / f - 0.5
    ys = (np.arange(H) + 0.5) / f - 0.5
    X, Y = np.meshgrid(np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
    m = depth.mask.astype(np.float64)
    num, _ = bilinear_sample(depth.values * m, X, Y)
    den, _ = bilinear_sample(m, X, Y)
    near = depth.mask[np.arange(H)[:, None] // f, np.arange(W)[None, :] // f]
    mask = near & (den > 0)
    values = np.where(mask, num / np.where(den > 0, den, 1.0), 0.0)
    return DepthMap(values, mask)


def downsample_label(label: DepthMap, shape) -> DepthMap:
    """Nearest-pixel-center subsampling of a label map to a coarser grid."""
    h, w = label.shape
    H, W = shape
    f = h // H
    if f == 1:
        return label
    r = np.arange(H) * f + f // 2
    c = np.arange(W) * f + f // 2
    return DepthMap(label.values[np.ix_(r, c)], label.mask[np.ix_(r, c)])


def prior_bias_cost(hyps: HypothesisSet, label: DepthMap | None, weight: float, temperature: float, shape):
    """Cost penalty ``weight * temperature * |d - label| / interval`` on labelled pixels."""
    if label is None or weight == 0:
        return None
    grid = hyps.grid(shape)
    pen = weight * temperature * np.abs(grid - label.values[..., None]) / hyps.interval
    return np.where(label.mask[..., None], pen, 0.0)


@dataclass
class LevelResult:
    level: int
    scale: int  # downsampling factor relative to the input images
    hypotheses: HypothesisSet
    probability: ProbabilityVolume
    depth: DepthMap


def level_inputs(images, cameras, ref, sources, factor):
    """Reference and source images and cameras downsampled by ``factor``."""
    def img(i):
        return area_downsample(images[i], factor) if factor > 1 else np.asarray(images[i], dtype=np.float64)

    def cam(i):
        return cameras[i].scaled(1.0 / factor) if factor > 1 else cameras[i]

    return img(ref), [img(j) for j in sources], cam(ref), [cam(j) for j in sources]


def sweep_level(ref, srcs, cam_ref, cams_src, hyps, temperature, label=None, prior_weight=0.0):
    shape = to_gray(ref).shape
    volume = matching_cost(ref, srcs, cam_ref, cams_src, hyps)
    bias = prior_bias_cost(hyps, label, prior_weight, temperature, shape)
    prob = cost_to_probability(volume, temperature, bias)
    return prob, regress_depth(prob, hyps)


def coarse_interval(camera: Camera, M: int) -> float:
    return (camera.d_max - camera.d_min) / (M - 1)


def infer_depth_pyramid(images, cameras, ref: int, sources, levels: int, M_coarse: int,
                        M_fine: int, temperature: float, label: DepthMap | None = None,
                        prior_weight: float = 0.0) -> list[LevelResult]:
    """Coarse-to-fine sweep for reference view ``ref``; results ordered coarsest first.

    ``label`` (at input resolution) adds a cost bias pulling each level's
    estimate toward it; hypothesis bands at finer levels are centered on
    the upsampled estimate of the coarser level.
    """
    if levels < 1:
        raise PyramidError("levels must be >= 1")
    h, w = images[ref].shape[:2]
    top = 2 ** (levels - 1)
    if h % top or w % top:
        raise PyramidError(f"resolution {(h, w)} not divisible by {top}")
    if not sources:
        raise ValueError("matching needs at least one source view")
    results: list[LevelResult] = []
    interval = coarse_interval(cameras[ref], M_coarse)
    estimate = None
    for lvl in range(levels - 1, -1, -1):
        f = 2**lvl
        ref_img, src_imgs, cam_ref, cams_src = level_inputs(images, cameras, ref, sources, f)
        shape = ref_img.shape[:2]
        lab = downsample_label(label, shape) if label is not None else None
        if estimate is None:
            hyps = build_hypotheses_coarse(cam_ref.d_min, cam_ref.d_max, M_coarse, level=lvl)
        else:
            interval /= 2.0
            hyps = build_hypotheses_refined(upsample_depth(estimate, shape), interval, M_fine, level=lvl)
        prob, depth = sweep_level(ref_img, src_imgs, cam_ref, cams_src, hyps, temperature, lab, prior_weight)
        results.append(LevelResult(lvl, f, hyps, prob, depth))
        estimate = depth
    return results


def refine_high_resolution(images_high, cameras_high, ref: int, sources, prior: DepthMap,
                           levels_coarse: int, levels_fine: int, M_coarse: int, M_fine: int,
                           temperature: float) -> DepthMap:
    """Continue the pyramid from the low-resolution prior up to full resolution.

    One refined sweep runs per doubling between the prior's grid and the
    high-resolution grid, each with half the previous interval. Equal
    resolutions make this the identity.
    """
    H, W = images_high[ref].shape[:2]
    h, w = prior.shape
    if H % h or W % w or H // h != W // w:
        raise PyramidError(f"high resolution {(H, W)} incompatible with prior {(h, w)}")
    factor = H // h
    n_extra = int(round(np.log2(factor)))
    if 2**n_extra != factor:
        raise PyramidError(f"resolution factor {factor} is not a power of two")
    if levels_coarse + n_extra > levels_fine:
        raise PyramidError(
            f"{levels_fine} fine levels cannot cover {levels_coarse} coarse levels plus {n_extra} refinements")
    if n_extra == 0:
        return prior.copy()
    interval = coarse_interval(cameras_high[ref], M_coarse) / 2 ** (levels_coarse - 1)
    estimate = prior
    for lvl in range(n_extra - 1, -1, -1):
        f = 2**lvl
        ref_img, src_imgs, cam_ref, cams_src = level_inputs(images_high, cameras_high, ref, sources, f)
        interval /= 2.0
        up = upsample_depth(estimate, ref_img.shape[:2])
        hyps = build_hypotheses_refined(up, interval, M_fine, level=lvl)
        _, estimate = sweep_level(ref_img, src_imgs, cam_ref, cams_src, hyps, temperature)
    return estimate


def finest_interval(camera: Camera, M_coarse: int, levels_coarse: int, high_factor: int) -> float:
    """Interval of the last refined sweep, for a camera at either resolution."""
    n_extra = int(round(np.log2(high_factor)))
    return coarse_interval(camera, M_coarse) / 2 ** (levels_coarse - 1 + n_extra)


def calibrate_temperature(volume: CostVolume, mask=None, peak: float = 0.9) -> float:
    """Temperature at which the median one-interval cost gap gives ``peak`` probability.

    The gap at a pixel is the smaller cost rise from the argmin to either
    neighboring hypothesis; with both neighbors that far above the minimum
    a softmax peak of ``peak`` needs ``gap / tau = ln(2 peak / (1 - peak))``.
    """
    cost = np.where(volume.valid, volume.cost, np.inf)
    M = cost.shape[-1]
    k = np.argmin(cost, axis=-1)
    inner = (k > 0) & (k < M - 1) & volume.valid.all(axis=-1)
    if mask is not None:
        inner &= mask
    if not inner.any():
        raise ValueError("no pixel with an interior cost minimum")
    c = cost[inner]
    ki = k[inner]
    rows = np.arange(len(ki))
    gap = np.minimum(c[rows, ki - 1], c[rows, ki + 1]) - c[rows, ki]
    return float(np.median(gap) / np.log(2 * peak / (1 - peak)))
