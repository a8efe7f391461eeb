"""Probability-weighted view synthesis and the photometric loss suite.

A source view is warped to the reference under every depth hypothesis,
giving an intensity volume B. Blending B with the per-pixel depth
probabilities yields a synthesized reference image, which is compared to
the real one by gradient, SSIM and feature-space L1 terms; an edge-aware
smoothness term scores the depth map itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, sobel, uniform_filter

from .geometry import Camera, DepthMap
from .plane_sweep import HypothesisSet, ProbabilityVolume, to_gray, warp_volume
from .scene_io import area_downsample

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class LossError(ValueError):
    pass


@dataclass
class IntensityVolume:
    values: np.ndarray  # (H, W, M, C)
    mask: np.ndarray  # (H, W, M)


@dataclass
class Synthesis:
    image: np.ndarray  # (H, W, C)
    mask: np.ndarray  # (H, W)


@dataclass
class LossBreakdown:
    l_g: float
    l_ssim: float
    l_p: float
    l_s: float
    l_syn: float
    n_valid: int

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.l_g + other.l_g, self.l_ssim + other.l_ssim, self.l_p + other.l_p,
                             self.l_s + other.l_s, self.l_syn + other.l_syn, self.n_valid + other.n_valid)

    def as_dict(self) -> dict:
        return {"l_g": self.l_g, "l_ssim": self.l_ssim, "l_p": self.l_p, "l_s": self.l_s,
                "l_syn": self.l_syn, "n_valid": self.n_valid}


@dataclass
class Agreement:
    raw: float
    mean: float
    n_valid: int


def _as_channels(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[..., None] if image.ndim == 2 else image


def build_intensity_volume(src_image, cam_ref: Camera, cam_src: Camera, hyps: HypothesisSet,
                           shape=None) -> IntensityVolume:
    src = _as_channels(src_image)
    shape = tuple(shape) if shape is not None else src.shape[:2]
    if hyps.per_pixel and hyps.depths.shape[:2] != shape:
        raise LossError(f"hypotheses {hyps.depths.shape[:2]} do not match shape {shape}")
    values, mask = warp_volume(src, cam_ref, cam_src, hyps, shape)
    return IntensityVolume(values, mask)


def synthesize_image(volume: IntensityVolume, prob) -> Synthesis:
    """Expected intensity ``sum_d B(d) P(d)`` over the valid cells of B.

    Probability is renormalized over the valid cells; a pixel is kept when
    at least half of its probability mass falls on valid cells.
    """
    P = prob.prob if isinstance(prob, ProbabilityVolume) else np.asarray(prob, dtype=np.float64)
    if P.shape != volume.mask.shape:
        raise LossError(f"probability {P.shape} and intensity volume {volume.mask.shape} disagree")
    w = np.where(volume.mask, P, 0.0)
    total = w.sum(axis=-1)
    mask = total >= 0.5
    image = np.einsum("hwm,hwmc->hwc", w, volume.values) / np.where(mask, total, 1.0)[..., None]
    image = np.where(mask[..., None], image, 0.0)
    return Synthesis(image, mask)


def synthesize_views(ref_image, src_images, cam_ref: Camera, cams_src, hyps: HypothesisSet,
                     prob) -> list[Synthesis]:
    shape = np.asarray(ref_image).shape[:2]
    return [synthesize_image(build_intensity_volume(src, cam_ref, cam, hyps, shape), prob)
            for src, cam in zip(src_images, cams_src)]


# ---------------------------------------------------------------------------
# per-pixel maps


def gradient_maps(synth: Synthesis, ref) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Forward-difference gradient discrepancies, channel-averaged.

    Returns ``(du, mu, dv, mv)``: |d_u I_syn - d_u I_ref| on the (H, W-1) grid
    of horizontal pairs with its validity, then the same for vertical pairs.
    """
    a = _as_channels(synth.image)
    b = _as_channels(ref)
    m = synth.mask
    du = np.abs(np.diff(a, axis=1) - np.diff(b, axis=1)).mean(axis=-1)
    dv = np.abs(np.diff(a, axis=0) - np.diff(b, axis=0)).mean(axis=-1)
    return du, m[:, 1:] & m[:, :-1], dv, m[1:, :] & m[:-1, :]


def ssim_index(a, b, window: int = 7) -> np.ndarray:
    """Per-pixel SSIM with a uniform ``window`` x ``window`` window, averaged over channels."""
    a = _as_channels(a)
    b = _as_channels(b)
    if a.shape != b.shape:
        raise LossError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    if window > min(a.shape[:2]):
        raise LossError(f"SSIM window {window} exceeds image {a.shape[:2]}")
    size = (window, window, 1)
    mu_a = uniform_filter(a, size, mode="reflect")
    mu_b = uniform_filter(b, size, mode="reflect")
    var_a = uniform_filter(a * a, size, mode="reflect") - mu_a**2
    var_b = uniform_filter(b * b, size, mode="reflect") - mu_b**2
    cov = uniform_filter(a * b, size, mode="reflect") - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return np.clip(num / den, -1.0, 1.0).mean(axis=-1)


def window_valid(mask, window: int) -> np.ndarray:
    """Pixels whose full window lies inside the image and inside ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    r = window // 2
    full = uniform_filter(mask.astype(np.float64), window, mode="constant") > 1 - 1e-9
    inside = np.zeros_like(mask)
    inside[r:mask.shape[0] - r, r:mask.shape[1] - r] = True
    return full & inside


FeatureExtractor = Callable[[np.ndarray], list]


def gradient_pyramid_features(image, scales: int = 3) -> list[np.ndarray]:
    """Sobel gradient magnitude of a Gaussian pyramid of the grayscale image."""
    g = to_gray(image)
    feats = []
    for s in range(scales):
        if s > 0:
            if g.shape[0] % 2 or g.shape[1] % 2 or min(g.shape) < 4:
                break
            g = area_downsample(gaussian_filter(g, 1.0, mode="nearest"), 2)
        feats.append(np.hypot(sobel(g, axis=0, mode="nearest"), sobel(g, axis=1, mode="nearest")))
    return feats


def _feature_mask(mask, shape) -> np.ndarray:
    f = mask.shape[0] // shape[0]
    if f <= 1:
        return mask
    return area_downsample(mask.astype(np.float64), f) > 1 - 1e-9


def perceptual_terms(synth: Synthesis, ref, extractor: FeatureExtractor):
    """Per-layer ``(|F(I_syn) - F(I_ref)|, valid)`` with invalid synthesis filled from the reference."""
    ref = _as_channels(ref)
    filled = np.where(synth.mask[..., None], _as_channels(synth.image), ref)
    fs, fr = extractor(filled), extractor(ref)
    if len(fs) != len(fr):
        raise LossError("feature extractor returned different layer counts")
    out = []
    for a, b in zip(fs, fr):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise LossError(f"feature shapes differ: {a.shape} vs {b.shape}")
        diff = np.abs(a - b)
        if diff.ndim == 3:
            diff = diff.mean(axis=-1)
        out.append((diff, _feature_mask(synth.mask, diff.shape)))
    return out


def smoothness_terms(depth: DepthMap, ref):
    """Edge-weighted inverse-depth differences ``(tu, mu, tv, mv)`` on pair grids."""
    if not depth.mask.any():
        raise LossError("smoothness needs at least one valid depth")
    inv = np.where(depth.mask, 1.0 / np.where(depth.mask, depth.values, 1.0), 0.0)
    norm = inv / inv[depth.mask].mean()
    gray = to_gray(ref)
    m = depth.mask
    tu = np.abs(np.diff(norm, axis=1)) * np.exp(-np.abs(np.diff(gray, axis=1)))
    tv = np.abs(np.diff(norm, axis=0)) * np.exp(-np.abs(np.diff(gray, axis=0)))
    return tu, m[:, 1:] & m[:, :-1], tv, m[1:, :] & m[:-1, :]


# ---------------------------------------------------------------------------
# scalar losses


def _views(synths) -> list[Synthesis]:
    synths = list(synths)
    if not synths:
        raise LossError("no synthesized views")
    return synths


def loss_gradient(synths: Sequence[Synthesis], ref) -> float:
    """Mean L1 gradient discrepancy over valid forward-difference pairs, averaged over views."""
    per_view = []
    for s in _views(synths):
        du, mu, dv, mv = gradient_maps(s, ref)
        if not (mu.any() or mv.any()):
            continue
        per_view.append((du[mu].mean() if mu.any() else 0.0) + (dv[mv].mean() if mv.any() else 0.0))
    if not per_view:
        raise LossError("no valid gradient pairs")
    return float(np.mean(per_view))


def loss_ssim(synths: Sequence[Synthesis], ref, window: int = 7) -> float:
    """Mean of ``1 - SSIM`` over windows inside the synthesized mask, averaged over views."""
    per_view = []
    for s in _views(synths):
        ok = window_valid(s.mask, window)
        if ok.any():
            per_view.append(float(np.mean(1.0 - ssim_index(s.image, ref, window)[ok])))
    if not per_view:
        raise LossError("no valid SSIM windows")
    return float(np.mean(per_view))


def loss_perceptual(synths: Sequence[Synthesis], ref, extractor: FeatureExtractor | None = None) -> float:
    """Sum over feature layers of the mean L1 feature distance, averaged over views."""
    extractor = extractor or gradient_pyramid_features
    per_view = []
    for s in _views(synths):
        layers = [d[m].mean() for d, m in perceptual_terms(s, ref, extractor) if m.any()]
        if layers:
            per_view.append(float(np.sum(layers)))
    if not per_view:
        raise LossError("no valid feature positions")
    return float(np.mean(per_view))


def loss_smoothness(depth: DepthMap, ref) -> float:
    """Edge-aware first-order smoothness of mean-normalized inverse depth (summed over pixels)."""
    tu, mu, tv, mv = smoothness_terms(depth, ref)
    return float(tu[mu].sum() + tv[mv].sum())


def loss_synthesis(l_g: float, l_ssim: float, l_p: float, l_s: float, alphas, n_valid: int = 0) -> LossBreakdown:
    a = tuple(float(x) for x in alphas)
    if len(a) != 4 or any(x < 0 for x in a):
        raise LossError(f"need four nonnegative weights, got {alphas}")
    l_syn = a[0] * l_g + a[1] * l_ssim + a[2] * l_p + a[3] * l_s
    return LossBreakdown(l_g, l_ssim, l_p, l_s, l_syn, n_valid)


def score_synthesis(synths, ref, depth: DepthMap, alphas, window: int = 7,
                    extractor: FeatureExtractor | None = None) -> LossBreakdown:
    synths = _views(synths)
    n_valid = int(np.logical_or.reduce([s.mask for s in synths]).sum())
    return loss_synthesis(loss_gradient(synths, ref), loss_ssim(synths, ref, window),
                          loss_perceptual(synths, ref, extractor), loss_smoothness(depth, ref),
                          alphas, n_valid)


def pseudo_agreement(estimated: Sequence[DepthMap], pseudo: Sequence[DepthMap], omega=None) -> Agreement:
    """L1 distance between depth pyramids over the pseudo label's valid set.

    ``omega`` overrides the per-level valid sets (defaults to the pseudo masks).
    """
    if len(estimated) != len(pseudo):
        raise LossError("pyramids have different level counts")
    omega = [p.mask for p in pseudo] if omega is None else list(omega)
    raw, n = 0.0, 0
    for e, p, om in zip(estimated, pseudo, omega):
        if e.shape != p.shape:
            raise LossError(f"level shapes differ: {e.shape} vs {p.shape}")
        om = np.asarray(om, dtype=bool)
        raw += float(np.abs(p.values[om].astype(np.float64) - e.values[om].astype(np.float64)).sum())
        n += int(om.sum())
    if n == 0:
        raise LossError("no valid pixels at any level")
    return Agreement(raw, raw / n, n)


# ---------------------------------------------------------------------------
# windowed per-pixel synthesis loss and the quality gate


def _pairs_to_pixels(d, m, axis):
    """Spread each pair's value onto both of its pixels (mean over contributing pairs)."""
    val = np.where(m, d, 0.0)
    cnt = m.astype(np.float64)
    pad = [(0, 0), (0, 0)]
    pad[axis] = (0, 1)
    a_val, a_cnt = np.pad(val, pad), np.pad(cnt, pad)
    pad[axis] = (1, 0)
    b_val, b_cnt = np.pad(val, pad), np.pad(cnt, pad)
    return a_val + b_val, a_cnt + b_cnt


def _window_mean(values, weights, window):
    num = uniform_filter(values * weights, window, mode="constant")
    den = uniform_filter(weights, window, mode="constant")
    return np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0), den > 1e-12


def synthesis_loss_map(synths: Sequence[Synthesis], ref, depth: DepthMap | None, alphas,
                       window: int = 7, ssim_window: int = 7,
                       extractor: FeatureExtractor | None = None):
    """Per-pixel synthesis loss averaged over a ``window`` neighborhood and over views.

    Returns ``(loss, valid)``. The smoothness term is included only when a
    depth map is given.
    """
    loss_synthesis(0, 0, 0, 0, alphas)  # rejects bad weights
    alphas = tuple(float(x) for x in alphas)
    extractor = extractor or gradient_pyramid_features
    shape = np.asarray(ref).shape[:2]
    total = np.zeros(shape)
    count = np.zeros(shape)
    for s in _views(synths):
        du, mu, dv, mv = gradient_maps(s, ref)
        gu, cu = _pairs_to_pixels(du, mu, 1)
        gv, cv = _pairs_to_pixels(dv, mv, 0)
        g = np.where(cu > 0, gu / np.maximum(cu, 1), 0.0) + np.where(cv > 0, gv / np.maximum(cv, 1), 0.0)
        ss = 1.0 - ssim_index(np.where(s.mask[..., None], _as_channels(s.image), _as_channels(ref)), ref, ssim_window)
        p = np.zeros(shape)
        for diff, _ in perceptual_terms(s, ref, extractor):
            f = shape[0] // diff.shape[0]
            p += np.repeat(np.repeat(diff, f, axis=0), f, axis=1) if f > 1 else diff
        per_pixel = alphas[0] * g + alphas[1] * ss + alphas[2] * p
        view_loss, ok = _window_mean(per_pixel, s.mask.astype(np.float64), window)
        ok &= s.mask
        total += np.where(ok, view_loss, 0.0)
        count += ok
    valid = count > 0
    loss = np.where(valid, total / np.maximum(count, 1), 0.0)
    if depth is not None and depth.mask.any():
        tu, mu, tv, mv = smoothness_terms(depth, ref)
        su, _ = _pairs_to_pixels(tu, mu, 1)
        sv, _ = _pairs_to_pixels(tv, mv, 0)
        sm, _ = _window_mean(su + sv, np.ones(shape), window)
        loss = loss + alphas[3] * np.where(valid, sm, 0.0)
    return loss, valid


def synthesis_gate(est_loss, est_valid, base_loss, base_valid, ratio: float, margin: float) -> np.ndarray:
    """Pixels whose windowed loss clearly beats the uninformed baseline."""
    return est_valid & base_valid & (est_loss < ratio * base_loss) & (base_loss - est_loss > margin)
