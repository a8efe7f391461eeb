"""Analytic synthetic scenes: ray-cast Lambertian surfaces seen by a camera ring.

View 0 sits at the world origin looking down +z; the remaining views are
spread on a ring of radius ``ring_radius`` in the z = 0 plane and look at
the point ``(0, 0, target_depth)``. Images are rendered at high resolution
with supersampling; the low-resolution images are their area average, so
both resolutions describe the same radiance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, DepthMap, look_at, pixel_grid
from .scene_io import Scene

# unit vector pointing from the surface toward the light
LIGHT_DIR = np.array([-0.4, -0.6, -1.0]) / np.linalg.norm([-0.4, -0.6, -1.0])
AMBIENT = 0.35
DIFFUSE = 0.65
TINT = np.array([1.0, 0.9, 0.8])


class SurfaceOutsideFrustumError(ValueError):
    pass


class PlaneSurface:
    """World plane z = ``depth`` (outward normal faces the cameras)."""

    def __init__(self, depth: float = 4.0):
        self.depth = depth

    def intersect(self, origins, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.depth - origins[..., 2]) / dirs[..., 2]
        return np.where(t > 0, t, np.nan)

    def normal(self, points):
        n = np.zeros_like(points)
        n[..., 2] = -1.0
        return n


class SphereSurface:
    def __init__(self, center=(0.0, 0.0, 4.0), radius: float = 1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=-1)
        a = np.sum(dirs * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - a * c
        with np.errstate(invalid="ignore"):
            t = (-b - np.sqrt(disc)) / a
        return np.where((disc >= 0) & (t > 0), t, np.nan)

    def normal(self, points):
        return (points - self.center) / self.radius


class HeightFieldSurface:
    """z = base + amplitude * sin(2 pi x / wavelength) * cos(2 pi y / wavelength)."""

    def __init__(self, base: float = 4.0, amplitude: float = 0.15, wavelength: float = 1.5):
        self.base, self.amplitude, self.wavelength = base, amplitude, wavelength

    def height(self, x, y):
        k = 2 * np.pi / self.wavelength
        return self.base + self.amplitude * np.sin(k * x) * np.cos(k * y)

    def intersect(self, origins, dirs, steps: int = 64, bisections: int = 50):
        z0, z1 = self.base - self.amplitude, self.base + self.amplitude
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (z0 - origins[..., 2]) / dirs[..., 2]
            t1 = (z1 - origins[..., 2]) / dirs[..., 2]
        t0 = np.maximum(t0, 0.0)

        def f(t):
            p = origins + t[..., None] * dirs
            return p[..., 2] - self.height(p[..., 0], p[..., 1])

        lo = t0.copy()
        hi = np.full_like(t0, np.nan)
        f_lo = f(lo)
        for k in range(1, steps + 1):
            t = t0 + (t1 - t0) * k / steps
            ft = f(t)
            hit = np.isnan(hi) & (f_lo < 0) & (ft >= 0)
            hi = np.where(hit, t, hi)
            upd = np.isnan(hi)
            lo = np.where(upd, t, lo)
            f_lo = np.where(upd, ft, f_lo)
        found = ~np.isnan(hi)
        # bisect inside the bracketing step [hi - step, hi]
        step = (t1 - t0) / steps
        lo = np.where(found, hi - step, lo)
        hi_b = np.where(found, hi, lo)
        for _ in range(bisections):
            mid = 0.5 * (lo + hi_b)
            fm = f(mid)
            pos = fm >= 0
            hi_b = np.where(pos, mid, hi_b)
            lo = np.where(pos, lo, mid)
        return np.where(found, 0.5 * (lo + hi_b), np.nan)

    def normal(self, points):
        k = 2 * np.pi / self.wavelength
        x, y = points[..., 0], points[..., 1]
        hx = self.amplitude * k * np.cos(k * x) * np.cos(k * y)
        hy = -self.amplitude * k * np.sin(k * x) * np.sin(k * y)
        n = np.stack([hx, hy, -np.ones_like(x)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


SURFACES = {"plane": PlaneSurface, "sphere": SphereSurface, "height-field": HeightFieldSurface}


class Texture:
    """Solid (3D) albedo patterns."""

    def __init__(self, kind: str, seed: int = 0, checker_size: float = 0.08,
                 wavelengths: tuple[float, float] = (0.15, 0.6)):
        if kind not in ("checker", "noise", "uniform"):
            raise ValueError(f"unknown texture {kind!r}")
        self.kind = kind
        self.checker_size = checker_size
        rng = np.random.default_rng(seed)
        n = 24
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        lo, hi = wavelengths
        lam = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
        self.freqs = dirs * (2 * np.pi / lam)[:, None]
        self.phases = rng.uniform(0, 2 * np.pi, size=n)
        self.amps = rng.uniform(0.5, 1.0, size=n)

    def albedo(self, points):
        if self.kind == "uniform":
            return np.full(points.shape[:-1], 0.6)
        if self.kind == "checker":
            s = self.checker_size
            idx = (np.floor(points[..., 0] / s) + np.floor(points[..., 1] / s)
                   + np.floor(points[..., 2] / s + 0.5))
            return np.where(np.mod(idx, 2) == 0, 0.25, 0.85)
        val = np.sin(points @ self.freqs.T + self.phases) @ self.amps
        val /= np.sqrt(0.5 * np.sum(self.amps**2))
        return np.clip(0.52 + 0.17 * val, 0.05, 0.98)


@dataclass
class SyntheticScene(Scene):
    surface: object = None
    texture: Texture | None = None
    gt_depths_high: list[DepthMap] | None = field(default=None, repr=False)

    def depth_at(self, view: int, pixels, high: bool = False):
        """Analytic depth at arbitrary (continuous) pixels; NaN where the ray misses."""
        cam = self.cameras_high[view] if high else self.cameras_low[view]
        return cast_depth(self.surface, cam, np.asarray(pixels, dtype=np.float64))


def camera_rays(cam: Camera, pixels):
    rays_cam = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1) @ cam.K_inv.T
    dirs = rays_cam @ cam.R  # R^T applied to row vectors
    origins = np.broadcast_to(cam.center, dirs.shape)
    return origins, dirs, rays_cam


def cast_depth(surface, cam: Camera, pixels):
    origins, dirs, rays_cam = camera_rays(cam, pixels)
    t = surface.intersect(origins, dirs)
    return t * rays_cam[..., 2]


def shade(surface, texture: Texture, cam: Camera, pixels):
    origins, dirs, _ = camera_rays(cam, pixels)
    t = surface.intersect(origins, dirs)
    hit = np.isfinite(t)
    pts = origins + np.where(hit, t, 0.0)[..., None] * dirs
    lam = np.clip(np.sum(surface.normal(pts) * LIGHT_DIR, axis=-1), 0.0, None)
    intensity = texture.albedo(pts) * (AMBIENT + DIFFUSE * lam)
    rgb = intensity[..., None] * TINT
    return np.where(hit[..., None], rgb, 0.0)


def ring_cameras(n_views: int, resolution, focal: float, ring_radius: float,
                 target_depth: float, depth_range) -> list[Camera]:
    h, w = resolution
    K = np.array([[focal, 0.0, (w - 1) / 2.0], [0.0, focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    target = np.array([0.0, 0.0, target_depth])
    cams = [Camera(K, np.eye(3), np.zeros(3), *depth_range)]
    for k in range(n_views - 1):
        a = 2 * np.pi * k / (n_views - 1) + np.pi / 4
        eye = np.array([ring_radius * np.cos(a), ring_radius * np.sin(a), 0.0])
        R, t = look_at(eye, target)
        cams.append(Camera(K, R, t, *depth_range))
    return cams


def generate_synthetic_scene(surface: str = "sphere", texture: str = "noise", n_views: int = 5,
                             resolution: tuple[int, int] = (128, 160), high_factor: int = 2,
                             seed: int = 0, focal: float | None = None, ring_radius: float = 0.8,
                             target_depth: float = 4.0, depth_range=(2.5, 5.5),
                             supersample: int = 2, surface_kwargs: dict | None = None) -> SyntheticScene:
    """Render a calibrated multi-view scene with exact ground-truth depth.

    ``resolution`` is the low (training) resolution; high-resolution images
    are ``high_factor`` times larger. Deterministic for a given ``seed``.
    """
    if n_views < 2:
        raise ValueError("need at least 2 cameras")
    if surface not in SURFACES:
        raise ValueError(f"unknown surface {surface!r}")
    kwargs = dict(surface_kwargs or {})
    if surface == "plane":
        kwargs.setdefault("depth", target_depth)
    elif surface == "sphere":
        kwargs.setdefault("center", (0.0, 0.0, target_depth))
    else:
        kwargs.setdefault("base", target_depth)
    surf = SURFACES[surface](**kwargs)
    tex = Texture(texture, seed=seed)
    h, w = resolution
    focal = focal if focal is not None else 1.25 * w
    cams_low = ring_cameras(n_views, resolution, focal, ring_radius, target_depth, depth_range)
    cams_high = [c.scaled(high_factor) for c in cams_low]

    for i, cam in enumerate(cams_low):
        center = np.array([[(w - 1) / 2.0, (h - 1) / 2.0]])
        if not np.isfinite(cast_depth(surf, cam, center)).all():
            raise SurfaceOutsideFrustumError(f"surface not visible at the center of view {i}")

    H, W = h * high_factor, w * high_factor
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    images = []
    for cam in cams_high:
        grid = pixel_grid(H, W)
        acc = np.zeros((H, W, 3))
        for oy in offsets:
            for ox in offsets:
                acc += shade(surf, tex, cam, grid + np.array([ox, oy]))
        images.append(acc / supersample**2)

    def gt(cams, shape):
        out = []
        for cam in cams:
            d = cast_depth(surf, cam, pixel_grid(*shape))
            out.append(DepthMap.from_array(d))
        return out

    pairs = []
    centers = [c.center for c in cams_low]
    for i in range(n_views):
        others = [j for j in range(n_views) if j != i]
        others.sort(key=lambda j: (np.linalg.norm(centers[i] - centers[j]), j))
        pairs.append(others)

    return SyntheticScene(
        scene_id=f"synthetic-{surface}-{texture}-{n_views}v-s{seed}",
        images_high=images, cameras_high=cams_high, pairs=pairs, low_factor=high_factor,
        gt_depths_low=gt(cams_low, (h, w)), surface=surf, texture=tex,
        gt_depths_high=gt(cams_high, (H, W)))
