"""Multi-view fusion, surface reconstruction and depth rendering.

Filtered per-view depths are unprojected into one world-frame cloud, a
surface is reconstructed from it, and the surface is rasterized back into
every view to give complete depth labels.

The default surface backend integrates the cloud's per-view depth maps
into a truncated signed distance volume and extracts the zero level set
with marching cubes. Any callable with the :class:`SurfaceReconstructor`
signature can replace it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve
from skimage.measure import marching_cubes

from .geometry import Camera, DepthMap, cam_to_world, unproject, world_to_cam

logger = logging.getLogger(__name__)

MAX_VOXELS = 200**3
NEAR_PLANE = 1e-6


class EmptyCloudError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray          # (N, 3) world coordinates
    view_ids: np.ndarray        # (N,) source view
    pixels: np.ndarray          # (N, 2) source pixel (x, y)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if not (len(self.points) == len(self.view_ids) == len(self.pixels)):
            raise ValueError("point, view id and pixel arrays must have equal length")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriangleMesh:
    vertices: np.ndarray        # (V, 3)
    faces: np.ndarray           # (F, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0


def fuse_point_cloud(depths: Sequence[DepthMap], cameras: Sequence[Camera]) -> PointCloud:
    """One world point per valid pixel, ``P = R^-1 (D(x) K^-1 x - t)``.

    Points are ordered by view, then row, then column.
    """
    if len(depths) != len(cameras):
        raise ValueError("need one camera per depth map")
    pts, views, pix = [], [], []
    for m, (depth, cam) in enumerate(zip(depths, cameras)):
        rows, cols = np.nonzero(depth.mask)
        if not len(rows):
            continue
        pixels = np.stack([cols, rows], axis=1)
        X = unproject(pixels.astype(np.float64), depth.values[rows, cols].astype(np.float64), cam.K)
        pts.append(cam_to_world(X, cam))
        views.append(np.full(len(rows), m))
        pix.append(pixels)
    if not pts:
        raise EmptyCloudError("no valid pixels in any view")
    return PointCloud(np.concatenate(pts), np.concatenate(views), np.concatenate(pix))


def cloud_to_depths(cloud: PointCloud, cameras: Sequence[Camera],
                    shapes: Sequence[tuple[int, int]]) -> list[DepthMap]:
    """Re-rasterize a fused cloud into its source views using each point's own pixel."""
    out = []
    for m, (cam, shape) in enumerate(zip(cameras, shapes)):
        sel = cloud.view_ids == m
        vals = np.zeros(shape)
        mask = np.zeros(shape, dtype=bool)
        if np.any(sel):
            z = world_to_cam(cloud.points[sel], cam)[:, 2]
            px = cloud.pixels[sel]
            ok = (px[:, 0] >= 0) & (px[:, 0] < shape[1]) & (px[:, 1] >= 0) & (px[:, 1] < shape[0]) & (z > 0)
            vals[px[ok, 1], px[ok, 0]] = z[ok]
            mask[px[ok, 1], px[ok, 0]] = True
        out.append(DepthMap(vals, mask))
    return out


def default_voxel_size(cloud: PointCloud, cameras: Sequence[Camera]) -> float:
    """Twice the median pixel footprint (depth / focal) of the kept pixels."""
    feet = []
    for m, cam in enumerate(cameras):
        sel = cloud.view_ids == m
        if np.any(sel):
            z = world_to_cam(cloud.points[sel], cam)[:, 2]
            feet.append(z / cam.focal)
    return 2.0 * float(np.median(np.concatenate(feet)))


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def fill_small_holes(depth: DepthMap, max_diameter_px: float) -> DepthMap:
    """Fill gaps narrower than ``max_diameter_px`` by harmonic interpolation of inverse depth.

    Gaps are the pixels added by a morphological closing of the valid mask,
    so open borders and large empty regions stay empty. Inverse depth is
    affine in pixel coordinates on a plane, which harmonic interpolation
    reproduces exactly.
    """
    radius = int(np.floor(max_diameter_px / 2.0))
    if radius < 1 or not depth.mask.any() or depth.mask.all():
        return depth.copy()
    padded = np.pad(depth.mask, radius + 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=_disk(radius))
    closed = closed[radius + 1:-radius - 1, radius + 1:-radius - 1]
    holes = closed & ~depth.mask
    if not holes.any():
        return depth.copy()

    H, W = depth.shape
    inv = np.zeros(depth.shape)
    inv[depth.mask] = 1.0 / depth.values[depth.mask]
    idx = -np.ones(depth.shape, dtype=np.int64)
    ys, xs = np.nonzero(holes)
    n = len(ys)
    idx[ys, xs] = np.arange(n)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    deg = np.zeros(n)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ny, nx = ys + dy, xs + dx
        inb = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
        k = np.nonzero(inb)[0]
        ny, nx = ny[inb], nx[inb]
        unknown = holes[ny, nx]
        known = depth.mask[ny, nx]
        deg[k[unknown | known]] += 1
        rows.append(k[unknown])
        cols.append(idx[ny[unknown], nx[unknown]])
        vals.append(-np.ones(unknown.sum()))
        np.add.at(rhs, k[known], inv[ny[known], nx[known]])
    # components with no known neighbor cannot be solved; leave them empty
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(np.maximum(deg, 1.0))
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    labels, n_lab = ndimage.label(holes)
    touching = np.zeros(n_lab + 1, dtype=bool)
    border = ndimage.binary_dilation(depth.mask) & holes
    touching[np.unique(labels[border])] = True
    solvable = touching[labels[ys, xs]]
    sol = np.zeros(n)
    if solvable.any():
        s = np.nonzero(solvable)[0]
        sol[s] = spsolve(A[s][:, s].tocsc(), rhs[s])
    good = solvable & (sol > 0)
    vals_out = depth.values.astype(np.float64).copy()
    mask_out = depth.mask.copy()
    vals_out[ys[good], xs[good]] = 1.0 / sol[good]
    mask_out[ys[good], xs[good]] = True
    return DepthMap(vals_out, mask_out)


class SurfaceReconstructor(Protocol):
    def __call__(self, cloud: PointCloud, cameras: Sequence[Camera],
                 shapes: Sequence[tuple[int, int]]) -> TriangleMesh: ...


@dataclass
class TSDFReconstructor:
    """TSDF integration of per-view depths followed by marching cubes.

    ``voxel_size=None`` uses :func:`default_voxel_size`. Truncation and the
    largest filled hole are given in voxels.
    """

    voxel_size: float | None = None
    truncation_voxels: float = 4.0
    max_hole_voxels: float = 16.0

    def __call__(self, cloud, cameras, shapes) -> TriangleMesh:
        if len(cloud) == 0:
            raise EmptyCloudError("cannot reconstruct an empty cloud")
        if len(cloud) == 1:
            return TriangleMesh.empty()
        lo = cloud.points.min(axis=0)
        hi = cloud.points.max(axis=0)
        if np.all(hi - lo <= 0):
            raise DegenerateInputError("all points coincide")
        voxel = self.voxel_size or default_voxel_size(cloud, cameras)
        trunc = self.truncation_voxels * voxel
        lo = lo - trunc - voxel
        hi = hi + trunc + voxel
        dims = np.ceil((hi - lo) / voxel).astype(int) + 1
        if np.prod(dims.astype(np.float64)) > MAX_VOXELS:
            scale = (np.prod(dims.astype(np.float64)) / MAX_VOXELS) ** (1 / 3)
            logger.warning("voxel grid %s too large; coarsening voxels by %.2f", tuple(dims), scale)
            voxel *= scale
            trunc = self.truncation_voxels * voxel
            dims = np.ceil((hi - lo) / voxel).astype(int) + 1

        depths = cloud_to_depths(cloud, cameras, shapes)
        filled = []
        for cam, d in zip(cameras, depths):
            if d.mask.any():
                foot = np.median(d.values[d.mask]) / cam.focal
                d = fill_small_holes(d, self.max_hole_voxels * voxel / foot)
            filled.append(d)

        tsdf, weight = integrate_tsdf(filled, cameras, lo, voxel, dims, trunc)
        observed = weight > 0
        if not observed.any():
            return TriangleMesh.empty()
        values = np.where(observed, tsdf, 1.0)
        # a cube is meshed only when all 8 corners were observed; skimage
        # reads the mask at each cube's upper corner
        corners = observed[:-1] & observed[1:]
        corners = corners[:, :-1] & corners[:, 1:]
        corners = corners[:, :, :-1] & corners[:, :, 1:]
        cube_ok = np.zeros_like(observed)
        cube_ok[1:, 1:, 1:] = corners
        if not cube_ok.any():
            return TriangleMesh.empty()
        try:
            verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=(voxel,) * 3,
                                                mask=cube_ok, allow_degenerate=False)
        except RuntimeError:  # no zero crossing inside the observed cubes
            return TriangleMesh.empty()
        return clean_mesh(TriangleMesh(verts + lo, faces))


def integrate_tsdf(depths, cameras, origin, voxel, dims, trunc):
    """Average truncated projective signed distances over views.

    Voxels farther than ``trunc`` behind an observed surface, or projecting
    onto invalid pixels, receive no update from that view.
    """
    nx, ny, nz = (int(d) for d in dims)
    tsdf = np.zeros((nx, ny, nz))
    weight = np.zeros((nx, ny, nz))
    gx = origin[0] + voxel * np.arange(nx)
    gy = origin[1] + voxel * np.arange(ny)
    gz = origin[2] + voxel * np.arange(nz)
    yy, zz = np.meshgrid(gy, gz, indexing="ij")
    for depth, cam in zip(depths, cameras):
        if not depth.mask.any():
            continue
        H, W = depth.shape
        for i in range(nx):
            pts = np.stack([np.full(yy.shape, gx[i]), yy, zz], axis=-1)
            Xc = pts @ cam.R.T + cam.t
            z = Xc[..., 2]
            front = z > NEAR_PLANE
            zs = np.where(front, z, 1.0)
            u = np.rint((cam.K[0, 0] * Xc[..., 0] + cam.K[0, 1] * Xc[..., 1]) / zs + cam.K[0, 2])
            v = np.rint(cam.K[1, 1] * Xc[..., 1] / zs + cam.K[1, 2])
            ok = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
            ui = np.where(ok, u, 0).astype(np.int64)
            vi = np.where(ok, v, 0).astype(np.int64)
            ok &= depth.mask[vi, ui]
            sdf = depth.values[vi, ui] - z
            ok &= sdf >= -trunc
            val = np.minimum(1.0, sdf / trunc)
            tsdf[i][ok] += val[ok]
            weight[i][ok] += 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        tsdf = np.where(weight > 0, tsdf / np.maximum(weight, 1e-12), 0.0)
    return tsdf, weight


def clean_mesh(mesh: TriangleMesh) -> TriangleMesh:
    """Drop zero-area faces and unreferenced vertices."""
    if mesh.is_empty:
        return TriangleMesh.empty()
    f = mesh.faces
    v = mesh.vertices
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    f = f[np.linalg.norm(cross, axis=1) > 1e-15]
    if not len(f):
        return TriangleMesh.empty()
    used, inverse = np.unique(f, return_inverse=True)
    return TriangleMesh(v[used], inverse.reshape(-1, 3))


def reconstruct_surface(cloud: PointCloud, cameras: Sequence[Camera],
                        shapes: Sequence[tuple[int, int]], voxel_size: float | None = None,
                        truncation_voxels: float = 4.0, max_hole_voxels: float = 16.0,
                        backend: SurfaceReconstructor | None = None) -> TriangleMesh:
    """Turn a fused cloud into a triangle mesh (TSDF + marching cubes by default)."""
    if voxel_size is not None and not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    if backend is None:
        backend = TSDFReconstructor(voxel_size, truncation_voxels, max_hole_voxels)
    return backend(cloud, cameras, shapes)


def render_depth(mesh: TriangleMesh, camera: Camera, shape: tuple[int, int]) -> DepthMap:
    """Z-buffer rasterization with perspective-correct depth.

    Pixel centers are tested against each projected triangle; the nearest
    surface wins and uncovered pixels are invalid. Triangles with a vertex
    at or behind the camera plane are skipped.
    """
    h, w = shape
    zbuf = np.full(h * w, np.inf)
    if mesh.is_empty:
        return DepthMap.empty(shape)
    Xc = world_to_cam(mesh.vertices, camera)
    tri = Xc[mesh.faces]
    z = tri[..., 2]
    keep = np.all(z > NEAR_PLANE, axis=1)
    tri, z = tri[keep], z[keep]
    K = camera.K
    u = (K[0, 0] * tri[..., 0] + K[0, 1] * tri[..., 1]) / z + K[0, 2]
    v = K[1, 1] * tri[..., 1] / z + K[1, 2]
    umin = np.maximum(np.ceil(u.min(axis=1)), 0).astype(np.int64)
    umax = np.minimum(np.floor(u.max(axis=1)), w - 1).astype(np.int64)
    vmin = np.maximum(np.ceil(v.min(axis=1)), 0).astype(np.int64)
    vmax = np.minimum(np.floor(v.max(axis=1)), h - 1).astype(np.int64)
    area2 = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    ok = (umin <= umax) & (vmin <= vmax) & (np.abs(area2) > 1e-12)
    u, v, z, area2 = u[ok], v[ok], z[ok], area2[ok]
    umin, umax, vmin, vmax = umin[ok], umax[ok], vmin[ok], vmax[ok]
    size = np.maximum(umax - umin, vmax - vmin) + 1

    def raster(sel, px, py):
        uu, vv, zz, aa = u[sel], v[sel], z[sel], area2[sel]
        inside = (px <= umax[sel][:, None]) & (py <= vmax[sel][:, None])
        w0 = ((uu[:, 1:2] - px) * (vv[:, 2:3] - py) - (uu[:, 2:3] - px) * (vv[:, 1:2] - py)) / aa[:, None]
        w1 = ((uu[:, 2:3] - px) * (vv[:, 0:1] - py) - (uu[:, 0:1] - px) * (vv[:, 2:3] - py)) / aa[:, None]
        w2 = 1.0 - w0 - w1
        eps = -1e-9
        inside &= (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
        inv = w0 / zz[:, 0:1] + w1 / zz[:, 1:2] + w2 / zz[:, 2:3]
        inside &= inv > 0
        d = 1.0 / np.where(inside, inv, 1.0)
        np.minimum.at(zbuf, (py * w + px)[inside], d[inside])

    lo = 0
    for S in (1, 2, 4, 8, 16):
        sel = np.nonzero((size > lo) & (size <= S))[0]
        lo = S
        if not len(sel):
            continue
        oy, ox = np.mgrid[0:S, 0:S]
        px = umin[sel][:, None] + ox.reshape(1, -1)
        py = vmin[sel][:, None] + oy.reshape(1, -1)
        raster(sel, px, py)
    for k in np.nonzero(size > lo)[0]:
        oy, ox = np.mgrid[vmin[k]:vmax[k] + 1, umin[k]:umax[k] + 1]
        raster(np.array([k]), ox.reshape(1, -1), oy.reshape(1, -1))
    mask = np.isfinite(zbuf)
    return DepthMap(np.where(mask, zbuf, 0.0).reshape(h, w), mask.reshape(h, w))


__all__ = [
    "PointCloud", "TriangleMesh", "EmptyCloudError", "DegenerateInputError",
    "fuse_point_cloud", "cloud_to_depths", "default_voxel_size", "fill_small_holes",
    "SurfaceReconstructor", "TSDFReconstructor", "integrate_tsdf", "clean_mesh",
    "reconstruct_surface", "render_depth",
]
