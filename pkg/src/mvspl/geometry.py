"""Pinhole camera math: projection, rigid transforms, warping and sampling.

Conventions: x right, y down, z forward. Extrinsics map world to camera,
``X_cam = R @ X_world + t``. Pixel centers sit on integer coordinates, so
the center of pixel (row 0, col 0) is the continuous point (0.0, 0.0).
Pixel arrays are ``(..., 2)`` in ``(x, y)`` = ``(col, row)`` order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-5


class GeometryError(ValueError):
    pass


class InvalidDepthError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass(frozen=True)
class Camera:
    """Calibrated pinhole camera with a depth search range."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    d_min: float
    d_max: float
    K_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(K)) or not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise GeometryError("camera entries must be finite")
        if abs(np.linalg.det(K)) < 1e-12:
            raise GeometryError("intrinsic matrix is singular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0:
            raise GeometryError("intrinsic matrix must be upper triangular with positive focals")
        if np.abs(R.T @ R - np.eye(3)).max() >= ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if not (0 < self.d_min < self.d_max):
            raise GeometryError(f"invalid depth range ({self.d_min}, {self.d_max})")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "d_min", float(self.d_min))
        object.__setattr__(self, "d_max", float(self.d_max))
        object.__setattr__(self, "K_inv", np.linalg.inv(K))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def focal(self) -> float:
        return float(0.5 * (self.K[0, 0] + self.K[1, 1]))

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resampled by ``factor`` (0.5 = half size).

        Keeps the integer-pixel-center convention: ``x' = (x + 0.5) * factor - 0.5``.
        """
        K = self.K.copy()
        K[0, 0] *= factor
        K[0, 1] *= factor
        K[1, 1] *= factor
        K[0, 2] = (K[0, 2] + 0.5) * factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * factor - 0.5
        return Camera(K, self.R, self.t, self.d_min, self.d_max)

    def extrinsic(self) -> np.ndarray:
        E = np.eye(4)
        E[:3, :3] = self.R
        E[:3, 3] = self.t
        return E


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``(H, W, 2)`` array of pixel-center coordinates in (x, y) order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def unproject(pixels, depth, K) -> np.ndarray:
    """Back-project pixels at the given depths into the camera frame.

    ``X = d * K^-1 [x, y, 1]^T``. Raises InvalidDepthError for depth <= 0.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise InvalidDepthError("depth must be positive")
    K = K.K if isinstance(K, Camera) else np.asarray(K, dtype=np.float64)
    K_inv = np.linalg.inv(K)
    hom = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
    rays = hom @ K_inv.T
    return rays * depth[..., None]


def project(points, K) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points; returns ``(pixels, depth)`` with depth = z."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("point lies on or behind the camera plane")
    K = K.K if isinstance(K, Camera) else np.asarray(K, dtype=np.float64)
    hom = points @ K.T
    return hom[..., :2] / hom[..., 2:3], z.copy()


def project_unchecked(points, K) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`project` but returns NaN pixels for z <= 0 instead of raising."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    hom = points @ np.asarray(K).T
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = hom[..., :2] / hom[..., 2:3]
    pix[~(z > 0)] = np.nan
    return pix, z.copy()


def cam_to_world(points, camera: Camera) -> np.ndarray:
    """``P = R^T (X - t)``."""
    points = np.asarray(points, dtype=np.float64)
    return (points - camera.t) @ camera.R


def world_to_cam(points, camera: Camera) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ camera.R.T + camera.t


def relative_pose(cam_i: Camera, cam_j: Camera) -> tuple[np.ndarray, np.ndarray]:
    """``(R_ij, T_ij)`` such that ``X_j = R_ij X_i + T_ij`` for camera-frame points."""
    R_ij = cam_j.R @ cam_i.R.T
    T_ij = cam_j.t - R_ij @ cam_i.t
    return R_ij, T_ij


def bilinear_sample(grid, x, y, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``grid`` (H, W) or (H, W, C) at continuous pixel positions.

    A sample is valid when it lies in ``[0, W-1] x [0, H-1]`` and every
    neighbor carrying nonzero weight is unmasked. Invalid samples return 0.
    """
    grid = np.asarray(grid)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    H, W = grid.shape[:2]
    valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(H - 2, 0))
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        for w, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
            valid &= ~((w > 0) & ~mask[yy, xx])
    g00, g01, g10, g11 = grid[y0, x0], grid[y0, x1], grid[y1, x0], grid[y1, x1]
    if grid.ndim == 3:
        w00, w01, w10, w11 = (w[..., None] for w in (w00, w01, w10, w11))
    out = g00 * w00 + g01 * w01 + g10 * w10 + g11 * w11
    if grid.ndim == 3:
        out = np.where(valid[..., None], out, 0.0)
    else:
        out = np.where(valid, out, 0.0)
    return out, valid


def plane_homography(cam_ref: Camera, cam_src: Camera, depth: float) -> np.ndarray:
    """Homography taking reference pixels to source pixels for the plane z = depth
    in the reference camera frame: ``H = K_s (R_rs + T_rs n^T / d) K_r^-1``."""
    if not depth > 0:
        raise InvalidDepthError("plane depth must be positive")
    R_rs, T_rs = relative_pose(cam_ref, cam_src)
    n = np.array([0.0, 0.0, 1.0])
    return cam_src.K @ (R_rs + np.outer(T_rs, n) / depth) @ cam_ref.K_inv


def homography_warp(src_image, cam_ref: Camera, cam_src: Camera, depth: float,
                    shape: tuple[int, int] | None = None, src_mask=None):
    """Warp a source image into the reference view through a fronto-parallel plane.

    Returns ``(warped, mask)`` on the reference grid of ``shape`` (defaults to
    the source shape); ``mask`` is False where the sample falls outside.
    """
    src_image = np.asarray(src_image, dtype=np.float64)
    h, w = shape if shape is not None else src_image.shape[:2]
    H = plane_homography(cam_ref, cam_src, depth)
    pts = pixel_grid(h, w)
    hom = pts @ H[:, :2].T + H[:, 2]
    z = hom[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = np.where(z > 0, hom[..., 0] / z, np.nan)
        ys = np.where(z > 0, hom[..., 1] / z, np.nan)
    return bilinear_sample(src_image, xs, ys, src_mask)


def reproject_pixels(depth, cam_ref: Camera, cam_src: Camera, pixels=None):
    """Map reference pixels with per-pixel depth into source pixel coordinates.

    ``depth`` has shape ``S`` matching ``pixels[..., 0]`` (defaults to the
    full grid of ``depth``'s leading two dims, broadcasting any trailing
    hypothesis axis). Returns ``(x, y, z_src)``; non-positive ``z_src`` gives NaN.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if pixels is None:
        pixels = pixel_grid(depth.shape[0], depth.shape[1])
        if depth.ndim == 3:
            pixels = pixels[:, :, None, :]
    pixels = np.asarray(pixels, dtype=np.float64)
    R_rs, T_rs = relative_pose(cam_ref, cam_src)
    rays = pixels[..., 0:1] * cam_ref.K_inv[:, 0] + pixels[..., 1:2] * cam_ref.K_inv[:, 1] + cam_ref.K_inv[:, 2]
    # Combined linear map: source homogeneous = K_s R_rs K_r^-1 x * d + K_s T_rs
    M = cam_src.K @ R_rs
    b = cam_src.K @ T_rs
    hom = (rays @ M.T) * depth[..., None] + b
    z = hom[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = np.where(z > 0, hom[..., 0] / z, np.nan)
        ys = np.where(z > 0, hom[..., 1] / z, np.nan)
    return xs, ys, z


def depth_warp(src_image, cam_ref: Camera, cam_src: Camera, depth, src_mask=None):
    """Warp a source image into the reference grid using per-pixel depths.

    ``depth`` is ``(H, W)`` or ``(H, W, M)``; output has matching leading
    shape plus the source channel axis, and a validity mask.
    """
    xs, ys, _ = reproject_pixels(depth, cam_ref, cam_src)
    return bilinear_sample(np.asarray(src_image, dtype=np.float64), xs, ys, src_mask)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    # with up = -y, this keeps +x right and +y down
    x = -x
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


@dataclass
class DepthMap:
    """Depth grid in scene units with a validity mask; invalid entries hold 0."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError("depth values and mask must be matching 2D arrays")
        self.values = np.where(self.mask, self.values, 0).astype(self.values.dtype, copy=False)

    @classmethod
    def from_array(cls, values) -> "DepthMap":
        """Treat non-finite and non-positive entries as invalid."""
        values = np.asarray(values)
        with np.errstate(invalid="ignore"):
            mask = np.isfinite(values) & (values > 0)
        return cls(np.where(mask, values, 0), mask)

    @classmethod
    def empty(cls, shape, dtype=np.float64) -> "DepthMap":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def coverage(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    def astype(self, dtype) -> "DepthMap":
        return DepthMap(self.values.astype(dtype), self.mask.copy())

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.mask.copy())
