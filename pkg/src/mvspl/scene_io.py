"""Readers and writers for scenes, cameras, depth maps, clouds, meshes and config.

Scene directory layout::

    scene/
      images/00000000.png ...       high-resolution RGB images
      cams/00000000_cam.txt ...     DTU-style cameras for the high-resolution images
      pair.txt                      MVSNet-style view pairs
      manifest.txt                  optional key = value (scene_id, resolution_low)
      depths_gt/00000000.pfm ...    optional low-resolution ground truth

Low-resolution images are produced by area-averaging the high-resolution
ones by an integer factor; low-resolution cameras are derived to match.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .fusion_render import PointCloud, TriangleMesh
from .geometry import Camera, DepthMap, GeometryError

logger = logging.getLogger(__name__)

DEFAULT_NUM_PLANES = 192


class FormatError(ValueError):
    pass


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Config:
    """Pipeline parameters. ``None`` means "derive automatically" (written as ``auto``)."""

    pyramid_levels_coarse: int = 2
    pyramid_levels_fine: int = 5
    hypotheses_coarse: int = 48
    hypotheses_fine: int = 8
    softmax_temperature: float = 3e-5
    alpha_g: float = 0.8
    alpha_ssim: float = 0.2
    alpha_p: float = 0.05
    alpha_s: float = 0.05
    ssim_window: int = 7
    gate_window: int = 7
    gate_ratio: float = 0.5
    gate_margin: float = 2e-3
    r_max: float | None = None
    n_min: int = 2
    vote_strict: bool = True
    discontinuity_guard: float = 10.0
    voxel_size: float | None = None
    truncation_voxels: float = 4.0
    max_hole_voxels: float = 16.0
    iterations: int = 3
    prior_bias: float = 0.1
    eps_stop: float | None = None
    max_dist: float = 20.0
    f_threshold: float | None = None
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        counts = ("pyramid_levels_coarse", "hypotheses_coarse", "hypotheses_fine",
                  "ssim_window", "gate_window", "jobs")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.pyramid_levels_fine < self.pyramid_levels_coarse:
            raise ValidationError("pyramid_levels_fine must be >= pyramid_levels_coarse")
        if self.hypotheses_coarse < 2 or self.hypotheses_fine < 2:
            raise ValidationError("hypothesis counts must be >= 2")
        if self.hypotheses_fine % 2:
            raise ValidationError("hypotheses_fine must be even")
        if not self.softmax_temperature > 0:
            raise ValidationError("softmax_temperature must be > 0")
        if self.r_max is not None and not self.r_max > 0:
            raise ValidationError("r_max must be > 0")
        if self.n_min < 1:
            raise ValidationError("n_min must be >= 1")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        for name in ("alpha_g", "alpha_ssim", "alpha_p", "alpha_s", "prior_bias"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("voxel_size", "eps_stop", "f_threshold"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValidationError(f"{name} must be > 0")
        if not self.truncation_voxels > 0 or not self.max_dist > 0:
            raise ValidationError("truncation_voxels and max_dist must be > 0")

    @property
    def alphas(self) -> tuple[float, float, float, float]:
        return (self.alpha_g, self.alpha_ssim, self.alpha_p, self.alpha_s)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def _config_parsers() -> dict:
    parsers = {}
    for f in dataclasses.fields(Config):
        default = f.default
        if isinstance(default, bool):
            parsers[f.name] = _parse_bool
        elif isinstance(default, int):
            parsers[f.name] = int
        elif default is None:
            parsers[f.name] = _parse_optional_float
        else:
            parsers[f.name] = float
    return parsers


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str) -> float | None:
    low = text.strip().lower()
    if low in ("auto", "none", ""):
        return None
    return float(text)


CONFIG_PARSERS = _config_parsers()


def parse_config_value(key: str, text: str):
    if key not in CONFIG_PARSERS:
        raise FormatError(f"unknown config key {key!r}")
    try:
        return CONFIG_PARSERS[key](text)
    except ValueError as exc:
        raise FormatError(f"bad value for {key}: {exc}") from None


def load_config(path) -> Config:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        try:
            values[key.strip()] = parse_config_value(key.strip(), value.strip())
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return Config(**values)


def format_config(config: Config) -> str:
    lines = []
    for f in dataclasses.fields(Config):
        v = getattr(config, f.name)
        if v is None:
            text = "auto"
        elif isinstance(v, bool):
            text = "true" if v else "false"
        else:
            text = repr(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def save_config(config: Config, path) -> None:
    Path(path).write_text(format_config(config))


# ---------------------------------------------------------------------------
# cameras


def load_camera(path) -> Camera:
    """Read a DTU/MVSNet camera file (extrinsic 4x4, intrinsic 3x3, depth range)."""
    lines = [(i, ln.strip()) for i, ln in enumerate(Path(path).read_text().splitlines(), 1)]
    lines = [(i, ln) for i, ln in lines if ln]
    pos = 0

    def expect_word(word):
        nonlocal pos
        if pos >= len(lines) or lines[pos][1].lower() != word:
            lineno = lines[pos][0] if pos < len(lines) else len(lines) + 1
            raise FormatError(f"{path}:{lineno}: expected '{word}'")
        pos += 1

    def read_row(n):
        nonlocal pos
        if pos >= len(lines):
            raise FormatError(f"{path}: unexpected end of file")
        lineno, text = lines[pos]
        try:
            row = [float(v) for v in text.split()]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected {n} numbers, got {text!r}") from None
        if len(row) != n:
            raise FormatError(f"{path}:{lineno}: expected {n} numbers, got {len(row)}")
        pos += 1
        return row

    expect_word("extrinsic")
    E = np.array([read_row(4) for _ in range(4)])
    expect_word("intrinsic")
    K = np.array([read_row(3) for _ in range(3)])
    if pos >= len(lines):
        raise FormatError(f"{path}: missing depth range line")
    lineno, text = lines[pos]
    try:
        rng = [float(v) for v in text.split()]
    except ValueError:
        raise FormatError(f"{path}:{lineno}: bad depth range {text!r}") from None
    if len(rng) == 2:
        d_min, d_max = rng[0], rng[0] + rng[1] * (DEFAULT_NUM_PLANES - 1)
    elif len(rng) == 4:
        d_min, d_max = rng[0], rng[3]
    else:
        raise FormatError(f"{path}:{lineno}: depth range needs 2 or 4 numbers")
    if d_min <= 0:
        raise ValidationError(f"{path}: d_min must be positive")
    try:
        return Camera(K, E[:3, :3], E[:3, 3], d_min, d_max)
    except GeometryError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def format_camera(camera: Camera) -> str:
    E = camera.extrinsic()
    out = ["extrinsic"]
    out += [" ".join(repr(float(v)) for v in row) for row in E]
    out += ["", "intrinsic"]
    out += [" ".join(repr(float(v)) for v in row) for row in camera.K]
    interval = (camera.d_max - camera.d_min) / (DEFAULT_NUM_PLANES - 1)
    out += ["", f"{camera.d_min!r} {interval!r} {DEFAULT_NUM_PLANES} {camera.d_max!r}"]
    return "\n".join(out) + "\n"


def save_camera(camera: Camera, path) -> None:
    Path(path).write_text(format_camera(camera))


# ---------------------------------------------------------------------------
# PFM


def load_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array (rows top to bottom)."""
    with open(path, "rb") as fh:
        tag = fh.readline().rstrip()
        if tag == b"Pf":
            channels = 1
        elif tag == b"PF":
            channels = 3
        else:
            raise FormatError(f"{path}: not a PFM header ({tag[:8]!r})")
        dims = fh.readline().split()
        try:
            width, height = int(dims[0]), int(dims[1])
        except (IndexError, ValueError):
            raise FormatError(f"{path}: bad PFM dimensions") from None
        if width <= 0 or height <= 0:
            raise FormatError(f"{path}: non-positive PFM dimensions")
        try:
            scale = float(fh.readline())
        except ValueError:
            raise FormatError(f"{path}: bad PFM scale") from None
        if scale == 0:
            raise FormatError(f"{path}: PFM scale must be non-zero")
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        payload = fh.read(count * 4)
    if len(payload) != count * 4:
        raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(data.reshape(shape)).copy()


def save_pfm(array, path) -> None:
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        tag = b"Pf"
    elif array.ndim == 3 and array.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValidationError("PFM supports (H, W) or (H, W, 3) arrays")
    height, width = array.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{width} {height}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(array).astype("<f4").tobytes())


def load_depth_pfm(path) -> DepthMap:
    """Read a depth PFM; values <= 0 or non-finite become invalid pixels."""
    data = load_pfm(path)
    if data.ndim != 2:
        raise FormatError(f"{path}: depth PFM must be single-channel")
    return DepthMap.from_array(data)


def save_depth_pfm(depth: DepthMap, path) -> None:
    """Write a depth map; invalid pixels are stored as 0."""
    save_pfm(np.where(depth.mask, depth.values, 0).astype(np.float32), path)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _check_finite(points, what):
    if points.size and not np.all(np.isfinite(points)):
        raise ValidationError(f"{what} contains non-finite coordinates")


def _write_ply(path, vertex_props, vertex_data, faces=None, binary=True):
    n = len(vertex_data[0]) if vertex_data else 0
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}"]
    header += [f"property {typ} {name}" for name, typ in vertex_props]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dtype = np.dtype([(name, "<" + _PLY_TYPES[typ]) for name, typ in vertex_props])
            rec = np.empty(n, dtype=dtype)
            for (name, _), col in zip(vertex_props, vertex_data):
                rec[name] = col
            fh.write(rec.tobytes())
            if faces is not None and len(faces):
                fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
                frec = np.empty(len(faces), dtype=fdt)
                frec["n"] = 3
                frec["idx"] = faces
                fh.write(frec.tobytes())
        else:
            rows = []
            for i in range(n):
                rows.append(" ".join(
                    repr(float(col[i])) if typ in ("float", "double") else str(int(col[i]))
                    for (_, typ), col in zip(vertex_props, vertex_data)))
            if faces is not None:
                rows += [f"3 {a} {b} {c}" for a, b, c in faces]
            if rows:
                fh.write(("\n".join(rows) + "\n").encode("ascii"))


def save_pointcloud_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write a point cloud with its per-point view id and source pixel."""
    _check_finite(cloud.points, "point cloud")
    props = [("x", "double"), ("y", "double"), ("z", "double"),
             ("view", "int"), ("px", "int"), ("py", "int")]
    data = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2],
            cloud.view_ids, cloud.pixels[:, 0], cloud.pixels[:, 1]]
    _write_ply(path, props, data, binary=binary)


def save_mesh_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    _check_finite(mesh.vertices, "mesh")
    props = [("x", "double"), ("y", "double"), ("z", "double")]
    v = mesh.vertices
    _write_ply(path, props, [v[:, 0], v[:, 1], v[:, 2]], faces=mesh.faces, binary=binary)


def load_ply(path) -> dict:
    """Read vertex properties and (triangle) faces from an ascii or binary-LE PLY.

    Returns ``{"vertex": {name: array}, "faces": (F, 3) int array}``.
    """
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FormatError(f"{path}: missing 'ply' magic")
        fmt = None
        elements = []  # [name, count, props]
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: unterminated header")
            parts = line.decode("ascii").split()
            if not parts or parts[0] in ("comment", "obj_info"):
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append([parts[1], int(parts[2]), []])
            elif parts[0] == "property":
                elements[-1][2].append(parts[1:])
            elif parts[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise FormatError(f"{path}: unsupported PLY format {fmt!r}")
        body = fh.read()

    out = {"vertex": {}, "faces": np.zeros((0, 3), dtype=np.int64)}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            if name == "vertex":
                nprop = len(props)
                vals = np.array(tokens[pos:pos + count * nprop], dtype=np.float64).reshape(count, nprop)
                pos += count * nprop
                for k, p in enumerate(props):
                    out["vertex"][p[-1]] = vals[:, k].astype(_PLY_TYPES[p[0]])
            elif name == "face":
                faces = []
                for _ in range(count):
                    n = int(tokens[pos])
                    faces.append([int(t) for t in tokens[pos + 1:pos + 1 + n]])
                    pos += 1 + n
                out["faces"] = np.array(faces, dtype=np.int64).reshape(-1, 3)
        return out

    pos = 0
    for name, count, props in elements:
        if name == "face":
            p = props[0]
            if p[0] != "list":
                raise FormatError(f"{path}: face element must be a list property")
            cdt, idt = "<" + _PLY_TYPES[p[1]], "<" + _PLY_TYPES[p[2]]
            fdt = np.dtype([("n", cdt), ("idx", idt, (3,))])
            need = count * fdt.itemsize
            if len(body) - pos < need:
                raise FormatError(f"{path}: truncated face data")
            rec = np.frombuffer(body, dtype=fdt, count=count, offset=pos)
            if count and np.any(rec["n"] != 3):
                raise FormatError(f"{path}: only triangle faces are supported")
            out["faces"] = rec["idx"].astype(np.int64)
            pos += need
        else:
            dt = np.dtype([(p[-1], "<" + _PLY_TYPES[p[0]]) for p in props])
            need = count * dt.itemsize
            if len(body) - pos < need:
                raise FormatError(f"{path}: truncated {name} data")
            rec = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            if name == "vertex":
                out["vertex"] = {p[-1]: rec[p[-1]].copy() for p in props}
            pos += need
    return out


def load_pointcloud_ply(path) -> PointCloud:
    data = load_ply(path)["vertex"]
    n = len(data.get("x", []))
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64) if n else np.zeros((0, 3))
    views = data.get("view", np.zeros(n)).astype(np.int64)
    pixels = np.stack([data.get("px", np.zeros(n)), data.get("py", np.zeros(n))], axis=1).astype(np.int64)
    return PointCloud(pts, views, pixels.reshape(-1, 2))


def load_mesh_ply(path) -> TriangleMesh:
    data = load_ply(path)
    v = data["vertex"]
    n = len(v.get("x", []))
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64) if n else np.zeros((0, 3))
    return TriangleMesh(verts, data["faces"])


# ---------------------------------------------------------------------------
# images


def load_image(path) -> np.ndarray:
    """8-bit RGB image as float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(image, path) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    Image.fromarray(arr, "RGB").save(path)


def area_downsample(image, factor: int) -> np.ndarray:
    """Mean-pool an (H, W[, C]) array by an integer factor."""
    if factor == 1:
        return np.asarray(image, dtype=np.float64).copy()
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if H % factor or W % factor:
        raise ValidationError(f"image {H}x{W} not divisible by {factor}")
    shape = (H // factor, factor, W // factor, factor) + image.shape[2:]
    return image.reshape(shape).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# pair list and scenes


def load_pair_file(path) -> list[list[int]]:
    """MVSNet pair.txt: view count, then per view its id and scored source list."""
    tokens = Path(path).read_text().split()
    try:
        n = int(tokens[0])
        pos = 1
        pairs: dict[int, list[int]] = {}
        for _ in range(n):
            ref = int(tokens[pos])
            k = int(tokens[pos + 1])
            srcs = [int(tokens[pos + 2 + 2 * i]) for i in range(k)]
            pairs[ref] = srcs
            pos += 2 + 2 * k
    except (IndexError, ValueError):
        raise FormatError(f"{path}: malformed pair file") from None
    return [pairs[i] for i in sorted(pairs)]


def save_pair_file(pairs: list[list[int]], path) -> None:
    lines = [str(len(pairs))]
    for ref, srcs in enumerate(pairs):
        lines.append(str(ref))
        lines.append(" ".join([str(len(srcs))] + [f"{s} {100.0 - k:.1f}" for k, s in enumerate(srcs)]))
    Path(path).write_text("\n".join(lines) + "\n")


def default_pairs(n_views: int) -> list[list[int]]:
    return [[j for j in range(n_views) if j != i] for i in range(n_views)]


@dataclass
class SceneManifest:
    scene_id: str
    views: list[tuple[Path, Path]]
    pair_list: list[list[int]]
    resolution_low: tuple[int, int]
    resolution_high: tuple[int, int]

    def __post_init__(self):
        n = len(self.views)
        if n < 2:
            raise ValidationError("a scene needs at least 2 views")
        if len(self.pair_list) != n:
            raise ValidationError("pair list must have one entry per view")
        for ref, srcs in enumerate(self.pair_list):
            for s in srcs:
                if not 0 <= s < n or s == ref:
                    raise ValidationError(f"pair list of view {ref} references invalid view {s}")
        lo, hi = self.resolution_low, self.resolution_high
        if lo[0] > hi[0] or lo[1] > hi[1]:
            raise ValidationError("resolution_high must be >= resolution_low")

    @property
    def low_factor(self) -> int:
        f = self.resolution_high[0] // self.resolution_low[0]
        if (self.resolution_low[0] * f, self.resolution_low[1] * f) != tuple(self.resolution_high):
            raise ValidationError("resolution_high must be an integer multiple of resolution_low")
        return f


@dataclass
class Scene:
    """Calibrated multi-view input held in memory (high-res images are the source)."""

    scene_id: str
    images_high: list[np.ndarray]
    cameras_high: list[Camera]
    pairs: list[list[int]]
    low_factor: int = 2
    gt_depths_low: list[DepthMap] | None = None
    _low: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.images_high) < 2:
            raise ValidationError("a scene needs at least 2 views")
        if len(self.cameras_high) != len(self.images_high) or len(self.pairs) != len(self.images_high):
            raise ValidationError("images, cameras and pairs must have one entry per view")

    @property
    def n_views(self) -> int:
        return len(self.images_high)

    @property
    def resolution_high(self) -> tuple[int, int]:
        return self.images_high[0].shape[:2]

    @property
    def resolution_low(self) -> tuple[int, int]:
        h, w = self.resolution_high
        return (h // self.low_factor, w // self.low_factor)

    def _build_low(self):
        if self._low is None:
            imgs = [area_downsample(im, self.low_factor) for im in self.images_high]
            cams = [c.scaled(1.0 / self.low_factor) for c in self.cameras_high]
            self._low = (imgs, cams)
        return self._low

    @property
    def images_low(self) -> list[np.ndarray]:
        return self._build_low()[0]

    @property
    def cameras_low(self) -> list[Camera]:
        return self._build_low()[1]


def _view_files(scene_dir: Path):
    images = sorted(p for p in (scene_dir / "images").iterdir()
                    if p.suffix.lower() in (".png", ".ppm", ".jpg", ".jpeg"))
    cams = sorted((scene_dir / "cams").glob("*_cam.txt"))
    if len(images) != len(cams):
        raise ValidationError(f"{scene_dir}: {len(images)} images but {len(cams)} cameras")
    return images, cams


def read_manifest_file(path) -> dict:
    out = {}
    if Path(path).exists():
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if "=" in line:
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def load_manifest(scene_dir) -> SceneManifest:
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise FileNotFoundError(f"scene directory not found: {scene_dir}")
    for sub in ("images", "cams"):
        if not (scene_dir / sub).is_dir():
            raise FileNotFoundError(f"missing {scene_dir / sub}")
    images, cams = _view_files(scene_dir)
    meta = read_manifest_file(scene_dir / "manifest.txt")
    pair_path = scene_dir / "pair.txt"
    pairs = load_pair_file(pair_path) if pair_path.exists() else default_pairs(len(images))
    with Image.open(images[0]) as im:
        w, h = im.size
    if "resolution_low" in meta:
        lh, lw = (int(v) for v in meta["resolution_low"].replace("x", " ").split())
    else:
        lh, lw = h // 2, w // 2
    return SceneManifest(meta.get("scene_id", scene_dir.name), list(zip(images, cams)),
                         pairs, (lh, lw), (h, w))


def load_scene(scene_dir) -> Scene:
    scene_dir = Path(scene_dir)
    manifest = load_manifest(scene_dir)
    images = [load_image(p) for p, _ in manifest.views]
    cameras = [load_camera(c) for _, c in manifest.views]
    for p, im in zip(manifest.views, images):
        if im.shape[:2] != manifest.resolution_high:
            raise ValidationError(f"{p[0]}: image size differs from the first view")
    gt = None
    gt_dir = scene_dir / "depths_gt"
    if gt_dir.is_dir():
        files = sorted(gt_dir.glob("*.pfm"))
        if len(files) == len(images):
            gt = [load_depth_pfm(f) for f in files]
    return Scene(manifest.scene_id, images, cameras, manifest.pair_list,
                 manifest.low_factor, gt)


def view_name(index: int) -> str:
    return f"{index:08d}"


def save_scene(scene: Scene, scene_dir) -> None:
    scene_dir = Path(scene_dir)
    (scene_dir / "images").mkdir(parents=True, exist_ok=True)
    (scene_dir / "cams").mkdir(parents=True, exist_ok=True)
    for i, (im, cam) in enumerate(zip(scene.images_high, scene.cameras_high)):
        save_image(im, scene_dir / "images" / f"{view_name(i)}.png")
        save_camera(cam, scene_dir / "cams" / f"{view_name(i)}_cam.txt")
    save_pair_file(scene.pairs, scene_dir / "pair.txt")
    lh, lw = scene.resolution_low
    (scene_dir / "manifest.txt").write_text(
        f"scene_id = {scene.scene_id}\nresolution_low = {lh} {lw}\n")
    if scene.gt_depths_low is not None:
        (scene_dir / "depths_gt").mkdir(exist_ok=True)
        for i, d in enumerate(scene.gt_depths_low):
            save_depth_pfm(d, scene_dir / "depths_gt" / f"{view_name(i)}.pfm")


def read_depth_dir(path, n_views: int | None = None) -> list[DepthMap]:
    files = sorted(Path(path).glob("*.pfm"))
    if n_views is not None and len(files) < n_views:
        raise FileNotFoundError(f"{path}: expected {n_views} depth maps, found {len(files)}")
    return [load_depth_pfm(f) for f in files[: n_views or len(files)]]


def write_depth_dir(depths, path) -> None:
    Path(path).mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(depths):
        save_depth_pfm(d, Path(path) / f"{view_name(i)}.pfm")

