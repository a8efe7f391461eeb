"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or precondition error, 2 I/O error,
3 stage failure. Set ``MVSPL_LOG`` (DEBUG, INFO, WARNING, ...) for
progress output on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import MetricError, depth_error_stats, evaluate
from .fusion_render import EmptyCloudError
from .geometry import DepthMap
from .photometric_loss import score_synthesis, synthesize_views
from .plane_sweep import level_inputs
from .scene_io import (Config, FormatError, ValidationError, format_config, load_config,
                       load_mesh_ply, load_pointcloud_ply, load_scene, parse_config_value,
                       read_depth_dir, save_depth_pfm, save_mesh_ply, save_pointcloud_ply,
                       save_scene, view_name)
from .self_training import (StageError, initial_labels, resolve, run_pipeline, stage_filter,
                            stage_fuse, stage_infer, stage_reconstruct, stage_refine, stage_render)
from .synthetic import SURFACES, generate_synthetic_scene

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_STAGE = 0, 1, 2, 3

log = logging.getLogger("mvspl")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (override --config values)")
    g.add_argument("--config", type=Path, help="config file of 'key = value' lines")
    for f in dataclasses.fields(Config):
        names = [_flag(f.name)]
        if f.name == "iterations":
            names.insert(0, "-T")
        g.add_argument(*names, dest=f.name, default=None, metavar="V",
                       type=lambda s, k=f.name: parse_config_value(k, s))


def _add_common(p: argparse.ArgumentParser, scene: bool = True, out: bool = True) -> None:
    if scene:
        p.add_argument("scene", type=Path, help="scene directory")
    if out:
        p.add_argument("--out", "-o", type=Path, required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--format", choices=("text", "kv"), default="text")
    _add_config_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvspl", description="Multi-view stereo pseudo-label engine")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="render a synthetic scene directory")
    p.add_argument("--surface", choices=sorted(SURFACES), default="sphere")
    p.add_argument("--texture", choices=("checker", "noise", "uniform"), default="noise")
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--height", type=int, default=128, help="low-resolution height")
    p.add_argument("--width", type=int, default=160, help="low-resolution width")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, scene=False)

    p = sub.add_parser("infer", help="low-resolution depth inference")
    p.add_argument("--labels", type=Path, help="pseudo labels guiding the sweep")
    p.add_argument("--gate", action="store_true", help="apply the synthesis-quality gate (initial labels)")
    _add_common(p)

    p = sub.add_parser("refine", help="high-resolution refinement of inferred depths")
    p.add_argument("--depths", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("filter", help="cross-view vote filter")
    p.add_argument("--depths", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("fuse", help="fuse filtered depths and reconstruct a surface")
    p.add_argument("--depths", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("render", help="render a mesh into every view at low resolution")
    p.add_argument("--mesh", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("score", help="synthesis losses of the inferred probability volumes")
    p.add_argument("--labels", type=Path, help="pseudo labels guiding the sweep")
    _add_common(p, out=False)

    p = sub.add_parser("iterate", help="run the full self-training loop")
    p.add_argument("--keep-intermediate", action="store_true", help="write every stage's outputs")
    _add_common(p)

    p = sub.add_parser("eval", help="point-cloud or depth-map metrics")
    p.add_argument("--cloud", type=Path, help="reconstructed cloud (PLY)")
    p.add_argument("--reference", type=Path, help="reference cloud (PLY)")
    p.add_argument("--depths", type=Path, help="estimated depth directory")
    p.add_argument("--gt", type=Path, help="ground-truth depth directory")
    p.add_argument("--threshold", type=float, help="f-score distance threshold")
    p.add_argument("--tolerance", type=float, help="depth tolerance for the within-fraction")
    _add_common(p, scene=False, out=False)
    return parser


def _config(args) -> Config:
    base = Config()
    if getattr(args, "config", None) is not None:
        if not args.config.is_file():
            raise InputError(f"config file not found: {args.config}")
        base = load_config(args.config)
    changes = {f.name: getattr(args, f.name) for f in dataclasses.fields(Config)
               if getattr(args, f.name, None) is not None}
    try:
        return base.replace(**changes)
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc


def _scene(args):
    if not args.scene.is_dir():
        raise InputError(f"scene directory not found: {args.scene}")
    try:
        return load_scene(args.scene)
    except (FormatError, ValidationError) as exc:
        raise InputError(f"{args.scene}: {exc}") from exc


def _out_dir(args) -> Path:
    out = args.out
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise InputError(f"output directory {out} is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _depths(path: Path, n: int) -> list[DepthMap]:
    if not path.is_dir():
        raise InputError(f"depth directory not found: {path}")
    return read_depth_dir(path, n)


def _write_depths(depths, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for v, d in enumerate(depths):
        save_depth_pfm(d, path / f"{view_name(v)}.pfm")


def _emit(records: dict, fmt: str) -> None:
    for k, v in records.items():
        text = f"{v:.9g}" if isinstance(v, float) else str(v)
        print(f"{k}={text}" if fmt == "kv" else f"{k:<28} {text}")


def _check_shapes(depths, shape, what: str) -> None:
    for v, d in enumerate(depths):
        if d.shape != tuple(shape):
            raise UsageError(f"view {v}: {what} {d.shape} should be {tuple(shape)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    scene = generate_synthetic_scene(args.surface, args.texture, args.views, (args.height, args.width),
                                     seed=args.seed)
    save_scene(scene, out)
    _emit({"scene": str(out), "views": scene.n_views,
           "resolution_low": "%dx%d" % scene.resolution_low}, args.format)
    return EXIT_OK


def cmd_infer(args) -> int:
    config, scene = _config(args), _scene(args)
    labels = _depths(args.labels, scene.n_views) if args.labels else None
    if labels is not None:
        _check_shapes(labels, scene.resolution_low, "label map")
    out = _out_dir(args)
    levels = stage_infer(scene, config, labels)
    if args.gate:
        depths, _ = initial_labels(scene, config, levels)
    else:
        depths = [DepthMap(lv[-1].depth.values.astype(np.float32), lv[-1].depth.mask) for lv in levels]
    _write_depths(depths, out)
    _emit({f"coverage_{view_name(v)}": float(d.mask.mean()) for v, d in enumerate(depths)}, args.format)
    return EXIT_OK


def cmd_refine(args) -> int:
    config, scene = _config(args), _scene(args)
    depths = _depths(args.depths, scene.n_views)
    _check_shapes(depths, scene.resolution_low, "depth map")
    out = _out_dir(args)
    refined = stage_refine(scene, config, depths)
    _write_depths(refined, out)
    _emit({f"coverage_{view_name(v)}": float(d.mask.mean()) for v, d in enumerate(refined)}, args.format)
    return EXIT_OK


def cmd_filter(args) -> int:
    config, scene = _config(args), _scene(args)
    depths = _depths(args.depths, scene.n_views)
    _check_shapes(depths, scene.resolution_high, "depth map")
    out = _out_dir(args)
    kept, votes = stage_filter(scene, config, depths)
    _write_depths(kept, out)
    _write_depths([DepthMap(v.astype(np.float64), v > 0) for v in votes], out / "votes")
    _emit({"r_max": resolve(scene, config).r_max,
           **{f"kept_{view_name(v)}": float(d.mask.mean()) for v, d in enumerate(kept)}}, args.format)
    return EXIT_OK


def cmd_fuse(args) -> int:
    config, scene = _config(args), _scene(args)
    depths = _depths(args.depths, scene.n_views)
    _check_shapes(depths, scene.resolution_high, "depth map")
    out = _out_dir(args)
    cloud = stage_fuse(scene, depths)
    mesh = stage_reconstruct(scene, config, cloud)
    save_pointcloud_ply(cloud, out / "cloud.ply")
    save_mesh_ply(mesh, out / "mesh.ply")
    _emit({"points": len(cloud), "vertices": len(mesh.vertices), "faces": len(mesh.faces)}, args.format)
    return EXIT_OK


def cmd_render(args) -> int:
    config, scene = _config(args), _scene(args)
    if not args.mesh.is_file():
        raise InputError(f"mesh not found: {args.mesh}")
    try:
        mesh = load_mesh_ply(args.mesh)
    except (FormatError, ValidationError) as exc:
        raise InputError(f"{args.mesh}: {exc}") from exc
    out = _out_dir(args)
    rendered = stage_render(scene, config, mesh)
    _write_depths(rendered, out)
    _emit({f"coverage_{view_name(v)}": float(d.mask.mean()) for v, d in enumerate(rendered)}, args.format)
    return EXIT_OK


def cmd_score(args) -> int:
    config, scene = _config(args), _scene(args)
    labels = _depths(args.labels, scene.n_views) if args.labels else None
    levels = stage_infer(scene, config, labels)
    records = {}
    for v, lv in enumerate(levels):
        total = None
        for res in lv:
            ref, srcs, cam, cams = level_inputs(scene.images_low, scene.cameras_low, v, scene.pairs[v], res.scale)
            syn = synthesize_views(ref, srcs, cam, cams, res.hypotheses, res.probability)
            b = score_synthesis(syn, ref, res.depth, config.alphas, config.ssim_window)
            total = b if total is None else total + b
        for k, val in total.as_dict().items():
            records[f"view{v}.{k}"] = val
    _emit(records, args.format)
    return EXIT_OK


def cmd_iterate(args) -> int:
    config, scene = _config(args), _scene(args)
    out = _out_dir(args)
    result = run_pipeline(scene, config, out, keep_intermediate=args.keep_intermediate)
    (out / "config.txt").write_text(format_config(config))
    records = {}
    for row in result.history:
        t = row["iteration"]
        for k, v in row.items():
            if k != "iteration":
                records[f"iter{t}.{k}"] = v
    records["converged"] = result.converged
    _emit(records, args.format)
    if result.history[-1].get("low_coverage"):
        print(f"warning: final pseudo-label coverage {result.history[-1]['coverage']:.2%} is too low "
              "for reliable labels (texture-poor scene?)", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config(args)
    records = {}
    if args.cloud or args.reference:
        if not (args.cloud and args.reference):
            raise UsageError("--cloud and --reference go together")
        if args.threshold is None and config.f_threshold is None:
            raise UsageError("cloud evaluation needs --threshold or --f-threshold")
        for p in (args.cloud, args.reference):
            if not p.is_file():
                raise InputError(f"point cloud not found: {p}")
        try:
            recon, ref = load_pointcloud_ply(args.cloud), load_pointcloud_ply(args.reference)
        except (FormatError, ValidationError) as exc:
            raise InputError(str(exc)) from exc
        thr = args.threshold if args.threshold is not None else config.f_threshold
        records.update(evaluate(recon, ref, thr, config.max_dist).as_dict())
    if args.depths or args.gt:
        if not (args.depths and args.gt):
            raise UsageError("--depths and --gt go together")
        est, gt = _depths(args.depths, None), _depths(args.gt, None)
        if len(est) != len(gt):
            raise UsageError(f"{len(est)} estimated maps but {len(gt)} ground-truth maps")
        for v, (e, g) in enumerate(zip(est, gt)):
            s = depth_error_stats(e, g, args.tolerance)
            records[f"view{v}.mae"], records[f"view{v}.rmse"] = s.mae, s.rmse
            if args.tolerance is not None:
                records[f"view{v}.within"] = s.within
    if not records:
        raise UsageError("nothing to evaluate: give --cloud/--reference or --depths/--gt")
    _emit(records, args.format)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "infer": cmd_infer, "refine": cmd_refine, "filter": cmd_filter,
            "fuse": cmd_fuse, "render": cmd_render, "score": cmd_score, "iterate": cmd_iterate,
            "eval": cmd_eval}


def _setup_logging() -> None:
    level = os.environ.get("MVSPL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def dispatch(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"mvspl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"mvspl: stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (InputError, OSError, FormatError) as exc:
        print(f"mvspl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EmptyCloudError as exc:
        print(f"mvspl: stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (MetricError, ValueError) as exc:
        print(f"mvspl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
