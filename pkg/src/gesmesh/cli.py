"""Command line entry point: synth | train | extract-mesh | render | eval."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .camera import Camera
from .config import ConfigError, RunConfig
from .dataset import Dataset, DatasetError, make_synthetic
from .imageio import ImageFileError, read_image, write_pfm, write_png
from .losses import psnr, ssim
from .mesher import (MeshError, colorize_mesh, chamfer_to_surface, poisson_reconstruct,
                     sample_level_set, write_mesh_ply, write_obj)
from .optimizer import TrainingDiverged, train
from .plyio import PlyError
from .render import render
from .scene import init_from_points, load_ply, save_ply

log = logging.getLogger("gesmesh")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    d = RunConfig.load(args.config).to_dict() if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        d["iterations"] = args.iterations
    if getattr(args, "no_drt", False):
        d["drt"] = False
    if getattr(args, "freeze_shape", False):
        d["freeze_shape"] = True
    if args.out is not None:
        d["out_dir"] = str(args.out)
    return RunConfig.from_dict(d)


def cmd_synth(args) -> int:
    ds = make_synthetic(args.shape, args.out, views=args.views, resolution=args.resolution,
                        seed=args.seed or 0, test_views=args.test_views)
    print(f"wrote {len(ds.cameras)} training and {len(ds.test_cameras)} test views to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = Dataset.load(args.data)
    targets = ds.load_images("train")
    if ds.points is None:
        raise DatasetError("dataset has no seed point cloud")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    cloud = init_from_points(ds.points, ds.point_colors)
    res = train(cloud, ds.cameras, targets, cfg.schedule(), cfg.train_config(), out_dir=out)
    summary = {"splats": len(res.cloud), "train_seconds": res.train_seconds,
               "final": res.metrics[-1] if res.metrics else None}
    if ds.test_cameras:
        tests = ds.load_images("test")
        summary["test_psnr"] = float(np.mean([psnr(render(res.cloud, c, ds.background).image.rgb, t)
                                              for c, t in zip(ds.test_cameras, tests)]))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    print(json.dumps(summary, default=float))
    return EXIT_OK


def _cameras_from(path) -> list[Camera]:
    path = Path(path)
    if path.is_dir():
        return Dataset.load(path).cameras
    meta = json.loads(path.read_text())
    frames = meta["frames"] if isinstance(meta, dict) else meta
    return [Camera.from_dict(f) for f in frames]


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    alpha = args.alpha if args.alpha is not None else cfg.level_alpha
    grid = args.grid if args.grid is not None else cfg.grid
    cloud = load_ply(Path(args.checkpoint).read_bytes())
    cams = _cameras_from(args.cameras)
    pts = sample_level_set(cloud, cams, alpha=alpha, pixels_per_view=cfg.pixels_per_view,
                           steps=cfg.ray_steps, rng=np.random.default_rng(cfg.seed), rho=cfg.rho)
    report = pts.report()
    if len(pts) < 100:
        print(f"no surface at level alpha={alpha} ({len(pts)} level-set points)", file=sys.stderr)
        return EXIT_INVALID
    mesh = poisson_reconstruct(pts.positions, pts.normals, grid, smooth=cfg.poisson_smooth)
    mesh = colorize_mesh(mesh, cloud)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mesh_ply(mesh, out / "mesh.ply")
    nocolor = type(mesh)(mesh.vertices, mesh.faces, mesh.normals)
    write_obj(nocolor, out / "mesh.obj")
    report.update({k: v for k, v in mesh.info.items()})
    report.update(vertices=len(mesh.vertices), faces=len(mesh.faces), alpha=alpha)
    if args.cameras and Path(args.cameras).is_dir():
        ds = Dataset.load(args.cameras)
        if ds.surface is not None:
            report["chamfer"] = chamfer_to_surface(mesh, ds.surface)
            report["chamfer_relative"] = report["chamfer"] / ds.surface.size
    (out / "report.json").write_text(json.dumps(report, indent=2, default=float))
    print(json.dumps(report, default=float))
    return EXIT_OK


def cmd_render(args) -> int:
    cloud = load_ply(Path(args.checkpoint).read_bytes())
    cams = _cameras_from(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        img = render(cloud, cam).image
        write_png(out / f"view_{i:03d}.png", img.rgb)
        write_pfm(out / f"view_{i:03d}.pfm", img.rgb)
    print(f"rendered {len(cams)} views to {out}")
    return EXIT_OK


def _image_files(d: Path, ext: str) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.glob(f"*.{ext}"))}


def evaluate_dirs(rendered, gt) -> dict:
    """PSNR / SSIM per image pair (matched by file stem) and their means."""
    rendered, gt = Path(rendered), Path(gt)
    for d in (rendered, gt):
        if not d.is_dir():
            raise DatasetError(f"not a directory: {d}")
    a = {**_image_files(rendered, "png"), **_image_files(rendered, "pfm")}
    b = {**_image_files(gt, "png"), **_image_files(gt, "pfm")}
    names = sorted(set(a) & set(b))
    if not names:
        raise DatasetError("no matching images between the two directories")
    per = {}
    for n in names:
        x, y = read_image(a[n]), read_image(b[n])
        if x.shape != y.shape:
            raise DatasetError(f"resolution mismatch for {n}: {x.shape} vs {y.shape}")
        per[n] = {"psnr": psnr(x, y), "ssim": ssim(x, y)}
    return {"images": per,
            "mean_psnr": float(np.mean([v["psnr"] for v in per.values()])),
            "mean_ssim": float(np.mean([v["ssim"] for v in per.values()]))}


def cmd_eval(args) -> int:
    res = evaluate_dirs(args.rendered, args.gt)
    text = json.dumps(res, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gesmesh", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="JSON run configuration")
        sp.add_argument("--out", required=out_required)

    s = sub.add_parser("synth", help="generate a procedural dataset")
    s.add_argument("--shape", required=True)
    s.add_argument("--views", type=int, default=10)
    s.add_argument("--test-views", type=int, default=3)
    s.add_argument("--resolution", type=int, default=128)
    common(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimize splats on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--no-drt", action="store_true")
    t.add_argument("--freeze-shape", action="store_true")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract-mesh", help="level-set points, Poisson mesh and report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cameras", required=True, help="dataset directory or cameras JSON")
    e.add_argument("--alpha", type=float, default=None)
    e.add_argument("--grid", type=int, default=None)
    common(e)
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("render", help="render a checkpoint to PNG and PFM")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--cameras", required=True)
    common(r)
    r.set_defaults(func=cmd_render)

    v = sub.add_parser("eval", help="PSNR / SSIM between two image directories")
    v.add_argument("--rendered", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"gesmesh: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"training diverged at iteration {e.iteration}: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, ConfigError, ImageFileError, PlyError, MeshError, ValueError) as e:
        print(f"gesmesh: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"gesmesh: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
