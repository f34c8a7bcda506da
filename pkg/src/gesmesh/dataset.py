"""On-disk multi-view datasets: posed cameras, images, seed points and optional geometry."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera
from .imageio import ImageFileError, read_image, write_png
from .plyio import PlyError, read_ply, write_ply
from .scene import scene_extent
from .synth import (SHAPES, AnalyticSurface, make_cameras, make_surface, render_ground_truth,
                    seed_points)

CAMERAS_FILE = "cameras.json"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    root: Path
    cameras: list[Camera]
    image_paths: list[Path]
    test_cameras: list[Camera] = field(default_factory=list)
    test_image_paths: list[Path] = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)
    points: np.ndarray | None = None
    point_colors: np.ndarray | None = None
    surface: AnalyticSurface | None = None

    @property
    def extent(self) -> float:
        return scene_extent(np.stack([c.center for c in self.cameras]))

    def load_images(self, split: str = "train") -> list[np.ndarray]:
        """Read and validate every image of a split against its camera."""
        cams, paths = ((self.cameras, self.image_paths) if split == "train"
                       else (self.test_cameras, self.test_image_paths))
        out = []
        for cam, p in zip(cams, paths):
            try:
                img = read_image(p)
            except (ImageFileError, OSError) as e:
                raise DatasetError(f"unreadable image {p}: {e}") from e
            if img.ndim != 3 or img.shape[:2] != (cam.height, cam.width):
                raise DatasetError(f"image {p} has shape {img.shape[:2]}, camera expects "
                                   f"{cam.height}x{cam.width}")
            out.append(img)
        return out

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        meta_path = root / CAMERAS_FILE
        if not meta_path.is_file():
            raise DatasetError(f"missing {meta_path}")
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{meta_path} is not valid JSON: {e}") from e

        def frames(key):
            cams, paths = [], []
            for fr in meta.get(key, []):
                try:
                    cams.append(Camera.from_dict(fr))
                except (KeyError, ValueError, TypeError) as e:
                    raise DatasetError(f"bad camera entry in {key}: {e}") from e
                p = root / fr["image"]
                if not p.is_file():
                    raise DatasetError(f"missing image {p}")
                paths.append(p)
            return cams, paths

        cams, paths = frames("frames")
        if len(cams) < 2:
            raise DatasetError("a dataset needs at least 2 training views")
        tcams, tpaths = frames("test_frames")
        ds = cls(root, cams, paths, tcams, tpaths, tuple(meta.get("background", (0.0, 0.0, 0.0))))
        if meta.get("points"):
            try:
                el = read_ply((root / meta["points"]).read_bytes())["vertex"]
                ds.points = np.column_stack([el["x"], el["y"], el["z"]]).astype(np.float64)
                if "red" in el:
                    ds.point_colors = np.column_stack([el["red"], el["green"], el["blue"]]) / 255.0
            except (PlyError, KeyError, OSError) as e:
                raise DatasetError(f"bad seed point file: {e}") from e
        if meta.get("surface"):
            ds.surface = AnalyticSurface.from_dict(json.loads((root / meta["surface"]).read_text()))
        return ds


def write_points_ply(points, colors) -> bytes:
    c = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
    return write_ply({"vertex": {
        "x": points[:, 0].astype("<f4"), "y": points[:, 1].astype("<f4"), "z": points[:, 2].astype("<f4"),
        "red": c[:, 0], "green": c[:, 1], "blue": c[:, 2]}})


def make_synthetic(shape: str, out, views: int = 10, resolution: int = 128, seed: int = 0,
                   test_views: int = 3, n_points: int = 500, supersample: int = 3) -> Dataset:
    """Write a procedural scene with ray-cast images and noisy seed points."""
    if shape not in SHAPES:
        raise DatasetError(f"invalid shape {shape!r}; expected one of {', '.join(SHAPES)}")
    if views < 2:
        raise DatasetError("need at least 2 views")
    if resolution < 8:
        raise DatasetError("resolution must be at least 8")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    surface = make_surface(shape)
    cams = make_cameras(shape, views, resolution, rng)
    tcams = make_cameras(shape, test_views, resolution, rng, offset=0.37)
    meta = {"background": [0.0, 0.0, 0.0], "frames": [], "test_frames": [],
            "points": "points.ply", "surface": "surface.json"}
    for key, prefix, cs in (("frames", "train", cams), ("test_frames", "test", tcams)):
        for i, cam in enumerate(cs):
            name = f"images/{prefix}_{i:03d}.png"
            write_png(out / name, render_ground_truth(surface, cam, supersample))
            meta[key].append({"image": name, **cam.to_dict()})
    pts, cols = seed_points(surface, n_points, rng)
    (out / "points.ply").write_bytes(write_points_ply(pts, cols))
    (out / "surface.json").write_text(json.dumps(surface.to_dict(), indent=2))
    (out / CAMERAS_FILE).write_text(json.dumps(meta, indent=2))
    return Dataset.load(out)
