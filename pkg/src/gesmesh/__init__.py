"""Generalized-exponential splatting with surface regularization and mesh extraction."""
import os

# the TBB layer is often missing; workqueue/omp ship with numba itself
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numba  # noqa: E402

_workers = os.environ.get("GESMESH_WORKERS")
if _workers:
    numba.set_num_threads(max(1, min(int(_workers), numba.config.NUMBA_NUM_THREADS)))

from .camera import Camera, look_at  # noqa: E402
from .kernel import SplatCore, shape_modulation  # noqa: E402
from .render import RasterSettings, render, render_backward  # noqa: E402
from .scene import SplatCloud, init_from_points, load_ply, save_ply  # noqa: E402

__all__ = ["Camera", "look_at", "SplatCore", "shape_modulation", "RasterSettings", "render",
           "render_backward", "SplatCloud", "init_from_points", "load_ply", "save_ply"]
