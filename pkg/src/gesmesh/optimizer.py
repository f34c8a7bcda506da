"""Update rule, resolution schedule and the phased training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from .camera import Camera
from .kernel import SHAPE_MAX, SHAPE_MIN, shape_from_latent, shape_to_latent
from .losses import RGB_LAMBDA, loss_rgb, opacity_entropy_loss, psnr
from .regularizer import SCALE_FLOOR, gsr_losses, sample_points
from .render import ImageBuffer, RasterSettings, SplatGrads, render, render_backward
from .scene import (PARAM_FIELDS, DensifyConfig, EditSummary, KnnIndex, SplatCloud,
                    densify_and_prune, prune_mask, save_ply, scene_extent)

log = logging.getLogger(__name__)

MIN_SIDE = 8


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite or the cloud empties.

    ``checkpoint`` holds the last cloud that produced a finite loss.
    """

    def __init__(self, message: str, iteration: int, checkpoint: SplatCloud | None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


# --------------------------------------------------------------------------- schedule

def drt_factor(iteration: int, total: int, start: float = 0.26, end: float = 1.0) -> float:
    """Cosine ramp of the training resolution factor from ``start`` to ``end``."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if not (0 < start <= 1 and 0 < end <= 1):
        raise ValueError("start and end factors must lie in (0, 1]")
    if total <= 0:
        return float(end)
    t = min(iteration, total) / total
    return float(end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * t)))


DEFAULT_LR = {
    "position": 1.6e-4,  # times scene extent
    "rotation": 1e-3,
    "scale": 5e-3,
    "opacity": 5e-2,
    "color": 2.5e-3,
    "shape": 1.5e-3,
}


@dataclass
class TrainSchedule:
    total: int = 15000
    photometric: int = 7000
    entropy: int = 1800
    gsr: int = 6200
    drt_fraction: float = 0.75
    drt_start: float = 0.26
    drt_end: float = 1.0
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    position_lr_final_ratio: float = 0.01

    def __post_init__(self):
        if min(self.photometric, self.entropy, self.gsr) < 0:
            raise ValueError("phase spans must be non-negative")
        if self.photometric + self.entropy + self.gsr != self.total:
            raise ValueError(f"phase spans {self.photometric}+{self.entropy}+{self.gsr} "
                             f"do not add up to total {self.total}")
        if not 0 < self.drt_fraction <= 1:
            raise ValueError("drt_fraction must lie in (0, 1]")
        if not (0 < self.drt_start <= 1 and 0 < self.drt_end <= 1):
            raise ValueError("DRT factors must lie in (0, 1]")
        missing = set(DEFAULT_LR) - set(self.lr)
        if missing:
            raise ValueError(f"missing learning rates: {sorted(missing)}")

    @classmethod
    def scaled(cls, total: int, **kw) -> "TrainSchedule":
        """Default 7000 / 1800 / 6200 split rescaled to ``total`` iterations."""
        if total < 1:
            raise ValueError("total iterations must be >= 1")
        photo = int(round(total * 7000 / 15000))
        ent = int(round(total * 1800 / 15000))
        return cls(total=total, photometric=photo, entropy=ent, gsr=total - photo - ent, **kw)

    @property
    def drt_iterations(self) -> int:
        return int(round(self.drt_fraction * self.total))

    def phase(self, iteration: int) -> str:
        if iteration < self.photometric:
            return "photometric"
        if iteration < self.photometric + self.entropy:
            return "entropy"
        return "gsr"

    def factor(self, iteration: int) -> float:
        return drt_factor(iteration, self.drt_iterations, self.drt_start, self.drt_end)

    def position_lr(self, iteration: int, extent: float) -> float:
        # log-linear decay over the whole run
        t = min(max(iteration / max(self.total, 1), 0.0), 1.0)
        lr0 = self.lr["position"] * extent
        return float(math.exp((1 - t) * math.log(lr0) + t * math.log(lr0 * self.position_lr_final_ratio)))


@dataclass
class ResolutionState:
    factor: float
    width: int
    height: int

    @classmethod
    def at(cls, factor: float, full_width: int, full_height: int) -> "ResolutionState":
        w, h = _scaled_size(full_width, full_height, factor)
        return cls(float(factor), w, h)


def _scaled_size(width: int, height: int, factor: float) -> tuple[int, int]:
    if not 0 < factor <= 1:
        raise ValueError(f"resolution factor must lie in (0, 1], got {factor}")
    # sides already below the minimum are allowed to shrink further
    w = max(int(round(width * factor)), 1 if width < MIN_SIDE else MIN_SIDE)
    h = max(int(round(height * factor)), 1 if height < MIN_SIDE else MIN_SIDE)
    return w, h


@lru_cache(maxsize=256)
def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) operator averaging input samples over each output cell."""
    A = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        a, b = i * step, (i + 1) * step
        for j in range(int(math.floor(a)), min(int(math.ceil(b)), n_in)):
            A[i, j] = min(b, j + 1) - max(a, j)
    A /= step
    A.setflags(write=False)
    return A


def _resample(img, Ah, Aw):
    """Ah @ img @ Aw.T over the two spatial axes of an (H, W[, C]) image."""
    H, W = img.shape[:2]
    rest = img.shape[2:]
    t = (Ah @ img.reshape(H, -1)).reshape((Ah.shape[0], W) + rest)
    t = np.moveaxis(t, 1, 0).reshape(W, -1)
    t = (Aw @ t).reshape((Aw.shape[0], Ah.shape[0]) + rest)
    return np.ascontiguousarray(np.moveaxis(t, 0, 1))


def downsample_target(image, factor: float):
    """Area-average downsampling to round(size * factor), each side at least 8 px."""
    rgb = image.rgb if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    H, W = rgb.shape[:2]
    tw, th = _scaled_size(W, H, factor)
    w, h = int(round(W * factor)), int(round(H * factor))
    if (w, h) != (tw, th):
        log.warning("downsampled size %dx%d below %d px, clamped to %dx%d", w, h, MIN_SIDE, tw, th)
    if (tw, th) == (W, H):
        return image
    out = _resample(rgb, area_matrix(H, th), area_matrix(W, tw))
    if isinstance(image, ImageBuffer):
        return ImageBuffer(out)
    return out


# --------------------------------------------------------------------------- update rule

class Adam:
    """Adaptive-moment update over the splat parameter groups.

    The shape parameter is stepped in its unbounded latent so it always stays
    inside its valid range.
    """

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-15):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {f: None for f in PARAM_FIELDS}
        self.v = {f: None for f in PARAM_FIELDS}

    def _state(self, f, like):
        if self.m[f] is None or self.m[f].shape != like.shape:
            self.m[f] = np.zeros_like(like)
            self.v[f] = np.zeros_like(like)
        return self.m[f], self.v[f]

    def _update(self, f, grad, lr):
        m, v = self._state(f, grad)
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1 ** self.t)
        vhat = v / (1 - self.beta2 ** self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)

    def step(self, cloud: SplatCloud, grads: SplatGrads, lrs: dict[str, float]) -> None:
        """One update. ``lrs`` maps field names to learning rates; 0 freezes a field."""
        self.t += 1
        for f in PARAM_FIELDS:
            lr = lrs.get(f, 0.0)
            if lr == 0.0:
                continue
            g = getattr(grads, f)
            if f == "shapes":
                eps = cloud.shapes
                u = shape_to_latent(eps)
                g_u = g * (eps - SHAPE_MIN) * (SHAPE_MAX - eps) / (SHAPE_MAX - SHAPE_MIN)
                cloud.shapes = shape_from_latent(u - self._update(f, g_u, lr))
            else:
                arr = getattr(cloud, f)
                arr -= self._update(f, g, lr)

    def remap(self, summary: EditSummary) -> None:
        """Carry moments across a structural edit; new splats start from zero."""
        for f in PARAM_FIELDS:
            for store in (self.m, self.v):
                if store[f] is None:
                    continue
                moved = store[f][summary.source]
                moved[summary.is_new] = 0.0
                store[f] = moved


def learning_rates(schedule: TrainSchedule, iteration: int, extent: float, freeze_shape: bool) -> dict:
    lr = schedule.lr
    return {
        "means": schedule.position_lr(iteration, extent),
        "quats": lr["rotation"],
        "log_scales": lr["scale"],
        "opacity_logits": lr["opacity"],
        "sh_dc": lr["color"],
        "sh_rest": lr["color"] / 20.0,
        "shapes": 0.0 if freeze_shape else lr["shape"],
    }


# --------------------------------------------------------------------------- losses

@dataclass
class LossReport:
    iteration: int
    phase: str
    l1: float
    ssim: float
    rgb_loss: float
    sdf_loss: float = 0.0
    normal_loss: float = 0.0
    entropy_loss: float = 0.0
    total: float = 0.0


@dataclass
class StepResult:
    report: LossReport
    grads: SplatGrads
    render_psnr: float


def backward(cloud: SplatCloud, camera: Camera, target, *, phase: str = "photometric",
             weights: tuple[float, float, float] = (1.0, 0.1, 0.05), rho: float = 0.1,
             settings: RasterSettings | None = None, background=(0.0, 0.0, 0.0),
             gaussian_only: bool = False, samples=None, floor: float = 0.0,
             iteration: int = 0) -> StepResult:
    """Render, evaluate the active phase's total loss and return its gradients.

    ``weights`` are the SDF, normal and entropy weights. ``samples`` is the GSR
    sample batch, required for the gsr phase when either surface weight is on.
    """
    w_sdf, w_nor, w_ent = weights
    res = render(cloud, camera, background, rho, settings, gaussian_only)
    target = target.rgb if isinstance(target, ImageBuffer) else target
    rgb = loss_rgb(res.image.rgb, target, RGB_LAMBDA)
    grads = render_backward(res, cloud, rgb.grad)
    rep = LossReport(iteration, phase, rgb.l1, rgb.ssim, rgb.value)
    total = rgb.value
    if phase == "entropy" and w_ent > 0:
        e, ge = opacity_entropy_loss(cloud.opacity_logits)
        grads.opacity_logits += w_ent * ge
        rep.entropy_loss = e
        total += w_ent * e
    if phase == "gsr" and (w_sdf > 0 or w_nor > 0) and samples is not None and len(samples):
        g = gsr_losses(cloud, samples, floor=floor, weights=(w_sdf, w_nor))
        grads.add_(g.grads)
        rep.sdf_loss, rep.normal_loss = g.l_sdf, g.l_nor
        total += w_sdf * g.l_sdf + w_nor * g.l_nor
    rep.total = total
    return StepResult(rep, grads, psnr(res.image.rgb, target))


# --------------------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    seed: int = 0
    lambda_sdf: float = 1.0
    lambda_nor: float = 0.1
    lambda_entropy: float = 0.05
    rho: float = 0.1
    freeze_shape: bool = False
    gaussian_only: bool = False
    drt: bool = True
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    densify_until: int | None = None  # default: end of the photometric phase
    gsr_batch: int = 1000
    knn_k: int = 16
    knn_refresh: int = 500
    gsr_prune_opacity: float = 0.5
    background: tuple = (0.0, 0.0, 0.0)
    log_interval: int = 100
    raster: RasterSettings = field(default_factory=RasterSettings)

    def __post_init__(self):
        if isinstance(self.densify, dict):
            self.densify = DensifyConfig(**self.densify)
        if isinstance(self.raster, dict):
            self.raster = RasterSettings(**self.raster)
        for name in ("lambda_sdf", "lambda_nor", "lambda_entropy"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.gsr_batch < 1 or self.knn_k < 1 or self.knn_refresh < 1 or self.log_interval < 1:
            raise ValueError("batch sizes and intervals must be >= 1")
        if not 0 <= self.gsr_prune_opacity < 1:
            raise ValueError("gsr_prune_opacity must lie in [0, 1)")
        self.background = tuple(float(v) for v in self.background)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d


@dataclass
class TrainResult:
    cloud: SplatCloud
    reports: list[LossReport]
    metrics: list[dict]
    train_seconds: float
    extent: float


METRIC_COLUMNS = ["iteration", "phase", "l1", "ssim", "rgb_loss", "sdf_loss", "normal_loss",
                  "entropy_loss", "total", "psnr", "n_splats", "resolution_factor", "width",
                  "height", "wall_time"]


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_COLUMNS})


class _TargetCache:
    """Per-view targets at the most recently requested resolution."""

    def __init__(self, targets):
        self.full = [t.rgb if isinstance(t, ImageBuffer) else np.asarray(t, dtype=np.float64) for t in targets]
        self._last: dict[int, tuple[tuple[int, int], np.ndarray]] = {}

    def get(self, view: int, width: int, height: int) -> np.ndarray:
        full = self.full[view]
        if full.shape[1] == width and full.shape[0] == height:
            return full
        hit = self._last.get(view)
        if hit is not None and hit[0] == (width, height):
            return hit[1]
        img = _resample(full, area_matrix(full.shape[0], height), area_matrix(full.shape[1], width))
        self._last[view] = ((width, height), img)
        return img


def train(cloud: SplatCloud, cameras: list[Camera], targets, schedule: TrainSchedule,
          cfg: TrainConfig | None = None, *, out_dir=None,
          callback: Callable[[int, SplatCloud, float], None] | None = None) -> TrainResult:
    """Run the photometric, entropy and surface-regularization phases.

    ``cloud`` is modified in place. ``callback(iteration, cloud, train_seconds)``
    runs after every update; time spent inside it is not counted as training
    time.
    """
    cfg = cfg or TrainConfig()
    if len(cameras) < 2:
        raise ValueError("training needs at least 2 cameras")
    if len(targets) != len(cameras):
        raise ValueError(f"{len(targets)} targets for {len(cameras)} cameras")
    tcache = _TargetCache(targets)
    for cam, t in zip(cameras, tcache.full):
        if t.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"target of shape {t.shape[:2]} does not match camera {cam.height}x{cam.width}")
    if len(cloud) == 0:
        raise ValueError("cannot train an empty cloud")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    extent = scene_extent(np.stack([c.center for c in cameras]))
    floor = SCALE_FLOOR * extent
    adam = Adam()
    weights = (cfg.lambda_sdf, cfg.lambda_nor, cfg.lambda_entropy)
    densify_until = schedule.photometric if cfg.densify_until is None else cfg.densify_until
    grad_accum = np.zeros(len(cloud))
    grad_count = np.zeros(len(cloud))
    knn: KnnIndex | None = None
    knn_gen = -1
    order: list[int] = []
    reports: list[LossReport] = []
    metrics: list[dict] = []
    last_good = cloud.copy()
    train_seconds = 0.0
    phase_prev = None

    def diverge(msg, it):
        if out is not None:
            (out / "last_good.ply").write_bytes(save_ply(last_good))
        raise TrainingDiverged(msg, it, last_good)

    for it in range(schedule.total):
        t0 = time.perf_counter()
        phase = schedule.phase(it)
        if phase != phase_prev:
            if phase_prev is not None and out is not None:
                (out / f"snapshot_{phase_prev}.ply").write_bytes(save_ply(cloud))
            if phase == "gsr" and cfg.gsr_prune_opacity > 0:
                summary = prune_mask(cloud, cloud.opacities < cfg.gsr_prune_opacity)
                adam.remap(summary)
                log.info("gsr start: pruned %d splats below opacity %.2f", summary.pruned, cfg.gsr_prune_opacity)
                if len(cloud) == 0:
                    diverge(f"cloud emptied at iteration {it}", it)
            phase_prev = phase
        factor = schedule.factor(it) if cfg.drt else 1.0
        if not order:
            order = list(rng.permutation(len(cameras)))
        view = int(order.pop())
        cam_full = cameras[view]
        w, h = _scaled_size(cam_full.width, cam_full.height, factor)
        cam = cam_full if (w, h) == (cam_full.width, cam_full.height) else cam_full.resized(w, h)
        target = tcache.get(view, w, h)

        samples = None
        if phase == "gsr" and (cfg.lambda_sdf > 0 or cfg.lambda_nor > 0):
            if knn is None or knn_gen != cloud.generation or knn.staleness(it) >= cfg.knn_refresh:
                knn = KnnIndex(cloud.means, k=cfg.knn_k, built_at=it)
                knn_gen = cloud.generation
            samples = sample_points(cloud, cfg.gsr_batch, rng, knn, cfg.knn_k)

        step = backward(cloud, cam, target, phase=phase, weights=weights, rho=cfg.rho,
                        settings=cfg.raster, background=cfg.background,
                        gaussian_only=cfg.gaussian_only, samples=samples, floor=floor, iteration=it)
        if not np.isfinite(step.report.total):
            diverge(f"non-finite loss at iteration {it}", it)
        try:
            step.grads.check_finite()
        except FloatingPointError as e:
            diverge(f"iteration {it}: {e}", it)

        if len(grad_accum) != len(cloud):
            grad_accum = np.zeros(len(cloud))
            grad_count = np.zeros(len(cloud))
        vis = step.grads.visible
        grad_accum[vis] += step.grads.means2d_norm[vis]
        grad_count[vis] += 1
        adam.step(cloud, step.grads, learning_rates(schedule, it, extent, cfg.freeze_shape))
        cloud.normalize()

        nxt = it + 1
        if nxt <= densify_until and nxt % cfg.densify.densify_interval == 0:
            summary = densify_and_prune(
                cloud, grad_accum, grad_count, cfg.densify, nxt, extent, rng, cfg.rho,
                densify=nxt >= cfg.densify.densify_from,
                shape_events=not cfg.freeze_shape,
                big_prune=nxt > cfg.densify.opacity_reset_interval)
            adam.remap(summary)
            grad_accum = np.zeros(len(cloud))
            grad_count = np.zeros(len(cloud))
            if len(cloud) == 0:
                diverge(f"cloud emptied at iteration {nxt}", it)
        train_seconds += time.perf_counter() - t0

        if (it + 1) % cfg.log_interval == 0 or it + 1 == schedule.total:
            reports.append(step.report)
            row = asdict(step.report)
            row.update(psnr=step.render_psnr, n_splats=len(cloud), resolution_factor=factor,
                       width=w, height=h, wall_time=train_seconds)
            metrics.append(row)
            last_good = cloud.copy()
            log.debug("it %d %s total=%.5f psnr=%.2f n=%d", it + 1, phase, step.report.total,
                      step.render_psnr, len(cloud))
        if callback is not None:
            callback(it, cloud, train_seconds)

    if out is not None:
        if phase_prev is not None:
            (out / f"snapshot_{phase_prev}.ply").write_bytes(save_ply(cloud))
        (out / "final.ply").write_bytes(save_ply(cloud))
        write_metrics_csv(metrics, out / "metrics.csv")
        (out / "schedule_state.json").write_text(json.dumps({
            "iteration": schedule.total, "adam_step": adam.t, "generation": cloud.generation,
            "extent": extent, "schedule": asdict(schedule)}, indent=2))
    return TrainResult(cloud, reports, metrics, train_seconds, extent)
