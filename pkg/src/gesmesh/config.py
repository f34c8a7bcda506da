"""Flat run configuration, stored as JSON next to every run."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .optimizer import DEFAULT_LR, TrainConfig, TrainSchedule
from .render import RasterSettings
from .scene import DensifyConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    iterations: int = 3000
    photometric_iterations: int | None = None  # None: proportional default split
    entropy_iterations: int | None = None
    gsr_iterations: int | None = None
    drt: bool = True
    drt_fraction: float = 0.75
    drt_start: float = 0.26
    drt_end: float = 1.0
    lr_position: float = DEFAULT_LR["position"]
    lr_rotation: float = DEFAULT_LR["rotation"]
    lr_scale: float = DEFAULT_LR["scale"]
    lr_opacity: float = DEFAULT_LR["opacity"]
    lr_color: float = DEFAULT_LR["color"]
    lr_shape: float = DEFAULT_LR["shape"]
    position_lr_final_ratio: float = 0.01
    lambda_sdf: float = 1.0
    lambda_nor: float = 0.1
    lambda_entropy: float = 0.05
    rho: float = 0.1
    freeze_shape: bool = False
    gaussian_only: bool = False
    grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int | None = None
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.05
    min_opacity: float = 0.005
    shape_reset_interval: int = 1000
    shape_prune_threshold: float = 0.5
    percent_dense: float = 0.01
    max_splats: int = 100_000
    gsr_batch: int = 1000
    knn_k: int = 16
    knn_refresh: int = 500
    gsr_prune_opacity: float = 0.5
    log_interval: int = 100
    level_alpha: float = 0.3
    grid: int = 128
    ray_steps: int = 32
    pixels_per_view: int = 10_000
    poisson_smooth: float = 1.0
    out_dir: str | None = None

    def __post_init__(self):
        try:
            self.schedule()
            self.train_config()
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        if not 0 < self.level_alpha < 1:
            raise ConfigError("level_alpha must lie in (0, 1)")
        if self.grid < 16:
            raise ConfigError("grid must be at least 16")
        if self.ray_steps < 2 or self.pixels_per_view < 1:
            raise ConfigError("ray_steps must be >= 2 and pixels_per_view >= 1")

    def schedule(self) -> TrainSchedule:
        lr = {"position": self.lr_position, "rotation": self.lr_rotation, "scale": self.lr_scale,
              "opacity": self.lr_opacity, "color": self.lr_color, "shape": self.lr_shape}
        kw = dict(drt_fraction=self.drt_fraction, drt_start=self.drt_start, drt_end=self.drt_end,
                  lr=lr, position_lr_final_ratio=self.position_lr_final_ratio)
        spans = (self.photometric_iterations, self.entropy_iterations, self.gsr_iterations)
        if all(s is None for s in spans):
            return TrainSchedule.scaled(self.iterations, **kw)
        if any(s is None for s in spans):
            raise ValueError("give all three phase spans or none")
        return TrainSchedule(total=self.iterations, photometric=spans[0], entropy=spans[1],
                             gsr=spans[2], **kw)

    def train_config(self) -> TrainConfig:
        dens = DensifyConfig(
            grad_threshold=self.grad_threshold, densify_interval=self.densify_interval,
            densify_from=self.densify_from, opacity_reset_interval=self.opacity_reset_interval,
            opacity_reset_value=self.opacity_reset_value, min_opacity=self.min_opacity,
            shape_reset_interval=self.shape_reset_interval,
            shape_prune_threshold=self.shape_prune_threshold, percent_dense=self.percent_dense,
            max_splats=self.max_splats)
        return TrainConfig(
            seed=self.seed, lambda_sdf=self.lambda_sdf, lambda_nor=self.lambda_nor,
            lambda_entropy=self.lambda_entropy, rho=self.rho, freeze_shape=self.freeze_shape,
            gaussian_only=self.gaussian_only, drt=self.drt, densify=dens,
            densify_until=self.densify_until, gsr_batch=self.gsr_batch, knn_k=self.knn_k,
            knn_refresh=self.knn_refresh, gsr_prune_opacity=self.gsr_prune_opacity,
            log_interval=self.log_interval, raster=RasterSettings())

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)
