"""Pinhole camera with a world-to-camera rigid transform.

Pixel (col, row) covers [col, col + 1) x [row, row + 1); its center is at
(col + 0.5, row + 0.5). Camera space looks down +z with +y pointing down.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near plane must be closer than far plane")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("world-to-camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def focal(self) -> tuple[float, float]:
        return (self.fx, self.fy)

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and view depth of world points."""
        t = self.to_camera(points)
        z = t[..., 2]
        uv = np.stack([self.fx * t[..., 0] / z + self.cx, self.fy * t[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def resized(self, width: int, height: int) -> "Camera":
        """Same pose with intrinsics rescaled to a new resolution."""
        sx, sy = width / self.width, height / self.height
        return Camera(width, height, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.world_to_cam.copy(), self.near, self.far)

    def pixel_rays(self, cols, rows) -> np.ndarray:
        """Unit world-space view directions through pixel centers."""
        cols = np.asarray(cols, dtype=np.float64)
        rows = np.asarray(rows, dtype=np.float64)
        d = np.stack([(cols + 0.5 - self.cx) / self.fx, (rows + 0.5 - self.cy) / self.fy,
                      np.ones_like(cols)], axis=-1)
        d = d @ self.rotation  # camera -> world
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    def to_dict(self) -> dict:
        return {
            "W": int(self.width), "H": int(self.height),
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "world_to_camera": [float(v) for v in self.world_to_cam.reshape(-1)],
            "near": float(self.near), "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(int(d["W"]), int(d["H"]), float(d["fx"]), float(d["fy"]), float(d["cx"]),
                   float(d["cy"]), np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
                   float(d.get("near", 0.01)), float(d.get("far", 100.0)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if abs(f @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)  # image-down axis
    R = np.stack([r, d, f])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M


def camera_from_fov(width: int, height: int, fov_x_deg: float, world_to_cam, **kw) -> Camera:
    fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
    return Camera(width, height, fx, fx, width / 2, height / 2, world_to_cam, **kw)
