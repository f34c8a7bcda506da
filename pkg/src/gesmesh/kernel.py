"""Generalized exponential kernels, covariance construction and projection.

Everything here is a pure function of its inputs. Scalar helpers operate on a
single primitive; the ``*_batch`` variants take stacked arrays and are what the
renderer and regularizer build on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

SHAPE_MIN = 0.3
SHAPE_MAX = 8.0
COV2D_FLOOR = 0.3
NEAR_PLANE = 0.01
MAX_CONDITION = 1e12


class DegenerateSplatError(ValueError):
    """Raised when a splat covariance is too ill-conditioned to invert."""


class NearPlaneError(ValueError):
    """Raised when a point at or behind the near plane reaches projection."""


@dataclass(frozen=True)
class Gef1dParams:
    position: float = 0.0
    scale: float = 1.0
    shape: float = 2.0
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if not self.shape > 0:
            raise ValueError(f"shape must be > 0, got {self.shape}")
        if not self.amplitude >= 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")


@dataclass
class SplatCore:
    """One generalized exponential primitive in world space.

    ``rotation`` is a unit quaternion in (w, x, y, z) order, ``color`` the base
    RGB and ``sh`` the optional degree-1 coefficients laid out as (3 basis, 3 rgb).
    """

    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    opacity: float = 1.0
    shape: float = 2.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    sh: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.rotation = q / np.linalg.norm(q)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if self.sh is not None:
            self.sh = np.asarray(self.sh, dtype=np.float64).reshape(3, 3)
        if np.any(self.scale <= 0):
            raise ValueError("scale entries must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.scale)


def gef_1d(p: Gef1dParams, x):
    """A * exp(-(|x - position| / scale) ** shape)."""
    x = np.asarray(x, dtype=np.float64)
    return p.amplitude * np.exp(-((np.abs(x - p.position) / p.scale) ** p.shape))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    The input is normalized first, so any nonzero quaternion is accepted.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = 2.0 * np.sqrt(t + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = [0.0, 0.0, 0.0, 0.0]
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def build_covariance(q, s) -> np.ndarray:
    """R S S^T R^T for a quaternion and per-axis scales; broadcasts over leading dims."""
    R = quat_to_rotmat(q)
    M = R * np.asarray(s, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def shape_modulation(eps, rho: float = 0.1):
    """Variance multiplier 2 / (1 + exp(-rho (eps - 2))).

    Equals 1 exactly at eps = 2, rises monotonically towards 2.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    return 2.0 * expit(rho * (np.asarray(eps, dtype=np.float64) - 2.0))


def shape_modulation_grad(eps, rho: float = 0.1):
    """d phi / d eps."""
    phi = shape_modulation(eps, rho)
    return rho * phi * (1.0 - 0.5 * phi)


def effective_scale(s, eps, rho: float = 0.1) -> np.ndarray:
    phi = shape_modulation(eps, rho)
    return np.asarray(s, dtype=np.float64) * np.asarray(phi)[..., None]


def shape_from_latent(u, lo: float = SHAPE_MIN, hi: float = SHAPE_MAX):
    """Bounded shape parameter from an unconstrained latent."""
    return lo + (hi - lo) * expit(u)


def shape_to_latent(eps, lo: float = SHAPE_MIN, hi: float = SHAPE_MAX):
    r = (np.asarray(eps, dtype=np.float64) - lo) / (hi - lo)
    r = np.clip(r, 1e-12, 1 - 1e-12)
    return np.log(r) - np.log1p(-r)


def splat_density_3d(splat: SplatCore, x, max_condition: float = MAX_CONDITION) -> np.ndarray:
    """exp(-0.5 * mahalanobis2 ** (shape / 2)) of ``x`` against one splat."""
    s = splat.scale
    if (s.max() / s.min()) ** 2 > max_condition:
        raise DegenerateSplatError(
            f"covariance condition number {(s.max() / s.min()) ** 2:.3g} exceeds {max_condition:.3g}"
        )
    R = quat_to_rotmat(splat.rotation)
    d = np.asarray(x, dtype=np.float64) - splat.center
    local = (d @ R) / s
    m2 = np.sum(local * local, axis=-1)
    return np.exp(-0.5 * m2 ** (0.5 * splat.shape))


def perspective_jacobian(cam_point, focal) -> np.ndarray:
    """2x3 Jacobian of (fx x / z, fy y / z) at a camera-space point; broadcasts."""
    t = np.asarray(cam_point, dtype=np.float64)
    fx, fy = focal
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    zero = np.zeros_like(z)
    J = np.stack(
        [fx / z, zero, -fx * x / (z * z), zero, fy / z, -fy * y / (z * z)], axis=-1
    )
    return J.reshape(t.shape[:-1] + (2, 3))


def project_covariance(
    cov,
    world_to_cam,
    focal,
    cam_point,
    floor: float = COV2D_FLOOR,
    near: float = NEAR_PLANE,
) -> np.ndarray:
    """Image-space covariance J W cov W^T J^T plus an isotropic pixel floor.

    ``world_to_cam`` is a 4x4 rigid transform (or its 3x3 rotation block).
    """
    t = np.asarray(cam_point, dtype=np.float64)
    if np.any(t[..., 2] <= near):
        raise NearPlaneError("point at or behind the near plane must be culled before projection")
    W = np.asarray(world_to_cam, dtype=np.float64)[:3, :3]
    T = perspective_jacobian(t, focal) @ W
    out = T @ np.asarray(cov, dtype=np.float64) @ np.swapaxes(T, -1, -2)
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return out + floor * np.eye(2)
