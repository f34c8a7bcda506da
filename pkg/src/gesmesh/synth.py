"""Procedural test scenes with analytic geometry and ray-cast ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, camera_from_fov, look_at

SHAPES = ("plane", "sphere", "two-box")

# distinct flat colors for the six box face directions (-x, +x, -y, +y, -z, +z)
FACE_COLORS = np.array([
    [0.85, 0.20, 0.15],
    [0.15, 0.70, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.20],
    [0.70, 0.25, 0.75],
    [0.20, 0.75, 0.80],
])


@dataclass
class AnalyticSurface:
    """Plane (z = 0, square of half-size ``half``), sphere, or union of boxes."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"invalid shape {self.kind!r}; expected one of {', '.join(SHAPES)}")

    # -- texture
    def color(self, p, face=None) -> np.ndarray:
        if self.kind == "two-box":
            return FACE_COLORS[face]
        p = np.asarray(p, dtype=np.float64)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        if self.kind == "plane":
            return np.stack([
                0.55 + 0.15 * np.sin(2.1 * x + 0.3) * np.cos(1.7 * y) + 0.12 * np.sin(13.0 * x + 7.1 * y),
                0.50 + 0.15 * np.sin(1.3 * y + 1.1 + 0.8 * x) + 0.12 * np.cos(14.5 * y - 5.2 * x),
                0.45 + 0.15 * np.cos(1.9 * x - 1.2 * y) + 0.12 * np.sin(11.7 * x + 9.0 * y + 0.7),
            ], axis=-1)
        if self.kind == "sphere":
            return np.stack([
                0.55 + 0.30 * np.sin(2.5 * x + 0.4),
                0.50 + 0.30 * np.sin(2.5 * y + 1.3),
                0.50 + 0.30 * np.sin(2.5 * z + 2.2),
            ], axis=-1)

    # -- ray casting
    def intersect(self, o, d):
        """First hit distance (inf when missed), unit normal and color per ray."""
        o = np.broadcast_to(np.asarray(o, dtype=np.float64), np.shape(d))
        d = np.asarray(d, dtype=np.float64)
        n = np.zeros_like(d)
        if self.kind == "plane":
            h = self.params["half"]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = -o[:, 2] / d[:, 2]
            p = o + t[:, None] * d
            hit = (t > 0) & (np.abs(p[:, 0]) <= h) & (np.abs(p[:, 1]) <= h)
            t = np.where(hit, t, np.inf)
            n[:, 2] = np.where(o[:, 2] >= 0, 1.0, -1.0)
            return t, n, self.color(np.where(hit[:, None], p, 0.0))
        if self.kind == "sphere":
            c = np.asarray(self.params["center"], dtype=np.float64)
            r = self.params["radius"]
            oc = o - c
            b = np.sum(oc * d, axis=1)
            disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0, t1 = -b - sq, -b + sq
            t = np.where(t0 > 0, t0, t1)
            t = np.where((disc >= 0) & (t > 0), t, np.inf)
            p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            n = (p - c) / r
            return t, n, self.color(p)
        best = np.full(len(d), np.inf)
        face = np.zeros(len(d), dtype=np.int64)
        for lo, hi in self.params["boxes"]:
            t, f = _ray_box(o, d, np.asarray(lo), np.asarray(hi))
            closer = t < best
            best = np.where(closer, t, best)
            face = np.where(closer, f, face)
        axis, side = face // 2, face % 2
        n[np.arange(len(d)), axis] = np.where(side == 1, 1.0, -1.0)
        return best, n, self.color(None, face)

    # -- sampling and distances
    def area_weights(self):
        if self.kind != "two-box":
            return None
        out = []
        for lo, hi in self.params["boxes"]:
            e = np.asarray(hi) - np.asarray(lo)
            out.append([e[1] * e[2]] * 2 + [e[0] * e[2]] * 2 + [e[0] * e[1]] * 2)
        return np.asarray(out)

    def sample(self, n: int, rng: np.random.Generator, half: float | None = None):
        """Uniform surface samples: points, normals and colors."""
        if self.kind == "plane":
            h = self.params["half"] if half is None else half
            p = np.column_stack([rng.uniform(-h, h, (n, 2)), np.zeros(n)])
            nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
            return p, nrm, self.color(p)
        if self.kind == "sphere":
            v = rng.standard_normal((n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            p = np.asarray(self.params["center"]) + self.params["radius"] * v
            return p, v, self.color(p)
        w = self.area_weights()
        flat = rng.choice(w.size, size=n, p=(w / w.sum()).ravel())
        box, face = flat // 6, flat % 6
        boxes = np.asarray(self.params["boxes"], dtype=np.float64)
        lo, hi = boxes[box, 0], boxes[box, 1]
        p = lo + rng.random((n, 3)) * (hi - lo)
        axis, side = face // 2, face % 2
        rows = np.arange(n)
        p[rows, axis] = np.where(side == 1, hi[rows, axis], lo[rows, axis])
        nrm = np.zeros((n, 3))
        nrm[rows, axis] = np.where(side == 1, 1.0, -1.0)
        return p, nrm, FACE_COLORS[face]

    def distance(self, points) -> np.ndarray:
        """Unsigned distance from points to the surface."""
        p = np.asarray(points, dtype=np.float64)
        if self.kind == "plane":
            h = self.params["half"]
            q = np.clip(p[:, :2], -h, h)
            return np.sqrt(np.sum((p[:, :2] - q) ** 2, axis=1) + p[:, 2] ** 2)
        if self.kind == "sphere":
            c = np.asarray(self.params["center"])
            return np.abs(np.linalg.norm(p - c, axis=1) - self.params["radius"])
        return np.min([_box_surface_distance(p, np.asarray(lo), np.asarray(hi))
                       for lo, hi in self.params["boxes"]], axis=0)

    @property
    def size(self) -> float:
        """Characteristic object radius."""
        if self.kind == "plane":
            return float(self.params["half"])
        if self.kind == "sphere":
            return float(self.params["radius"])
        b = np.asarray(self.params["boxes"], dtype=np.float64)
        return float(0.5 * np.linalg.norm(b[:, 1].max(axis=0) - b[:, 0].min(axis=0)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticSurface":
        return cls(d["kind"], d["params"])


def _ray_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    enter_axis = np.argmax(tmin, axis=1)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    hit = (t_enter <= t_exit) & (t_enter > 0)
    # entering through the min face when the ray moves in +axis
    rows = np.arange(len(d))
    side = (d[rows, enter_axis] < 0).astype(np.int64)
    return np.where(hit, t_enter, np.inf), enter_axis * 2 + side


def _box_surface_distance(p, lo, hi):
    c = 0.5 * (lo + hi)
    e = 0.5 * (hi - lo)
    q = np.abs(p - c) - e
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)


def make_surface(shape: str) -> AnalyticSurface:
    if shape == "plane":
        return AnalyticSurface("plane", {"half": 3.0})
    if shape == "sphere":
        return AnalyticSurface("sphere", {"center": [0.0, 0.0, 0.0], "radius": 1.0})
    if shape == "two-box":
        return AnalyticSurface("two-box", {"boxes": [
            [[-1.0, -0.5, -0.5], [-0.1, 0.4, 0.45]],
            [[0.15, -0.35, -0.6], [0.95, 0.55, 0.15]],
        ]})
    raise ValueError(f"invalid shape {shape!r}; expected one of {', '.join(SHAPES)}")


def make_cameras(shape: str, views: int, resolution: int, rng: np.random.Generator,
                 offset: float = 0.0) -> list[Camera]:
    """Cameras around the object; ``offset`` shifts the pattern for held-out views."""
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for k in range(views):
        u = (k + 0.5 + offset) / views
        az = golden * (k + offset) + rng.uniform(-0.1, 0.1)
        if shape == "plane":
            rad = 0.6 + 1.2 * np.sqrt(u)
            eye = np.array([rad * np.cos(az), rad * np.sin(az), 2.4 + 0.3 * rng.uniform(-1, 1)])
            target = np.array([0.3 * np.cos(az + 2.0), 0.3 * np.sin(az + 2.0), 0.0])
            fov = 40.0
        else:
            # spread over the sphere of directions, avoiding the exact poles
            zc = 1.0 - 2.0 * u
            zc = np.clip(zc, -0.9, 0.9) if shape == "sphere" else 0.15 + 0.7 * u
            r = np.sqrt(1.0 - zc * zc)
            dist = 3.5 if shape == "sphere" else 3.6
            eye = dist * np.array([r * np.cos(az), r * np.sin(az), zc])
            target = np.zeros(3)
            fov = 40.0 if shape == "sphere" else 45.0
        cams.append(camera_from_fov(resolution, resolution, fov, look_at(eye, target)))
    return cams


def render_ground_truth(surface: AnalyticSurface, camera: Camera, supersample: int = 3,
                        background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Unlit albedo image by ray casting ``supersample``^2 rays per pixel."""
    W, H, s = camera.width, camera.height, supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    acc = np.zeros((H, W, 3))
    bg = np.asarray(background, dtype=np.float64)
    for oy in offs:
        for ox in offs:
            d = camera.pixel_rays((cols + ox).ravel(), (rows + oy).ravel())
            t, _, col = surface.intersect(camera.center, d)
            col = np.where(np.isfinite(t)[:, None], col, bg)
            acc += col.reshape(H, W, 3)
    return acc / (s * s)


def seed_points(surface: AnalyticSurface, n: int, rng: np.random.Generator, noise: float = 0.01):
    """Noisy surface samples standing in for a sparse reconstruction."""
    p, _, c = surface.sample(n, rng)
    p = p + rng.normal(scale=noise * surface.size, size=p.shape)
    return p, np.clip(c, 0.0, 1.0)
