"""Splat population: storage, initialization, KNN index and densify/prune."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, logit

from .kernel import SHAPE_MAX, SHAPE_MIN, SplatCore, quat_to_rotmat, shape_modulation

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

PARAM_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "sh_dc", "sh_rest", "shapes")


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(sh):
    return np.asarray(sh, dtype=np.float64) * SH_C0 + 0.5


@dataclass
class SplatCloud:
    """Struct-of-arrays splat storage in the usual 3DGS latent convention.

    Scales are stored as logs, opacities as logits and base color as the
    degree-0 SH coefficient; the shape parameter is stored directly and kept
    inside ``[SHAPE_MIN, SHAPE_MAX]``.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray
    shapes: np.ndarray
    generation: int = 0

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh_dc = np.asarray(self.sh_dc, dtype=np.float64).reshape(n, 3)
        self.sh_rest = np.asarray(self.sh_rest, dtype=np.float64).reshape(n, 3, 3)
        self.shapes = np.asarray(self.shapes, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    @property
    def base_colors(self) -> np.ndarray:
        return sh_to_rgb(self.sh_dc)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    @classmethod
    def empty(cls) -> "SplatCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0))

    @classmethod
    def from_splats(cls, splats: list[SplatCore]) -> "SplatCloud":
        if not splats:
            return cls.empty()
        return cls(
            means=np.stack([s.center for s in splats]),
            quats=np.stack([s.rotation for s in splats]),
            log_scales=np.log(np.stack([s.scale for s in splats])),
            opacity_logits=logit(np.clip([s.opacity for s in splats], 1e-12, 1 - 1e-12)),
            sh_dc=rgb_to_sh(np.stack([s.color for s in splats])),
            sh_rest=np.stack([np.zeros((3, 3)) if s.sh is None else s.sh for s in splats]),
            shapes=np.array([s.shape for s in splats], dtype=np.float64),
        )

    def splat(self, i: int) -> SplatCore:
        return SplatCore(
            center=self.means[i].copy(),
            rotation=self.quats[i].copy(),
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            shape=float(self.shapes[i]),
            color=self.base_colors[i],
            sh=self.sh_rest[i].copy(),
        )

    def splats(self) -> list[SplatCore]:
        return [self.splat(i) for i in range(len(self))]

    def copy(self) -> "SplatCloud":
        return SplatCloud(*(getattr(self, f).copy() for f in PARAM_FIELDS), generation=self.generation)

    def take(self, idx) -> "SplatCloud":
        """New cloud holding the splats at ``idx`` (same generation)."""
        return SplatCloud(*(getattr(self, f)[idx] for f in PARAM_FIELDS), generation=self.generation)

    def replace_from(self, other: "SplatCloud") -> None:
        for f in PARAM_FIELDS:
            setattr(self, f, getattr(other, f))

    def normalize(self) -> None:
        """Re-impose the per-splat invariants after a parameter update."""
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)
        np.clip(self.shapes, SHAPE_MIN, SHAPE_MAX, out=self.shapes)
        np.clip(self.sh_dc, -0.5 / SH_C0, 0.5 / SH_C0, out=self.sh_dc)

    def validate(self) -> None:
        for f in PARAM_FIELDS:
            arr = getattr(self, f)
            if not np.all(np.isfinite(arr)):
                bad = np.nonzero(~np.isfinite(arr.reshape(len(self), -1)).all(axis=1))[0]
                raise FloatingPointError(f"non-finite {f} at splat ids {bad[:10].tolist()}")
        if np.any(np.abs(np.linalg.norm(self.quats, axis=1) - 1) > 1e-6):
            raise ValueError("quaternions must be unit length")
        if np.any((self.shapes < SHAPE_MIN) | (self.shapes > SHAPE_MAX)):
            raise ValueError("shape parameter outside configured bounds")


def init_from_points(points, colors=None, opacity: float = 0.1, single_point_scale: float = 0.1) -> SplatCloud:
    """One isotropic splat per seed point.

    The initial scale is the mean distance to the three nearest other points
    (fewer when the input is smaller); a lone point gets ``single_point_scale``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot initialize a splat cloud from an empty point set")
    if not np.all(np.isfinite(pts)):
        raise ValueError("seed points must be finite")
    if colors is None:
        colors = np.full((n, 3), 0.5)
    colors = np.clip(np.asarray(colors, dtype=np.float64).reshape(n, 3), 0.0, 1.0)

    if n == 1:
        dist = np.array([single_point_scale])
    else:
        k = min(3, n - 1)
        d, _ = cKDTree(pts).query(pts, k=k + 1)
        dist = d[:, 1:].mean(axis=1)
    dist = np.maximum(dist, 1e-7)

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return SplatCloud(
        means=pts.copy(),
        quats=quats,
        log_scales=np.repeat(np.log(dist)[:, None], 3, axis=1),
        opacity_logits=np.full(n, logit(opacity)),
        sh_dc=rgb_to_sh(colors),
        sh_rest=np.zeros((n, 3, 3)),
        shapes=np.full(n, 2.0),
    )


class KnnIndex:
    """Exact k-nearest-neighbour index over splat centers.

    Results are sorted by ascending distance with ties broken by lower id.
    The index is an immutable snapshot; ``staleness`` counts training
    iterations since it was built.
    """

    def __init__(self, centers, k: int = 16, built_at: int = 0):
        self.centers = np.array(centers, dtype=np.float64).reshape(-1, 3)
        self.k = k
        self.built_at = built_at
        self.tree = cKDTree(self.centers) if len(self.centers) else None
        self._neighbors = None

    def __len__(self) -> int:
        return len(self.centers)

    def staleness(self, iteration: int) -> int:
        return iteration - self.built_at

    def _exact_row(self, x, k, exclude):
        d, i = self.tree.query(x, k=min(len(self), k + (exclude is not None)))
        d, i = np.atleast_1d(d), np.atleast_1d(i)
        radius = d[-1] * (1 + 1e-12) + 1e-300
        cand = np.array(self.tree.query_ball_point(x, radius), dtype=np.int64)
        if exclude is not None:
            cand = cand[cand != exclude]
        dist = np.linalg.norm(self.centers[cand] - x, axis=1)
        order = np.lexsort((cand, dist))
        return cand[order][:k]

    def query(self, x, k: int | None = None, exclude: int | None = None) -> np.ndarray:
        """Ids of the ``k`` nearest centers to ``x``; ``exclude`` drops one id (self)."""
        k = self.k if k is None else k
        if k < 1:
            raise ValueError("k must be >= 1")
        avail = len(self) - (exclude is not None)
        k = min(k, avail)
        if k <= 0:
            return np.zeros(0, dtype=np.int64)
        return self._exact_row(np.asarray(x, dtype=np.float64).reshape(3), k, exclude)

    def query_batch(self, xs, k: int | None = None) -> np.ndarray:
        """(M, k) neighbour ids for many query points, same ordering contract."""
        k = min(self.k if k is None else k, len(self))
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        if k <= 0 or len(xs) == 0:
            return np.zeros((len(xs), max(k, 0)), dtype=np.int64)
        extra = min(len(self), k + 4)
        d, i = self.tree.query(xs, k=extra)
        d, i = d.reshape(len(xs), extra), i.reshape(len(xs), extra)
        order = _row_lexsort(d, i)
        d = np.take_along_axis(d, order, 1)
        i = np.take_along_axis(i, order, 1)
        out = i[:, :k].copy()
        if extra > k:
            # a tie straddling the cut may hide a lower id beyond the fetched set
            ambiguous = np.nonzero(d[:, k - 1] == d[:, -1])[0]
        else:
            ambiguous = np.zeros(0, dtype=np.int64)
        for r in ambiguous:
            out[r] = self._exact_row(xs[r], k, None)
        return out

    def neighbors(self) -> np.ndarray:
        """(N, min(k, N-1)) neighbour ids of every splat, self excluded."""
        if self._neighbors is None:
            n = len(self)
            k = min(self.k, n - 1)
            if k <= 0:
                self._neighbors = np.zeros((n, 0), dtype=np.int64)
            else:
                ids = self.query_batch(self.centers, k + 1)
                rows = []
                for r in range(n):
                    row = ids[r][ids[r] != r]
                    if len(row) < k:
                        row = self.query(self.centers[r], k, exclude=r)
                    rows.append(row[:k])
                self._neighbors = np.stack(rows)
        return self._neighbors


def _row_lexsort(d, i):
    # sort each row by distance then id
    order = np.argsort(i, axis=1, kind="stable")
    d2 = np.take_along_axis(d, order, 1)
    order2 = np.argsort(d2, axis=1, kind="stable")
    return np.take_along_axis(order, order2, 1)


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_from: int = 500
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.05
    min_opacity: float = 0.005
    shape_reset_interval: int = 1000
    shape_prune_threshold: float = 0.5
    percent_dense: float = 0.01
    split_children: int = 2
    split_scale_divisor: float = 1.6
    max_world_fraction: float = 0.1
    max_splats: int = 100_000

    def __post_init__(self):
        for name in ("densify_interval", "opacity_reset_interval", "shape_reset_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("opacity_reset_value", "min_opacity", "shape_prune_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class EditSummary:
    """What a densify/prune pass did.

    ``source[j]`` is the pre-edit index the j-th surviving splat came from and
    ``is_new[j]`` marks clones and split children, whose optimizer state must
    restart from zero.
    """

    cloned: int = 0
    split: int = 0
    pruned: int = 0
    opacity_reset: bool = False
    shape_reset: bool = False
    source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    is_new: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def structural(self) -> bool:
        return bool(self.cloned or self.split or self.pruned)


def densify_and_prune(
    cloud: SplatCloud,
    grad_accum,
    grad_count,
    cfg: DensifyConfig,
    iteration: int,
    extent: float,
    rng: np.random.Generator,
    rho: float = 0.1,
    densify: bool = True,
    shape_events: bool = True,
    big_prune: bool = False,
) -> EditSummary:
    """Clone/split high-gradient splats, prune faint ones, apply reset events.

    ``grad_accum / grad_count`` is the mean image-space position-gradient
    magnitude per splat. The cloud is modified in place.
    """
    n = len(cloud)
    grad_accum = np.asarray(grad_accum, dtype=np.float64).reshape(n)
    grad_count = np.asarray(grad_count, dtype=np.float64).reshape(n)
    summary = EditSummary(source=np.arange(n), is_new=np.zeros(n, dtype=bool))

    shape_event = shape_events and iteration > 0 and iteration % cfg.shape_reset_interval == 0
    prune = cloud.opacities < cfg.min_opacity
    if shape_event:
        # faint primitives whose shape collapsed their footprint
        prune |= (cloud.opacities < cfg.shape_prune_threshold) & (cloud.shapes < cfg.shape_prune_threshold)
    if big_prune:
        prune |= cloud.scales.max(axis=1) > cfg.max_world_fraction * extent

    clone = np.zeros(n, dtype=bool)
    split = np.zeros(n, dtype=bool)
    if densify:
        mean_grad = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
        hot = (mean_grad >= cfg.grad_threshold) & ~prune
        budget = max(cfg.max_splats - n, 0)
        if hot.sum() > budget:
            # keep the strongest candidates when the cap binds
            order = np.argsort(-mean_grad, kind="stable")
            keep_hot = np.zeros(n, dtype=bool)
            keep_hot[order[:budget]] = True
            hot &= keep_hot
        big = cloud.scales.max(axis=1) > cfg.percent_dense * extent
        clone = hot & ~big
        split = hot & big

    pieces = []
    sources = []
    new_flags = []
    keep = ~prune & ~split
    pieces.append(cloud.take(keep))
    sources.append(np.nonzero(keep)[0])
    new_flags.append(np.zeros(keep.sum(), dtype=bool))

    if clone.any():
        idx = np.nonzero(clone)[0]
        pieces.append(cloud.take(idx))
        sources.append(idx)
        new_flags.append(np.ones(len(idx), dtype=bool))

    if split.any():
        idx = np.nonzero(split)[0]
        k = cfg.split_children
        rep = np.repeat(idx, k)
        child = cloud.take(rep)
        z = rng.standard_normal((len(rep), 3))
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        # keep children inside the parent's 3-sigma ellipsoid
        z = np.where(norm > 3.0, z * (3.0 / np.maximum(norm, 1e-12)), z)
        R = quat_to_rotmat(child.quats)
        offset = np.einsum("nij,nj->ni", R, z * np.exp(child.log_scales))
        child.means = child.means + offset
        child.log_scales = child.log_scales - np.log(cfg.split_scale_divisor)
        pieces.append(child)
        sources.append(rep)
        new_flags.append(np.ones(len(rep), dtype=bool))

    merged = _concat(pieces)
    cloud.replace_from(merged)
    summary.cloned = int(clone.sum())
    summary.split = int(split.sum())
    summary.pruned = int(prune.sum())
    summary.source = np.concatenate(sources)
    summary.is_new = np.concatenate(new_flags)

    if iteration > 0 and iteration % cfg.opacity_reset_interval == 0:
        cap = logit(cfg.opacity_reset_value)
        np.minimum(cloud.opacity_logits, cap, out=cloud.opacity_logits)
        summary.opacity_reset = True
    if shape_event:
        cloud.shapes[:] = 2.0
        summary.shape_reset = True

    if summary.structural:
        cloud.generation += 1
    if len(cloud) == 0:
        log.warning("densify_and_prune emptied the cloud at iteration %d", iteration)
    return summary


def _concat(pieces: list[SplatCloud]) -> SplatCloud:
    return SplatCloud(*(np.concatenate([getattr(p, f) for p in pieces]) for f in PARAM_FIELDS))


def prune_mask(cloud: SplatCloud, mask) -> EditSummary:
    """Remove splats where ``mask`` is true; returns the remapping summary."""
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask
    summary = EditSummary(pruned=int(mask.sum()), source=np.nonzero(keep)[0],
                          is_new=np.zeros(keep.sum(), dtype=bool))
    if mask.any():
        cloud.replace_from(cloud.take(keep))
        cloud.generation += 1
    return summary


def scene_extent(camera_centers) -> float:
    """Radius of the camera rig around its centroid, padded by 10%."""
    c = np.asarray(camera_centers, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(c - c.mean(axis=0), axis=1).max() if len(c) > 1 else 1.0
    return 1.1 * max(float(r), 1e-6)


def effective_scales(cloud: SplatCloud, rho: float = 0.1) -> np.ndarray:
    return cloud.scales * shape_modulation(cloud.shapes, rho)[:, None]


_REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def save_ply(cloud: SplatCloud) -> bytes:
    """Binary PLY in the 3DGS vertex layout plus a ``shape`` property.

    Everything is written as double so a save/load round trip is exact.
    """
    from .plyio import write_ply

    v = {"x": cloud.means[:, 0], "y": cloud.means[:, 1], "z": cloud.means[:, 2]}
    for c in range(3):
        v[f"f_dc_{c}"] = cloud.sh_dc[:, c]
    # channel-major like the reference layout: f_rest_{channel * 3 + basis}
    for c in range(3):
        for b in range(3):
            v[f"f_rest_{c * 3 + b}"] = cloud.sh_rest[:, b, c]
    v["opacity"] = cloud.opacity_logits
    for a in range(3):
        v[f"scale_{a}"] = cloud.log_scales[:, a]
    for a in range(4):
        v[f"rot_{a}"] = cloud.quats[:, a]
    v["shape"] = cloud.shapes
    v = {k: np.ascontiguousarray(a, dtype=np.float64) for k, a in v.items()}
    return write_ply({"vertex": v}, comments=[f"generation {cloud.generation}"])


def load_ply(data: bytes) -> SplatCloud:
    from .plyio import PlyError, read_ply

    elements = read_ply(data)
    if "vertex" not in elements:
        raise PlyError("missing required element 'vertex'")
    v = elements["vertex"]
    for name in _REQUIRED:
        if name not in v:
            raise PlyError(f"missing required property {name!r} in element 'vertex'")
    n = len(v["x"])
    col = lambda name: np.asarray(v[name], dtype=np.float64)  # noqa: E731
    sh_rest = np.zeros((n, 3, 3))
    for c in range(3):
        for b in range(3):
            key = f"f_rest_{c * 3 + b}"
            if key in v:
                sh_rest[:, b, c] = col(key)
    if "shape" in v:
        shapes = col("shape")
    else:
        log.warning("PLY has no 'shape' property; importing as Gaussian splats (shape=2.0)")
        shapes = np.full(n, 2.0)
    quats = np.stack([col(f"rot_{a}") for a in range(4)], axis=1)
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        quats = quats / norms
    return SplatCloud(
        means=np.stack([col("x"), col("y"), col("z")], axis=1),
        quats=quats,
        log_scales=np.stack([col(f"scale_{a}") for a in range(3)], axis=1),
        opacity_logits=col("opacity"),
        sh_dc=np.stack([col(f"f_dc_{c}") for c in range(3)], axis=1),
        sh_rest=sh_rest,
        shapes=shapes,
    )
