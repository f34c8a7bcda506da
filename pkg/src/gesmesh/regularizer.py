"""Surface regularization: density, SDF estimates and the SDF / normal losses.

The losses are written in torch so that parameter gradients of the normal
term (which depends on the spatial gradient of the density) come from
autograd. ``DensityField`` offers the same quantities in numpy for bulk
queries such as level-set sampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .kernel import SplatCore, quat_to_rotmat
from .render import SplatGrads
from .scene import KnnIndex, SplatCloud

D_MIN = 1e-12
D_MAX = 1.0 - 1e-7
SCALE_FLOOR = 1e-4  # times scene extent
GRAD_EPS = 1e-12


@dataclass
class SamplePoint:
    position: np.ndarray
    source: int
    nearest: int
    neighbors: np.ndarray


@dataclass
class SampleBatch:
    positions: np.ndarray  # (B, 3)
    sources: np.ndarray  # (B,)
    neighbors: np.ndarray  # (B, K) sorted by distance to the sample; first entry is g*
    offsets: np.ndarray | None = None  # (B, 3) standard-normal draws in the source frame

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, b: int) -> SamplePoint:
        return SamplePoint(self.positions[b], int(self.sources[b]), int(self.neighbors[b, 0]),
                           self.neighbors[b])

    @property
    def nearest(self) -> np.ndarray:
        return self.neighbors[:, 0]


def candidate_neighbors(points, seeds, knn: KnnIndex, k: int = 16) -> np.ndarray:
    """Per point, the ``k`` centers nearest to it among a seed splat and its cached neighbours."""
    seeds = np.asarray(seeds, dtype=np.int64)
    cand = np.concatenate([seeds[:, None], knn.neighbors()[seeds]], axis=1)
    d = np.linalg.norm(knn.centers[cand] - np.asarray(points)[:, None, :], axis=2)
    order = _sort_rows(d, cand)
    cand = np.take_along_axis(cand, order, 1)
    return cand[:, : min(k, cand.shape[1])]


def _sort_rows(d, ids):
    o1 = np.argsort(ids, axis=1, kind="stable")
    o2 = np.argsort(np.take_along_axis(d, o1, 1), axis=1, kind="stable")
    return np.take_along_axis(o1, o2, 1)


def sample_points(cloud: SplatCloud, batch: int, rng: np.random.Generator,
                  knn: KnnIndex | None = None, k: int = 16) -> SampleBatch:
    """Draw points from the splats' Gaussian ellipsoids, splats chosen by volume."""
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty cloud")
    if batch <= 0:
        return SampleBatch(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=np.int64),
                           np.zeros((0, 3)))
    knn = knn or KnnIndex(cloud.means, k=k)
    vol = np.exp(cloud.log_scales.sum(axis=1) - cloud.log_scales.sum(axis=1).max())
    src = rng.choice(len(cloud), size=batch, p=vol / vol.sum())
    z = rng.standard_normal((batch, 3))
    R = quat_to_rotmat(cloud.quats[src])
    pos = cloud.means[src] + np.einsum("bij,bj->bi", R, z * cloud.scales[src])
    return SampleBatch(pos, src, candidate_neighbors(pos, src, knn, k), z)


# --------------------------------------------------------------------------- torch core

def _t(a, requires_grad=False):
    t = torch.tensor(np.asarray(a, dtype=np.float64))
    return t.requires_grad_(requires_grad) if requires_grad else t


def _quat_to_rotmat_t(q):
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def _field_t(x, means, quats, log_scales, opacity_logits, shapes, nn, gstar, mask, floor):
    """SDF quantities at points ``x`` (B, 3) over neighbour lists ``nn`` (B, K).

    Returns density, actual sdf, ideal sdf, spatial sdf gradient, g* normal and
    a mask of samples whose gradient is usable.
    """
    mu = means[nn]
    R = _quat_to_rotmat_t(quats[nn])
    s = torch.clamp(torch.exp(log_scales[nn]), min=floor)
    alpha = torch.sigmoid(opacity_logits[nn])
    eps = shapes[nn]
    diff = x[:, None, :] - mu
    y = torch.einsum("bkji,bkj->bki", R, diff)  # R^T diff
    ys = y / (s * s)
    m = torch.clamp(torch.sum(y * ys, dim=-1), min=1e-20)
    mp = m ** (0.5 * eps)
    w = alpha * torch.exp(-0.5 * mp) * mask
    d = w.sum(dim=1)
    # grad of m is 2 R (y / s^2)
    coef = w * (0.5 * eps) * mp / m
    grad_d = -torch.einsum("bk,bkij,bkj->bi", coef, R, ys)

    Rg = _quat_to_rotmat_t(quats[gstar])
    sg_raw = torch.exp(log_scales[gstar])
    amin = torch.argmin(sg_raw.detach(), dim=1)
    n = Rg[torch.arange(len(gstar)), :, amin]
    s_min = torch.clamp(sg_raw.gather(1, amin[:, None])[:, 0], min=floor)
    h = torch.sum((x - means[gstar]) * n, dim=-1)
    sign = torch.where(h.detach() >= 0, 1.0, -1.0).to(x.dtype)
    fbar = sign * torch.clamp(h.abs(), min=1e-30) ** (0.5 * shapes[gstar])

    inside = (d > D_MIN) & (d < D_MAX)
    dc = torch.clamp(d, D_MIN, D_MAX)
    L = -2.0 * torch.log(dc)
    f = sign * s_min * torch.sqrt(L)
    grad_f = torch.where(inside[:, None], -(sign * s_min / (dc * torch.sqrt(L)))[:, None] * grad_d,
                         torch.zeros_like(grad_d))
    gnorm = grad_f.norm(dim=-1)
    valid = gnorm.detach() > GRAD_EPS
    return d, f, fbar, grad_f, n, valid


def _cloud_tensors(cloud: SplatCloud, requires_grad=False):
    return {
        "means": _t(cloud.means, requires_grad),
        "quats": _t(cloud.quats, requires_grad),
        "log_scales": _t(cloud.log_scales, requires_grad),
        "opacity_logits": _t(cloud.opacity_logits, requires_grad),
        "shapes": _t(cloud.shapes, requires_grad),
    }


def _nn_mask(nn):
    nn = np.asarray(nn, dtype=np.int64)
    mask = nn >= 0
    return torch.tensor(np.where(mask, nn, 0)), torch.tensor(mask, dtype=torch.float64)


# --------------------------------------------------------------------------- public ops

def density(x, cloud: SplatCloud, neighbor_ids=None, floor: float = 0.0) -> np.ndarray:
    """Opacity-weighted sum of generalized exponential kernels at ``x``.

    ``neighbor_ids`` (M, K) restricts the sum per point; by default all splats
    contribute. Negative ids are padding.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if neighbor_ids is None:
        neighbor_ids = np.broadcast_to(np.arange(len(cloud)), (len(x), len(cloud)))
    field = DensityField(cloud, floor=floor)
    return field.density(x, np.atleast_2d(neighbor_ids))


def ideal_sdf(x, g: SplatCore) -> np.ndarray:
    """Signed distance to g's flattened plane raised to shape / 2."""
    x = np.asarray(x, dtype=np.float64)
    R = quat_to_rotmat(g.rotation)
    n = R[:, int(np.argmin(g.scale))]
    h = (x - g.center) @ n
    return np.sign(h) * np.abs(h) ** (0.5 * g.shape)


def actual_sdf(x, cloud: SplatCloud, neighbor_ids, nearest: int, floor: float = 0.0) -> np.ndarray:
    """s_min(g*) * sqrt(-2 log d(x)), signed by the side of g*'s plane."""
    return _evaluate_at(x, cloud, neighbor_ids, nearest, floor)["f"]


def sdf_gradient(x, cloud: SplatCloud, neighbor_ids, nearest, floor: float = 0.0):
    """Analytic spatial gradient of the actual SDF and a per-point degenerate flag."""
    ev = _evaluate_at(x, cloud, neighbor_ids, nearest, floor)
    return ev["grad_f"], ~ev["valid"]


def _evaluate_at(x, cloud, neighbor_ids, nearest, floor):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nn = np.atleast_2d(neighbor_ids)
    nn = np.broadcast_to(nn, (len(x), nn.shape[1]))
    gs = np.broadcast_to(np.atleast_1d(nearest), (len(x),))
    return DensityField(cloud, floor=floor).evaluate(x, nn, gs)


class DensityField:
    """Queryable density / SDF view of a splat cloud backed by a KNN index."""

    def __init__(self, cloud: SplatCloud, knn: KnnIndex | None = None, k: int = 16, floor: float = 0.0):
        self.cloud = cloud
        self.k = k
        self.floor = floor
        self._knn = knn
        s = np.maximum(cloud.scales, floor) if floor > 0 else cloud.scales
        R = cloud.rotations
        self._prec = np.einsum("nij,nj,nkj->nik", R, 1.0 / (s * s), R)
        self._alpha = cloud.opacities

    @property
    def knn(self) -> KnnIndex:
        if self._knn is None:
            self._knn = KnnIndex(self.cloud.means, k=self.k)
        return self._knn

    def neighbors(self, x) -> np.ndarray:
        return self.knn.query_batch(x, self.k)

    def density(self, x, neighbor_ids=None, chunk: int = 20000) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        nn = self.neighbors(x) if neighbor_ids is None else np.asarray(neighbor_ids)
        out = np.empty(len(x))
        for a in range(0, len(x), chunk):
            ids = nn[a:a + chunk]
            mask = ids >= 0
            ids = np.where(mask, ids, 0)
            diff = x[a:a + chunk, None, :] - self.cloud.means[ids]
            m = np.einsum("bki,bkij,bkj->bk", diff, self._prec[ids], diff)
            k = self._alpha[ids] * np.exp(-0.5 * m ** (0.5 * self.cloud.shapes[ids]))
            out[a:a + chunk] = np.sum(k * mask, axis=1)
        return out

    def evaluate(self, x, neighbor_ids=None, nearest=None, chunk: int = 20000) -> dict:
        """Density, actual/ideal SDF, SDF gradient and g* normals at ``x``.

        ``nearest`` defaults to the first neighbour of each point.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        nn = self.neighbors(x) if neighbor_ids is None else np.asarray(neighbor_ids)
        gs = nn[:, 0] if nearest is None else np.asarray(nearest)
        P = _cloud_tensors(self.cloud)
        keys = ("d", "f", "fbar", "grad_f", "normal", "valid")
        parts = {k: [] for k in keys}
        with torch.no_grad():
            for a in range(0, len(x), chunk):
                ids, mask = _nn_mask(nn[a:a + chunk])
                res = _field_t(_t(x[a:a + chunk]), P["means"], P["quats"], P["log_scales"],
                               P["opacity_logits"], P["shapes"], ids,
                               torch.tensor(np.asarray(gs[a:a + chunk], dtype=np.int64)), mask, self.floor)
                for k, v in zip(keys, res):
                    parts[k].append(v.detach().numpy())
        return {k: np.concatenate(v) for k, v in parts.items()}


@dataclass
class GsrResult:
    l_sdf: float
    l_nor: float
    grads_sdf: SplatGrads | None
    grads_nor: SplatGrads | None
    n_valid_normals: int
    grads: SplatGrads | None = None  # weighted sum, when weights were given


def gsr_losses(cloud: SplatCloud, samples: SampleBatch, floor: float = 0.0,
               with_grad: bool = True, weights: tuple[float, float] | None = None) -> GsrResult:
    """Mean |ideal - actual| SDF and mean normal misalignment over the samples.

    The normal of g* is taken with whichever orientation better matches the
    SDF gradient, so per-splat axis signs never matter. With ``weights`` only
    the gradient of w_sdf * L_sdf + w_nor * L_nor is returned, in one pass.
    """
    if len(samples) == 0:
        raise ValueError("gsr_losses needs a nonempty sample batch")
    P = _cloud_tensors(cloud, requires_grad=with_grad)
    ids, mask = _nn_mask(samples.neighbors)
    if samples.offsets is not None:
        # keep samples attached to their source splat so its gradients see them move
        src = torch.tensor(np.asarray(samples.sources, dtype=np.int64))
        x = P["means"][src] + torch.einsum("bij,bj->bi", _quat_to_rotmat_t(P["quats"][src]),
                                           torch.exp(P["log_scales"][src]) * _t(samples.offsets))
    else:
        x = _t(samples.positions)
    d, f, fbar, grad_f, n, valid = _field_t(
        x, P["means"], P["quats"], P["log_scales"], P["opacity_logits"],
        P["shapes"], ids, torch.tensor(samples.nearest), mask, floor)
    l_sdf = torch.mean(torch.abs(fbar - f))
    nv = int(valid.sum())
    if nv > 0:
        a = grad_f[valid] / grad_f[valid].norm(dim=-1, keepdim=True)
        cos = torch.abs(torch.sum(a * n[valid], dim=-1))
        l_nor = torch.mean(2.0 - 2.0 * cos)
    else:
        l_nor = torch.zeros((), dtype=torch.float64)
    if not with_grad:
        return GsrResult(l_sdf.item(), l_nor.item(), None, None, nv)
    params = [P[k] for k in ("means", "quats", "log_scales", "opacity_logits", "shapes")]

    def grads_of(loss, retain):
        out = SplatGrads.zeros(len(cloud))
        if not loss.requires_grad:
            return out
        g = torch.autograd.grad(loss, params, retain_graph=retain, allow_unused=True)
        g = [np.zeros(p.shape) if gi is None else gi.numpy() for gi, p in zip(g, params)]
        out.means, out.quats, out.log_scales, out.opacity_logits, out.shapes = g
        return out

    if weights is not None:
        total = weights[0] * l_sdf + weights[1] * l_nor
        return GsrResult(l_sdf.item(), l_nor.item(), None, None, nv, grads_of(total, False))
    return GsrResult(l_sdf.item(), l_nor.item(), grads_of(l_sdf, True), grads_of(l_nor, False), nv)
