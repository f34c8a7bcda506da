"""Level-set point extraction, grid Poisson reconstruction and mesh files."""
from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .camera import Camera
from .plyio import PlyError, read_ply, write_ply
from .regularizer import DensityField
from .render import RasterSettings, render
from .scene import SplatCloud

log = logging.getLogger(__name__)

LEVEL_ALPHA = 0.3
RESIDUAL_TOL = 1e-2


class MeshError(ValueError):
    pass


# --------------------------------------------------------------------------- level set

def crossing_fraction(d0, d1, alpha):
    """Where the segment between densities d0 and d1 meets ``alpha`` (0 at d0, 1 at d1)."""
    d0 = np.asarray(d0, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (alpha - d0) / (d1 - d0)
    return np.clip(np.where(np.isfinite(f), f, 0.0), 0.0, 1.0)


def first_rising_crossing(dens, alpha) -> np.ndarray:
    """Index k of the first pair with dens[k] < alpha <= dens[k + 1] per row, -1 if none."""
    dens = np.atleast_2d(dens)
    hit = (dens[:, :-1] < alpha) & (dens[:, 1:] >= alpha)
    k = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), k, -1)


@dataclass
class LevelSetPoints:
    positions: np.ndarray
    normals: np.ndarray
    camera_ids: np.ndarray
    pixels: np.ndarray  # (M, 2) as (col, row)
    residuals: np.ndarray
    rays: int = 0  # pixels examined
    crossings: int = 0  # rays with a crossing before the residual filter

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def coverage(self) -> float:
        return self.crossings / self.rays if self.rays else 0.0

    def report(self) -> dict:
        r = self.residuals
        return {
            "rays": int(self.rays), "crossings": int(self.crossings), "points": len(self),
            "coverage": float(self.coverage),
            "residual_max": float(r.max()) if len(r) else None,
            "residual_mean": float(r.mean()) if len(r) else None,
            "residual_p99": float(np.percentile(r, 99)) if len(r) else None,
        }


def _refine(field, x0, v, nn_fn, lo, hi, d_lo, d_hi, alpha, iters):
    """Illinois-style regula falsi on the bracket [lo, hi] along rays x0 + t v."""
    t = lo + crossing_fraction(d_lo, d_hi, alpha) * (hi - lo)
    side = np.zeros(len(t), dtype=np.int64)
    for _ in range(iters):
        x = x0 + t[:, None] * v
        d = field.density(x, nn_fn(x))
        res = d - alpha
        done = np.abs(res) <= 0.1 * RESIDUAL_TOL
        if done.all():
            break
        below = res < 0
        # move the endpoint on the same side; halve the stale one when it repeats
        lo = np.where(below, t, lo)
        d_lo = np.where(below, d, d_lo)
        hi = np.where(below, hi, t)
        d_hi = np.where(below, d_hi, d)
        d_hi = np.where(below & (side == 1), alpha + 0.5 * (d_hi - alpha), d_hi)
        d_lo = np.where(~below & (side == -1), alpha + 0.5 * (d_lo - alpha), d_lo)
        side = np.where(below, 1, -1)
        t_new = lo + crossing_fraction(d_lo, d_hi, alpha) * (hi - lo)
        t = np.where(done, t, t_new)
    return t


def sample_level_set(cloud: SplatCloud, cameras: list[Camera], alpha: float = LEVEL_ALPHA,
                     pixels_per_view: int = 10_000, steps: int = 32,
                     rng: np.random.Generator | None = None, rho: float = 0.1,
                     settings: RasterSettings | None = None, refine_iters: int = 8,
                     min_alpha: float = 0.5, k: int = 16) -> LevelSetPoints:
    """Oriented points on the density level set ``d(x) = alpha`` seen from the cameras.

    Each sampled pixel marches ``steps`` samples over +-3 standard deviations of
    its dominant splat around the expected depth and keeps the first rising
    crossing. Points whose density misses ``alpha`` by more than 1e-2 after
    refinement are dropped.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if steps < 2:
        raise ValueError("need at least 2 ray samples")
    rng = rng or np.random.default_rng(0)
    field = DensityField(cloud, k=k)
    knn = field.knn
    nn_fn = lambda x: knn.query_batch(x, k)  # noqa: E731
    cov = np.einsum("nij,nj,nkj->nik", cloud.rotations, cloud.scales ** 2, cloud.rotations)
    out = {"p": [], "n": [], "c": [], "px": [], "r": []}
    rays = crossings = 0
    for ci, cam in enumerate(cameras):
        res = render(cloud, cam, rho=rho, settings=settings)
        valid = (res.image.alpha >= min_alpha) & (res.dominant >= 0)
        rows, cols = np.nonzero(valid)
        if len(rows) == 0:
            continue
        if len(rows) > pixels_per_view:
            pick = np.sort(rng.choice(len(rows), pixels_per_view, replace=False))
            rows, cols = rows[pick], cols[pick]
        rays += len(rows)
        v = cam.pixel_rays(cols, rows)
        zdepth = res.image.depth[rows, cols]
        x0 = cam.center + v * (zdepth / (v @ cam.forward))[:, None]
        g = res.dominant[rows, cols]
        sigma = np.sqrt(np.einsum("bi,bij,bj->b", v, cov[g], v))
        ts = np.linspace(-3.0, 3.0, steps)[None, :] * sigma[:, None]
        pts = x0[:, None, :] + ts[..., None] * v[:, None, :]
        flat = pts.reshape(-1, 3)
        dens = field.density(flat, nn_fn(flat)).reshape(len(rows), steps)
        kx = first_rising_crossing(dens, alpha)
        ok = kx >= 0
        crossings += int(ok.sum())
        if not ok.any():
            continue
        idx = np.nonzero(ok)[0]
        kk = kx[idx]
        t = _refine(field, x0[idx], v[idx], nn_fn, ts[idx, kk], ts[idx, kk + 1],
                    dens[idx, kk], dens[idx, kk + 1], alpha, refine_iters)
        xh = x0[idx] + t[:, None] * v[idx]
        nn = nn_fn(xh)
        ev = field.evaluate(xh, nn)
        resid = np.abs(ev["d"] - alpha)
        gf = ev["grad_f"]
        gn = np.linalg.norm(gf, axis=1)
        keep = (resid <= RESIDUAL_TOL) & (gn > 0)
        nrm = gf[keep] / gn[keep, None]
        # orient towards the camera
        flip = np.einsum("bi,bi->b", nrm, v[idx][keep]) > 0
        nrm[flip] *= -1
        out["p"].append(xh[keep])
        out["n"].append(nrm)
        out["c"].append(np.full(int(keep.sum()), ci))
        out["px"].append(np.column_stack([cols[idx][keep], rows[idx][keep]]))
        out["r"].append(resid[keep])
    if not out["p"]:
        return LevelSetPoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
                              np.zeros((0, 2), dtype=np.int64), np.zeros(0), rays, crossings)
    return LevelSetPoints(np.concatenate(out["p"]), np.concatenate(out["n"]), np.concatenate(out["c"]),
                          np.concatenate(out["px"]), np.concatenate(out["r"]), rays, crossings)


# --------------------------------------------------------------------------- mesh type

@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.faces)

    def validate(self) -> None:
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")

    def face_normals(self, unit: bool = True) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def compute_vertex_normals(self) -> np.ndarray:
        n = np.zeros_like(self.vertices)
        fn = self.face_normals(unit=False)
        for i in range(3):
            np.add.at(n, self.faces[:, i], fn)
        self.normals = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return self.normals

    def _edges(self):
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return e

    def boundary_edges(self) -> np.ndarray:
        """Undirected edges used by exactly one face."""
        e = np.sort(self._edges(), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two faces, traversed once in each direction."""
        if len(self.faces) == 0:
            return False
        e = np.sort(self._edges(), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        if not np.all(counts == 2):
            return False
        directed = np.unique(self._edges(), axis=0)
        return len(directed) == len(self._edges())

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    @property
    def orientation(self) -> int:
        """+1 when faces wind outward (positive enclosed volume), -1 otherwise."""
        return 1 if self.signed_volume() >= 0 else -1

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        area = self.face_areas()
        f = rng.choice(len(self.faces), size=n, p=area / area.sum())
        u, v = rng.random(n), rng.random(n)
        over = u + v > 1
        u[over], v[over] = 1 - u[over], 1 - v[over]
        a, b, c = (self.vertices[self.faces[f, i]] for i in range(3))
        return a + u[:, None] * (b - a) + v[:, None] * (c - a)


# --------------------------------------------------------------------------- Poisson

@dataclass
class VoxelGrid:
    resolution: int
    origin: np.ndarray  # corner of the box
    spacing: float

    @classmethod
    def around(cls, points, resolution: int, margin: float = 0.05) -> "VoxelGrid":
        if resolution < 16:
            raise ValueError("grid resolution must be at least 16")
        lo, hi = points.min(axis=0), points.max(axis=0)
        center = 0.5 * (lo + hi)
        side = max(float((hi - lo).max()), 1e-9) * (1.0 + 2.0 * margin)
        return cls(resolution, center - 0.5 * side, side / resolution)

    def cell_centers(self, axis_coords) -> np.ndarray:
        return self.origin + (np.asarray(axis_coords) + 0.5) * self.spacing


def _diff_1d(n, h):
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h


def gradient_operators(n: int, h: float):
    """Finite-difference gradients from cell values to interior faces along x, y, z."""
    D = _diff_1d(n, h).tocsr()
    I = sp.identity(n, format="csr")
    return (sp.kron(sp.kron(D, I), I).tocsr(), sp.kron(sp.kron(I, D), I).tocsr(),
            sp.kron(sp.kron(I, I), D).tocsr())


def _splat_component(grid: VoxelGrid, points, values, axis: int) -> np.ndarray:
    """Trilinear splat of one vector component onto that axis's face lattice."""
    n = grid.resolution
    shape = [n, n, n]
    shape[axis] = n - 1
    # face lattice coordinates: faces sit on cell boundaries along ``axis``
    u = (points - grid.origin) / grid.spacing - 0.5
    u[:, axis] -= 0.5
    out = np.zeros(shape)
    base = np.floor(u).astype(np.int64)
    frac = u - base
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
        np.add.at(out, tuple(idx[ok].T), w[ok] * values[ok])
    return out


def poisson_reconstruct(points, normals, resolution: int = 128, margin: float = 0.05,
                        smooth: float = 1.0, tol: float = 1e-8) -> TriangleMesh:
    """Indicator-function surface from oriented points.

    Solves the least-squares problem grad(chi) ~ V on a staggered grid with
    conjugate gradients, then extracts the iso-surface through the mean of chi
    at the input points. Face winding follows the input normals.
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if len(points) < 100:
        raise MeshError(f"poisson reconstruction needs at least 100 oriented points, got {len(points)}")
    grid = VoxelGrid.around(points, resolution, margin)
    n, h = grid.resolution, grid.spacing
    Gx, Gy, Gz = gradient_operators(n, h)
    V = [_splat_component(grid, points, normals[:, a], a) for a in range(3)]
    if smooth > 0:
        V = [gaussian_filter(v, smooth, mode="constant") for v in V]
    rhs = Gx.T @ V[0].ravel() + Gy.T @ V[1].ravel() + Gz.T @ V[2].ravel()
    L = (Gx.T @ Gx + Gy.T @ Gy + Gz.T @ Gz).tocsr()
    info = {}
    it = [0]

    def count(_):
        it[0] += 1

    maxiter = 10 * L.shape[0]
    chi, status = cg(L, rhs, rtol=tol, atol=0.0, maxiter=maxiter, callback=count)
    resid = float(np.linalg.norm(L @ chi - rhs) / max(np.linalg.norm(rhs), 1e-300))
    if status != 0:
        raise MeshError(f"conjugate gradients did not converge in {maxiter} iterations "
                        f"(relative residual {resid:.3e})")
    chi -= chi.mean()
    vol = chi.reshape(n, n, n)
    u = ((points - grid.origin) / h - 0.5).T
    iso = float(map_coordinates(vol, u, order=1, mode="nearest").mean())
    info.update(cg_iterations=it[0], cg_residual=resid, iso=iso, grid=n, spacing=h)
    if not (vol.min() < iso < vol.max()):
        raise MeshError("indicator function is flat; no surface to extract")
    verts, faces, _, _ = marching_cubes(vol, level=iso, allow_degenerate=False)
    verts = grid.origin + (verts + 0.5) * h
    mesh = TriangleMesh(verts, faces, info=info)
    # wind faces so their normals follow grad(chi), i.e. the input normals
    gx, gy, gz = np.gradient(vol, h)
    cen = (mesh.vertices[mesh.faces].mean(axis=1) - grid.origin) / h - 0.5
    g = np.stack([map_coordinates(c, cen.T, order=1, mode="nearest") for c in (gx, gy, gz)], axis=1)
    if np.einsum("ij,ij->", mesh.face_normals(), g) < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    mesh.compute_vertex_normals()
    mesh.info.update(watertight=mesh.is_watertight(), boundary_edges=int(len(mesh.boundary_edges())),
                     orientation=mesh.orientation)
    return mesh


# --------------------------------------------------------------------------- color

def colorize_mesh(mesh: TriangleMesh, cloud: SplatCloud, cameras=None, k: int = 16) -> TriangleMesh:
    """Per-vertex colors as the density-weighted blend of nearby splat base colors."""
    field = DensityField(cloud, k=k)
    nn = field.neighbors(mesh.vertices)
    mask = nn >= 0
    ids = np.where(mask, nn, 0)
    diff = mesh.vertices[:, None, :] - cloud.means[ids]
    m = np.einsum("bki,bkij,bkj->bk", diff, field._prec[ids], diff)
    w = cloud.opacities[ids] * np.exp(-0.5 * m ** (0.5 * cloud.shapes[ids])) * mask
    base = np.clip(cloud.base_colors, 0.0, 1.0)
    wsum = w.sum(axis=1, keepdims=True)
    blend = np.einsum("bk,bkc->bc", w, base[ids]) / np.maximum(wsum, 1e-300)
    # vertices out of every splat's reach take the nearest splat's color
    colors = np.where(wsum > 1e-300, blend, base[nn[:, 0]])
    return TriangleMesh(mesh.vertices, mesh.faces, mesh.normals, colors, dict(mesh.info))


# --------------------------------------------------------------------------- files

def _check_nonempty(mesh: TriangleMesh):
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        raise MeshError("empty mesh")


def write_obj(mesh: TriangleMesh, path) -> None:
    _check_nonempty(mesh)
    if mesh.colors is not None:
        warnings.warn("OBJ output drops per-vertex colors", stacklevel=2)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    has_n = mesh.normals is not None
    if has_n:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.faces + 1]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    v, vn, faces = [], [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    v.append([float(p) for p in parts[1:4]])
                elif parts[0] == "vn":
                    vn.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(re.split("/", p)[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face with fewer than 3 vertices")
                    for j in range(1, len(idx) - 1):
                        faces.append([idx[0] - 1, idx[j] - 1, idx[j + 1] - 1])
            except (ValueError, IndexError) as e:
                raise MeshError(f"malformed OBJ line {ln}: {line.strip()!r} ({e})") from e
    mesh = TriangleMesh(np.asarray(v, dtype=np.float64).reshape(-1, 3), np.asarray(faces).reshape(-1, 3),
                        np.asarray(vn, dtype=np.float64) if len(vn) == len(v) and vn else None)
    mesh.validate()
    return mesh


def write_mesh_ply(mesh: TriangleMesh, path) -> None:
    _check_nonempty(mesh)
    vert = {"x": mesh.vertices[:, 0].astype("<f4"), "y": mesh.vertices[:, 1].astype("<f4"),
            "z": mesh.vertices[:, 2].astype("<f4")}
    if mesh.normals is not None:
        for a, name in enumerate(("nx", "ny", "nz")):
            vert[name] = mesh.normals[:, a].astype("<f4")
    if mesh.colors is not None:
        c = np.round(np.clip(mesh.colors, 0.0, 1.0) * 255.0).astype(np.uint8)
        for a, name in enumerate(("red", "green", "blue")):
            vert[name] = c[:, a]
    data = write_ply({"vertex": vert, "face": {"vertex_indices": mesh.faces.astype("<i4")}})
    with open(path, "wb") as fh:
        fh.write(data)


def read_mesh_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        el = read_ply(data)
    except PlyError as e:
        raise MeshError(str(e)) from e
    if "vertex" not in el or "face" not in el:
        raise MeshError("mesh PLY needs vertex and face elements")
    v = el["vertex"]
    try:
        verts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    except KeyError as e:
        raise MeshError(f"missing required property {e.args[0]!r} in element 'vertex'") from e
    normals = np.column_stack([v["nx"], v["ny"], v["nz"]]).astype(np.float64) if "nx" in v else None
    colors = (np.column_stack([v["red"], v["green"], v["blue"]]).astype(np.float64) / 255.0
              if "red" in v else None)
    faces = next(iter(el["face"].values()))
    mesh = TriangleMesh(verts, faces, normals, colors)
    mesh.validate()
    return mesh


# --------------------------------------------------------------------------- metrics

def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def chamfer_to_surface(mesh: TriangleMesh, surface, n: int = 50_000, rng=None) -> float:
    """Chamfer distance between a mesh and an analytic surface, both densely sampled.

    Mesh-to-surface uses exact analytic distances; surface-to-mesh uses the
    nearest dense mesh sample.
    """
    rng = rng or np.random.default_rng(0)
    pm = mesh.sample_surface(n, rng)
    ps, _, _ = surface.sample(n, rng)
    d_ms = surface.distance(pm)
    d_sm, _ = cKDTree(pm).query(ps)
    return 0.5 * (float(d_ms.mean()) + float(d_sm.mean()))
