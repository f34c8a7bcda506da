"""Forward splat rendering and its analytic backward pass.

Projection, SH color evaluation and the covariance chain run vectorized in
numpy; per-pixel compositing runs in the numba kernels of ``_raster``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _raster
from .camera import Camera
from .kernel import COV2D_FLOOR, quat_to_rotmat, shape_modulation, shape_modulation_grad
from .scene import SH_C0, SH_C1, SplatCloud


@dataclass
class RasterSettings:
    """Numeric guards of the compositor.

    ``min_alpha`` drops faint contributions and ``t_min`` stops a pixel once
    little light is left. Setting both to zero gives the exact, smooth
    compositing integral (used by gradient checks).
    """

    min_alpha: float = 1.0 / 255.0
    t_min: float = 1e-4
    tile: int = _raster.TILE
    guard_band: float = 1.3
    cov_floor: float = COV2D_FLOOR
    sh_degree: int = 1

    @classmethod
    def exact(cls, **kw) -> "RasterSettings":
        return cls(min_alpha=0.0, t_min=0.0, **kw)


@dataclass
class ImageBuffer:
    rgb: np.ndarray
    depth: np.ndarray | None = None
    alpha: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class ProjectedSplat:
    mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    splat_id: int


@dataclass
class Projection:
    """Visible splats of one view, sorted front to back (ties by id)."""

    ids: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    radii: np.ndarray
    # intermediates for the backward pass
    cam_points: np.ndarray = field(repr=False, default=None)
    rotmats: np.ndarray = field(repr=False, default=None)
    eff_scales: np.ndarray = field(repr=False, default=None)
    phi: np.ndarray = field(repr=False, default=None)
    view_dirs: np.ndarray = field(repr=False, default=None)
    view_dist: np.ndarray = field(repr=False, default=None)
    color_mask: np.ndarray = field(repr=False, default=None)
    gaussian_only: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, k: int) -> ProjectedSplat:
        return ProjectedSplat(self.means2d[k], self.cov2d[k], float(self.depths[k]),
                              self.colors[k], float(self.opacities[k]), int(self.ids[k]))


def eval_colors(cloud: SplatCloud, idx, campos, sh_degree: int = 1):
    """View-dependent RGB (clamped to [0, 1]) plus the values needed for its gradient."""
    v = cloud.means[idx] - campos
    dist = np.linalg.norm(v, axis=1)
    dirs = v / np.maximum(dist, 1e-12)[:, None]
    raw = SH_C0 * cloud.sh_dc[idx] + 0.5
    if sh_degree >= 1:
        f = cloud.sh_rest[idx]
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        raw = raw + SH_C1 * (-y * f[:, 0] + z * f[:, 1] - x * f[:, 2])
    mask = (raw >= 0.0) & (raw <= 1.0)
    return np.clip(raw, 0.0, 1.0), dirs, dist, mask


def project_splats(
    cloud: SplatCloud,
    camera: Camera,
    rho: float = 0.1,
    settings: RasterSettings | None = None,
    gaussian_only: bool = False,
) -> Projection:
    """Cull, project and depth-sort splats for one camera.

    The shape parameter acts only through the variance multiplier on the
    scales; ``gaussian_only`` bypasses it entirely (plain Gaussian splatting).
    """
    settings = settings or RasterSettings()
    t_all = cloud.means @ camera.rotation.T + camera.translation
    z = t_all[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xz = t_all[:, 0] / z
        yz = t_all[:, 1] / z
    g = settings.guard_band
    lim_xp = g * (camera.width - camera.cx) / camera.fx
    lim_xn = g * camera.cx / camera.fx
    lim_yp = g * (camera.height - camera.cy) / camera.fy
    lim_yn = g * camera.cy / camera.fy
    keep = (z > camera.near) & (z < camera.far)
    keep &= (xz > -lim_xn) & (xz < lim_xp) & (yz > -lim_yn) & (yz < lim_yp)
    idx = np.nonzero(keep)[0]
    # stable front-to-back order, equal depths resolved by splat id
    idx = idx[np.argsort(z[idx], kind="stable")]

    t = t_all[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy
    means2d = np.stack([fx * tx / tz + camera.cx, fy * ty / tz + camera.cy], axis=1)

    R = quat_to_rotmat(cloud.quats[idx])
    s = np.exp(cloud.log_scales[idx])
    if gaussian_only:
        phi = np.ones(len(idx))
        s_eff = s
    else:
        phi = shape_modulation(cloud.shapes[idx], rho)
        s_eff = s * phi[:, None]
    M = R * s_eff[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)

    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / (tz * tz)
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / (tz * tz)
    T = J @ camera.rotation
    cov2 = T @ cov3 @ np.swapaxes(T, 1, 2)
    cov2[:, 0, 0] += settings.cov_floor
    cov2[:, 1, 1] += settings.cov_floor
    a, b, c = cov2[:, 0, 0], 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0]), cov2[:, 1, 1]
    cov2[:, 0, 1] = cov2[:, 1, 0] = b
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)

    opac = cloud.opacities[idx]
    colors, dirs, dist, cmask = eval_colors(cloud, idx, camera.center, settings.sh_degree)

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    bound = 2.0 * (camera.width + camera.height)
    if settings.min_alpha > 0:
        ratio = opac / settings.min_alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            radii = np.where(ratio > 1.0, np.sqrt(2.0 * np.log(np.maximum(ratio, 1.0)) * lam_max), 0.0)
        radii = np.minimum(radii, bound)
    else:
        radii = np.full(len(idx), bound)

    return Projection(idx, means2d, cov2, conics, tz.copy(), colors, opac, radii,
                      cam_points=t, rotmats=R, eff_scales=s_eff, phi=phi, view_dirs=dirs,
                      view_dist=dist, color_mask=cmask, gaussian_only=gaussian_only)


@dataclass
class RenderResult:
    image: ImageBuffer
    proj: Projection
    camera: Camera
    background: np.ndarray
    settings: RasterSettings
    ranges: np.ndarray = field(repr=False)
    bin_ids: np.ndarray = field(repr=False)
    n_end: np.ndarray = field(repr=False)
    dominant: np.ndarray = field(repr=False)
    rho: float = 0.1


def power_cut(proj: Projection, settings: RasterSettings) -> np.ndarray:
    if settings.min_alpha <= 0:
        return np.full(len(proj), -np.inf)
    with np.errstate(divide="ignore"):
        return np.log(settings.min_alpha) - np.log(proj.opacities)


def rasterize(proj: Projection, camera: Camera, background=(0.0, 0.0, 0.0),
              settings: RasterSettings | None = None) -> tuple[ImageBuffer, dict]:
    """Composite projected splats. Returns the image plus binning state."""
    settings = settings or RasterSettings()
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    W, H = camera.width, camera.height
    ranges, ids = _raster.bin_splats(np.ascontiguousarray(proj.means2d), np.ascontiguousarray(proj.radii),
                                     W, H, settings.tile)
    rgb, trans, depth, n_end, dominant = _raster.composite_forward(
        np.ascontiguousarray(proj.means2d), np.ascontiguousarray(proj.conics),
        np.ascontiguousarray(proj.colors), np.ascontiguousarray(proj.opacities),
        np.ascontiguousarray(proj.depths), ranges, ids, W, H, settings.tile, bg,
        float(camera.far), power_cut(proj, settings), float(settings.t_min))
    img = ImageBuffer(rgb, depth=depth, alpha=1.0 - trans)
    return img, {"ranges": ranges, "ids": ids, "n_end": n_end, "dominant": dominant}


def render(cloud: SplatCloud, camera: Camera, background=(0.0, 0.0, 0.0), rho: float = 0.1,
           settings: RasterSettings | None = None, gaussian_only: bool = False) -> RenderResult:
    settings = settings or RasterSettings()
    proj = project_splats(cloud, camera, rho, settings, gaussian_only)
    img, st = rasterize(proj, camera, background, settings)
    dom = st["dominant"]
    # map dominant positions in the sorted list back to splat ids
    dom_ids = np.where(dom >= 0, proj.ids[np.maximum(dom, 0)] if len(proj.ids) else -1, -1)
    return RenderResult(img, proj, camera, np.asarray(background, dtype=np.float64).reshape(3), settings,
                        st["ranges"], st["ids"], st["n_end"], dom_ids, rho)


def render_depth(result: RenderResult, min_alpha: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Expected depth map and a validity mask (accumulated alpha >= ``min_alpha``)."""
    valid = result.image.alpha >= min_alpha
    depth = np.where(valid, result.image.depth, np.nan)
    return depth, valid


@dataclass
class SplatGrads:
    """Loss gradients w.r.t. every stored splat parameter (full cloud size)."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray
    shapes: np.ndarray
    means2d_norm: np.ndarray = None
    visible: np.ndarray = None

    @classmethod
    def zeros(cls, n: int) -> "SplatGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros(n), np.zeros(n),
                   np.zeros(n, dtype=bool))

    def add_(self, other: "SplatGrads", weight: float = 1.0) -> "SplatGrads":
        for f in ("means", "quats", "log_scales", "opacity_logits", "sh_dc", "sh_rest", "shapes"):
            getattr(self, f).__iadd__(weight * getattr(other, f))
        return self

    def check_finite(self) -> None:
        for f in ("means", "quats", "log_scales", "opacity_logits", "sh_dc", "sh_rest", "shapes"):
            arr = getattr(self, f)
            bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
            if bad.any():
                raise FloatingPointError(
                    f"non-finite gradient in {f} for splat ids {np.nonzero(bad)[0][:10].tolist()}")


def _quat_grad(q, dR):
    """Gradient w.r.t. a raw quaternion given dL/dR of its normalized rotation."""
    n = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / n
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = dR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    # project through the normalization q / |q|
    return (gq - qn * np.sum(gq * qn, axis=1, keepdims=True)) / n


def render_backward(result: RenderResult, cloud: SplatCloud, grad_rgb: np.ndarray) -> SplatGrads:
    """Chain dL/d(image) back to all splat parameters of ``cloud``."""
    proj, cam, st = result.proj, result.camera, result.settings
    n = len(cloud)
    out = SplatGrads.zeros(n)
    m = len(proj)
    if m == 0:
        return out
    slots = _raster.composite_backward(
        np.ascontiguousarray(proj.means2d), np.ascontiguousarray(proj.conics),
        np.ascontiguousarray(proj.colors), np.ascontiguousarray(proj.opacities),
        result.ranges, result.bin_ids, result.n_end, cam.width, cam.height, st.tile,
        result.background, power_cut(proj, st), np.ascontiguousarray(grad_rgb, dtype=np.float64))
    g = _raster.reduce_slots(slots, result.bin_ids, m)
    g_mean2d = g[:, 0:2]
    ga, gb, gc = g[:, 2], g[:, 3], g[:, 4]
    g_col = g[:, 5:8]
    g_op = g[:, 8]
    idx = proj.ids

    # conic -> 2D covariance: dL/dS = -K G_K K with K the conic matrix
    K = np.empty((m, 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = (proj.conics[:, 0], proj.conics[:, 1],
                                                      proj.conics[:, 1], proj.conics[:, 2])
    GK = np.empty((m, 2, 2))
    GK[:, 0, 0], GK[:, 0, 1], GK[:, 1, 0], GK[:, 1, 1] = ga, 0.5 * gb, 0.5 * gb, gc
    G2 = -K @ GK @ K

    t = proj.cam_points
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    W = cam.rotation
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / (tz * tz)
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / (tz * tz)
    T = J @ W
    R = proj.rotmats
    s_eff = proj.eff_scales
    M = R * s_eff[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)

    G3 = np.swapaxes(T, 1, 2) @ G2 @ T
    dT = 2.0 * G2 @ T @ cov3
    dJ = dT @ W.T

    gt = np.zeros((m, 3))
    gt[:, 0] = dJ[:, 0, 2] * (-fx / tz ** 2) + g_mean2d[:, 0] * fx / tz
    gt[:, 1] = dJ[:, 1, 2] * (-fy / tz ** 2) + g_mean2d[:, 1] * fy / tz
    gt[:, 2] = (dJ[:, 0, 0] * (-fx / tz ** 2) + dJ[:, 0, 2] * (2 * fx * tx / tz ** 3)
                + dJ[:, 1, 1] * (-fy / tz ** 2) + dJ[:, 1, 2] * (2 * fy * ty / tz ** 3)
                - g_mean2d[:, 0] * fx * tx / tz ** 2 - g_mean2d[:, 1] * fy * ty / tz ** 2)
    g_means = gt @ W

    # covariance -> rotation and effective scale
    dM = 2.0 * G3 @ M
    dR = dM * s_eff[:, None, :]
    g_seff = np.sum(dM * R, axis=1)
    s = np.exp(cloud.log_scales[idx])
    g_log_s = g_seff * proj.phi[:, None] * s
    if proj.gaussian_only:
        g_shape = np.zeros(m)
    else:
        g_phi = np.sum(g_seff * s, axis=1)
        g_shape = g_phi * shape_modulation_grad(cloud.shapes[idx], result.rho)
    g_q = _quat_grad(cloud.quats[idx], dR)

    # color -> SH coefficients and view direction
    g_raw = g_col * proj.color_mask
    g_dc = SH_C0 * g_raw
    g_rest = np.zeros((m, 3, 3))
    if st.sh_degree >= 1:
        d = proj.view_dirs
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        g_rest[:, 0] = -SH_C1 * y * g_raw
        g_rest[:, 1] = SH_C1 * z * g_raw
        g_rest[:, 2] = -SH_C1 * x * g_raw
        f = cloud.sh_rest[idx]
        g_dir = np.stack([
            -SH_C1 * np.sum(f[:, 2] * g_raw, axis=1),
            -SH_C1 * np.sum(f[:, 0] * g_raw, axis=1),
            SH_C1 * np.sum(f[:, 1] * g_raw, axis=1),
        ], axis=1)
        g_means += (g_dir - d * np.sum(g_dir * d, axis=1, keepdims=True)) / proj.view_dist[:, None]

    op = proj.opacities
    out.means[idx] = g_means
    out.quats[idx] = g_q
    out.log_scales[idx] = g_log_s
    out.opacity_logits[idx] = g_op * op * (1 - op)
    out.sh_dc[idx] = g_dc
    out.sh_rest[idx] = g_rest
    out.shapes[idx] = g_shape
    # image-space gradient in NDC-equivalent units (pixel gradient x half resolution)
    out.means2d_norm[idx] = np.hypot(g_mean2d[:, 0] * 0.5 * cam.width, g_mean2d[:, 1] * 0.5 * cam.height)
    out.visible[idx] = proj.radii > 0
    return out
