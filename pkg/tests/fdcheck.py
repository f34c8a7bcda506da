"""Central-difference gradient probes shared by the unit and acceptance suites."""
import numpy as np

from gesmesh.camera import Camera, look_at
from gesmesh.regularizer import gsr_losses, sample_points
from gesmesh.render import RasterSettings, render, render_backward
from gesmesh.scene import KnnIndex, SplatCloud

GROUPS = ("means", "quats", "log_scales", "opacity_logits", "sh_dc", "sh_rest", "shapes")
H = 1e-4
H_GSR = 1e-5  # the surface terms bend sharply near splat planes
RTOL = 1e-3
ATOL = 1e-6


def small_camera(width=24, height=20):
    return Camera(width, height, 30.0, 30.0, width / 2 + 0.3, height / 2 - 0.2,
                  look_at([0.2, -0.1, -4.0], [0.0, 0.0, 0.0], up=(0.0, -1.0, 0.0)))


def random_scene(rng, n=6):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return SplatCloud(
        means=rng.uniform(-0.8, 0.8, (n, 3)),
        quats=q,
        log_scales=np.log(rng.uniform(0.15, 0.5, (n, 3))),
        opacity_logits=rng.uniform(-1.0, 1.5, n),
        sh_dc=rng.uniform(-0.6, 0.6, (n, 3)),
        sh_rest=rng.uniform(-0.15, 0.15, (n, 3, 3)),
        shapes=rng.uniform(1.0, 5.0, n),
    )


def render_objective(camera, weights, rho=0.1):
    """Linear functional sum(W * image) under exact compositing."""
    settings = RasterSettings.exact()

    def f(cloud, with_grad=True):
        res = render(cloud, camera, rho=rho, settings=settings)
        val = float(np.sum(weights * res.image.rgb))
        return val, (render_backward(res, cloud, weights) if with_grad else None)
    return f


def gsr_objective(samples, w=(1.0, 0.1), floor=0.0):
    """w_sdf * L_sdf + w_nor * L_nor with the sample draws held fixed."""
    def f(cloud, with_grad=True):
        r = gsr_losses(cloud, samples, floor=floor, with_grad=with_grad, weights=w if with_grad else None)
        return w[0] * r.l_sdf + w[1] * r.l_nor, r.grads
    return f


def probe(f, cloud, group, index, h=H):
    """(analytic, numeric) derivative of ``f`` w.r.t. one stored parameter entry."""
    _, g = f(cloud)
    analytic = float(getattr(g, group)[index])
    vals = []
    for sgn in (1.0, -1.0):
        c = cloud.copy()
        getattr(c, group)[index] += sgn * h
        vals.append(f(c, with_grad=False)[0])
    return analytic, (vals[0] - vals[1]) / (2 * h)


def passes(analytic, numeric, rtol=RTOL, atol=ATOL):
    return abs(analytic - numeric) <= max(atol, rtol * max(abs(analytic), abs(numeric)))


def random_index(rng, cloud, group):
    shape = getattr(cloud, group).shape
    return tuple(int(rng.integers(s)) for s in shape)


def gsr_scene(rng, n=8):
    """Anisotropic splats (distinct smallest axis) with a fixed sample batch."""
    c = random_scene(rng, n)
    c.means *= 0.4
    s = np.sort(rng.uniform(0.05, 0.4, (n, 3)), axis=1)
    s[:, 0] *= 0.3
    c.log_scales = np.log(rng.permuted(s, axis=1))
    samples = sample_points(c, 40, rng, KnnIndex(c.means, k=16))
    return c, samples
