import warnings

import numpy as np
import pytest

from fdcheck import random_scene
from gesmesh.camera import camera_from_fov, look_at
from gesmesh.kernel import SplatCore
from gesmesh.mesher import (MeshError, TriangleMesh, colorize_mesh, crossing_fraction, first_rising_crossing,
                            poisson_reconstruct, read_mesh_ply, read_obj, sample_level_set, write_mesh_ply,
                            write_obj)
from gesmesh.regularizer import DensityField
from gesmesh.scene import SplatCloud


def sphere_points(n=10_000, seed=0):
    p = np.random.default_rng(seed).standard_normal((n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return p, p.copy()


@pytest.fixture(scope="module")
def sphere_mesh():
    p, n = sphere_points()
    return poisson_reconstruct(p, n, resolution=64)


def test_crossing_fraction_example():
    assert crossing_fraction(0.1, 0.5, 0.3) == pytest.approx(0.5)
    assert crossing_fraction(0.3, 0.3, 0.3) == 0.0


def test_first_rising_crossing():
    dens = np.array([[0.0, 0.1, 0.4, 0.2, 0.6], [0.5, 0.4, 0.1, 0.0, 0.0], [0.0, 0.3, 0.3, 0.3, 0.3]])
    np.testing.assert_array_equal(first_rising_crossing(dens, 0.3), [1, -1, 0])


def test_flat_splat_level_set_lies_on_plane():
    cloud = SplatCloud.from_splats([SplatCore([0.0, 0.0, 0.0], scale=[0.5, 0.5, 0.002], opacity=1.0)])
    cam = camera_from_fov(64, 64, 40.0, look_at([0.0, 0.0, 2.5], [0, 0, 0]))
    pts = sample_level_set(cloud, [cam], alpha=0.3)
    # oblique rays can step over the thin shell, so only part of the pixels cross
    assert len(pts) > 50
    assert np.abs(pts.positions[:, 2]).max() <= 0.05 * 0.5
    cos = np.abs(pts.normals[:, 2])
    assert np.degrees(np.arccos(np.clip(cos.min(), -1, 1))) <= 5.0
    # oriented toward the camera
    assert np.all(pts.normals[:, 2] > 0)
    assert pts.residuals.max() <= 1e-2


def test_level_set_invariants_on_random_scene():
    rng = np.random.default_rng(1)
    cloud = random_scene(rng, 30)
    cloud.opacity_logits[:] = 3.0
    cams = [camera_from_fov(48, 48, 50.0, look_at(e, [0, 0, 0])) for e in ([0, 0, 3.0], [2.5, 0.5, 1.5])]
    pts = sample_level_set(cloud, cams, alpha=0.3, rng=rng)
    assert len(pts) > 0
    field = DensityField(cloud, k=16)
    d = field.density(pts.positions)
    assert np.abs(d - 0.3).max() <= 1e-2
    np.testing.assert_allclose(np.linalg.norm(pts.normals, axis=1), 1.0, atol=1e-12)
    g = field.evaluate(pts.positions)["grad_f"]
    u = g / np.linalg.norm(g, axis=1, keepdims=True)
    np.testing.assert_allclose(np.abs(np.sum(u * pts.normals, axis=1)), 1.0, atol=1e-6)
    rep = pts.report()
    assert rep["points"] == len(pts) and 0 < rep["coverage"] <= 1


def test_unreachable_level_gives_no_crossings():
    rng = np.random.default_rng(2)
    cloud = random_scene(rng, 20)
    cloud.opacity_logits[:] = 0.0  # alpha 0.5 each
    cloud.means *= 3.0
    cam = camera_from_fov(48, 48, 60.0, look_at([0, 0, 6.0], [0, 0, 0]))
    pts = sample_level_set(cloud, [cam], alpha=0.99, min_alpha=0.1)
    assert pts.rays > 0 and pts.coverage <= 0.01


def test_level_set_argument_checks():
    cloud = SplatCloud.from_splats([SplatCore(np.zeros(3))])
    cam = camera_from_fov(16, 16, 40.0, look_at([0, 0, 3.0], [0, 0, 0]))
    with pytest.raises(ValueError):
        sample_level_set(cloud, [cam], alpha=1.0)


def test_poisson_sphere(sphere_mesh):
    m = sphere_mesh
    assert m.is_watertight()
    v, e, f = len(m.vertices), len(m.boundary_edges()) + len(np.unique(np.sort(m._edges(), 1), axis=0)), len(m.faces)
    assert v - e + f == 2  # genus 0
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.abs(r - 1.0).max() < 0.05
    assert m.orientation == 1
    assert m.face_areas().min() > 0
    # vertex normals point outward
    assert np.all(np.sum(m.normals * m.vertices, axis=1) > 0)


def test_poisson_sphere_chamfer():
    p, n = sphere_points(seed=3)
    m = poisson_reconstruct(p, n, resolution=64)
    from gesmesh.synth import make_surface
    from gesmesh.mesher import chamfer_to_surface
    assert chamfer_to_surface(m, make_surface("sphere"), n=20_000) < 0.02


def test_poisson_disc_is_open():
    rng = np.random.default_rng(4)
    r = np.sqrt(rng.uniform(size=4000))
    t = rng.uniform(0, 2 * np.pi, 4000)
    p = np.column_stack([r * np.cos(t), r * np.sin(t), np.zeros(4000)])
    n = np.tile([0.0, 0.0, 1.0], (4000, 1))
    m = poisson_reconstruct(p, n, resolution=32)
    assert len(m.faces) > 0
    assert len(m.boundary_edges()) > 0 and not m.is_watertight()
    assert m.info["boundary_edges"] == len(m.boundary_edges())


def test_flipped_normals_invert_orientation(sphere_mesh):
    p, n = sphere_points()
    m = poisson_reconstruct(p, -n, resolution=64)
    assert m.orientation == -sphere_mesh.orientation
    np.testing.assert_allclose(np.sort(np.linalg.norm(m.vertices, axis=1)),
                               np.sort(np.linalg.norm(sphere_mesh.vertices, axis=1)), atol=1e-6)


def test_poisson_refuses_few_points():
    p, n = sphere_points(99)
    with pytest.raises(MeshError, match="100"):
        poisson_reconstruct(p, n, resolution=32)


def test_colorize_examples():
    red = SplatCloud.from_splats([SplatCore(c, scale=[0.2] * 3, color=[1, 0, 0]) for c in np.eye(3)])
    tri = TriangleMesh(np.array([[0.0, 0, 0], [0.5, 0.5, 0], [0.2, 0.1, 0.9]]), np.array([[0, 1, 2]]))
    np.testing.assert_allclose(colorize_mesh(tri, red).colors, [[1, 0, 0]] * 3, atol=1e-12)
    rb = SplatCloud.from_splats([SplatCore([-1.0, 0, 0], scale=[0.6] * 3, color=[1, 0, 0]),
                                 SplatCore([1.0, 0, 0], scale=[0.6] * 3, color=[0, 0, 1])])
    mid = TriangleMesh(np.array([[0.0, 0, 0], [0, 1, 0], [0, 0, 1]]), np.array([[0, 1, 2]]))
    np.testing.assert_allclose(colorize_mesh(mid, rb).colors[0], [0.5, 0, 0.5], atol=1e-12)


def test_colorize_is_convex_combination():
    rng = np.random.default_rng(5)
    cloud = random_scene(rng, 25)
    verts = rng.uniform(-0.8, 0.8, (60, 3))
    m = colorize_mesh(TriangleMesh(verts, np.arange(60).reshape(20, 3)), cloud)
    nn = DensityField(cloud, k=16).neighbors(verts)
    base = np.clip(cloud.base_colors, 0, 1)
    lo, hi = base[nn].min(axis=1), base[nn].max(axis=1)
    assert np.all(m.colors >= lo - 1e-12) and np.all(m.colors <= hi + 1e-12)


def test_obj_round_trip(tmp_path, sphere_mesh):
    write_obj(sphere_mesh, tmp_path / "m.obj")
    back = read_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.faces, sphere_mesh.faces)
    np.testing.assert_allclose(back.normals, sphere_mesh.normals, atol=1e-6)


def test_ply_round_trip_with_colors(tmp_path, sphere_mesh):
    rng = np.random.default_rng(6)
    m = TriangleMesh(sphere_mesh.vertices, sphere_mesh.faces, sphere_mesh.normals,
                     rng.integers(0, 256, (len(sphere_mesh.vertices), 3)) / 255.0)
    write_mesh_ply(m, tmp_path / "m.ply")
    back = read_mesh_ply(tmp_path / "m.ply")
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_allclose(back.colors, m.colors, atol=1e-12)
    with pytest.warns(UserWarning, match="colors"):
        write_obj(m, tmp_path / "m.obj")
    assert read_obj(tmp_path / "m.obj").colors is None


def test_empty_mesh_refused(tmp_path):
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(MeshError, match="empty mesh"):
        write_obj(empty, tmp_path / "e.obj")
    with pytest.raises(MeshError, match="empty mesh"):
        write_mesh_ply(empty, tmp_path / "e.ply")


def test_malformed_obj(tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0 0\nv 1 0 0\nf 1 2\n")
    with pytest.raises(MeshError, match="line 3"):
        read_obj(tmp_path / "bad.obj")
    (tmp_path / "oob.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(MeshError, match="out of range"):
        read_obj(tmp_path / "oob.obj")
