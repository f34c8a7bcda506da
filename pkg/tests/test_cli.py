import json
import hashlib

import numpy as np
import pytest

from gesmesh.cli import EXIT_DIVERGED, EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_USAGE, evaluate_dirs, main
from gesmesh.config import ConfigError, RunConfig
from gesmesh.imageio import read_image, write_pfm, write_png


def digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def plane_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("plane")
    assert main(["synth", "--shape", "plane", "--views", "4", "--resolution", "32", "--seed", "1",
                 "--out", str(d)]) == EXIT_OK
    return d


def test_synth_writes_dataset(tmp_path):
    assert main(["synth", "--shape", "sphere", "--views", "10", "--resolution", "32", "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "cameras.json").read_text())
    assert len(meta["frames"]) == 10 and len(list((tmp_path / "images").glob("train_*.png"))) == 10
    assert json.loads((tmp_path / "surface.json").read_text())["kind"] == "sphere"
    assert (tmp_path / "points.ply").exists()


def test_synth_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["synth", "--shape", "two-box", "--views", "3", "--resolution", "24", "--seed", "5",
                     "--out", str(tmp_path / sub)]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_synth_refusals(tmp_path):
    assert main(["synth", "--shape", "plane", "--views", "1", "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["synth", "--shape", "torus", "--out", str(tmp_path)]) == EXIT_INVALID


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["synth", "--shape", "plane", "--views", "many", "--out", "x"]) == EXIT_USAGE


def test_train_no_drt_and_outputs(plane_data, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--data", str(plane_data), "--iterations", "120", "--no-drt", "--out", str(out)])
    assert rc == EXIT_OK
    for name in ("final.ply", "metrics.csv", "config.json", "summary.json", "snapshot_photometric.ply"):
        assert (out / name).exists(), name
    lines = (out / "metrics.csv").read_text().splitlines()
    col = lines[0].split(",").index("resolution_factor")
    assert {ln.split(",")[col] for ln in lines[1:]} == {"1.0"}
    cfg = RunConfig.load(out / "config.json")
    assert cfg.drt is False and cfg.iterations == 120


def test_train_rejects_corrupt_image(plane_data, tmp_path):
    import shutil
    d = tmp_path / "data"
    shutil.copytree(plane_data, d)
    (d / "images" / "train_002.png").write_bytes(b"\x89PNG garbage")
    out = tmp_path / "run"
    assert main(["train", "--data", str(d), "--iterations", "10", "--out", str(out)]) == EXIT_INVALID
    assert not (out / "metrics.csv").exists()


def test_train_divergence_exit_code(plane_data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lr_position": 1e12, "lr_scale": 1e6}))
    rc = main(["train", "--data", str(plane_data), "--iterations", "40", "--config", str(cfg),
               "--out", str(tmp_path / "run")])
    assert rc == EXIT_DIVERGED


def test_config_errors(tmp_path, plane_data):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["train", "--data", str(plane_data), "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    with pytest.raises(ConfigError):
        RunConfig(level_alpha=1.5)
    with pytest.raises(ConfigError):
        RunConfig(iterations=100, photometric_iterations=50)
    c = RunConfig(iterations=15000)
    assert c.schedule().photometric == 7000 and c.train_config().rho == 0.1


def test_missing_dataset_is_io_or_validation(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == EXIT_INVALID
    assert main(["render", "--checkpoint", str(tmp_path / "none.ply"), "--cameras", str(tmp_path),
                 "--out", str(tmp_path / "r")]) == EXIT_IO


def test_render_and_extract(plane_data, tmp_path):
    run = tmp_path / "run"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gsr_prune_opacity": 0.0}))  # short runs never reach opacity 0.5
    assert main(["train", "--data", str(plane_data), "--iterations", "100", "--config", str(cfg),
                 "--out", str(run)]) == 0
    rend = tmp_path / "rend"
    assert main(["render", "--checkpoint", str(run / "final.ply"), "--cameras", str(plane_data),
                 "--out", str(rend)]) == 0
    assert len(list(rend.glob("*.png"))) == 4 and len(list(rend.glob("*.pfm"))) == 4
    mesh = tmp_path / "mesh"
    rc = main(["extract-mesh", "--checkpoint", str(run / "final.ply"), "--cameras", str(plane_data),
               "--grid", "32", "--out", str(mesh)])
    assert rc == EXIT_OK
    rep = json.loads((mesh / "report.json").read_text())
    assert {"coverage", "residual_max", "chamfer", "watertight"} <= set(rep)
    assert rep["residual_max"] <= 1e-2
    assert (mesh / "mesh.obj").exists() and (mesh / "mesh.ply").exists()


def test_extract_without_surface(plane_data, tmp_path, capsys):
    from fdcheck import random_scene
    from gesmesh.scene import save_ply
    cloud = random_scene(np.random.default_rng(3), 20)
    cloud.means[:, 2] *= 0.1
    cloud.opacity_logits[:] = -1.5  # alpha 0.18 each; overlaps stay far below 0.99
    cloud.means[:, :2] *= 2.0
    (tmp_path / "c.ply").write_bytes(save_ply(cloud))
    rc = main(["extract-mesh", "--checkpoint", str(tmp_path / "c.ply"), "--cameras", str(plane_data),
               "--alpha", "0.99", "--out", str(tmp_path / "mesh")])
    assert rc == EXIT_INVALID
    assert "no surface at level" in capsys.readouterr().err


def disc_sphere(n=1500):
    """Opaque thin discs tangent to the unit sphere on a Fibonacci lattice."""
    from gesmesh.kernel import rotmat_to_quat
    from gesmesh.scene import SplatCloud
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    nrm = np.stack([np.sqrt(1 - z * z) * np.cos(phi), np.sqrt(1 - z * z) * np.sin(phi), z], 1)
    a = np.cross(nrm, [0.3, 0.5, 0.8])
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    R = np.stack([a, np.cross(nrm, a), nrm], axis=2)
    return SplatCloud(means=nrm.copy(), quats=np.array([rotmat_to_quat(r) for r in R]),
                      log_scales=np.log(np.tile([0.06, 0.06, 0.004], (n, 1))), opacity_logits=np.full(n, 4.0),
                      sh_dc=np.zeros((n, 3)), sh_rest=np.zeros((n, 3, 3)), shapes=np.full(n, 2.0))


@pytest.mark.slow
def test_extract_sphere_checkpoint(tmp_path):
    from gesmesh.scene import save_ply
    data = tmp_path / "data"
    assert main(["synth", "--shape", "sphere", "--views", "10", "--resolution", "32", "--out", str(data)]) == 0
    (tmp_path / "s.ply").write_bytes(save_ply(disc_sphere()))
    reps = {}
    for grid in (32, 128):
        out = tmp_path / f"m{grid}"
        assert main(["extract-mesh", "--checkpoint", str(tmp_path / "s.ply"), "--cameras", str(data),
                     "--grid", str(grid), "--out", str(out)]) == EXIT_OK
        reps[grid] = json.loads((out / "report.json").read_text())
    for rep in reps.values():
        assert rep["watertight"] and rep["orientation"] == 1
        assert rep["chamfer_relative"] < 0.02
    # a tie is anything within the sampling noise of the Chamfer estimate
    assert reps[128]["chamfer"] <= reps[32]["chamfer"] + 1e-3


# ---------------------------------------------------------------- eval


def scalar_ssim(x, y):
    """Per-pixel windowed SSIM with symmetric padding, written without matrix operators."""
    r = 5
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / 1.5) ** 2)
    k /= k.sum()
    w2 = np.outer(k, k)
    xp = np.pad(x, ((r, r), (r, r), (0, 0)), mode="symmetric")
    yp = np.pad(y, ((r, r), (r, r), (0, 0)), mode="symmetric")
    H, W, C = x.shape
    total = 0.0
    for c in range(C):
        for i in range(H):
            for j in range(W):
                a, b = xp[i:i + 11, j:j + 11, c], yp[i:i + 11, j:j + 11, c]
                mx, my = np.sum(w2 * a), np.sum(w2 * b)
                vx = np.sum(w2 * a * a) - mx * mx
                vy = np.sum(w2 * b * b) - my * my
                cxy = np.sum(w2 * a * b) - mx * my
                total += ((2 * mx * my + 1e-4) * (2 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4))
    return total / (H * W * C)


def _dirs(tmp_path, pairs, ext="pfm"):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(exist_ok=True)
    b.mkdir(exist_ok=True)
    w = write_pfm if ext == "pfm" else write_png
    for i, (x, y) in enumerate(pairs):
        w(a / f"v{i}.{ext}", x)
        w(b / f"v{i}.{ext}", y)
    return a, b


def test_eval_identical_and_closed_form(tmp_path):
    x = np.random.default_rng(0).uniform(size=(12, 12, 3))
    a, b = _dirs(tmp_path, [(x, x), (np.full((12, 12, 3), 0.5), np.zeros((12, 12, 3)))])
    res = evaluate_dirs(a, b)
    assert res["images"]["v0"]["psnr"] == 100.0 and res["images"]["v0"]["ssim"] == pytest.approx(1.0)
    assert res["images"]["v1"]["psnr"] == pytest.approx(20 * np.log10(2.0), abs=1e-9)
    assert main(["eval", "--rendered", str(a), "--gt", str(b), "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["mean_psnr"] == pytest.approx(res["mean_psnr"])


def test_eval_matches_scalar_oracle_and_is_symmetric(tmp_path):
    rng = np.random.default_rng(1)
    pairs = []
    for _ in range(5):
        x = rng.uniform(size=(14, 13, 3))
        pairs.append((x, np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)))
    a, b = _dirs(tmp_path, pairs)
    res, swapped = evaluate_dirs(a, b), evaluate_dirs(b, a)
    for i, (x, y) in enumerate(pairs):
        x, y = read_image(a / f"v{i}.pfm"), read_image(b / f"v{i}.pfm")
        r = res["images"][f"v{i}"]
        assert r["psnr"] == pytest.approx(10 * np.log10(1 / np.mean((x - y) ** 2)), abs=1e-6)
        assert r["ssim"] == pytest.approx(scalar_ssim(x, y), abs=1e-6)
        assert swapped["images"][f"v{i}"]["psnr"] == pytest.approx(r["psnr"], abs=1e-12)
        assert swapped["images"][f"v{i}"]["ssim"] == pytest.approx(r["ssim"], abs=1e-12)


def test_eval_errors(tmp_path):
    a, b = _dirs(tmp_path, [(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)))])
    assert main(["eval", "--rendered", str(a), "--gt", str(b)]) == EXIT_INVALID
    (tmp_path / "e1").mkdir()
    (tmp_path / "e2").mkdir()
    assert main(["eval", "--rendered", str(tmp_path / "e1"), "--gt", str(tmp_path / "e2")]) == EXIT_INVALID
    for d in (a, b):
        (d / "v0.pfm").unlink()
        (d / "v0.png").write_bytes(b"not an image")
    assert main(["eval", "--rendered", str(a), "--gt", str(b)]) == EXIT_INVALID
