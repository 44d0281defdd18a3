import json
import subprocess
import sys

import numpy as np
import pytest

from lidarfield.cli import main
from lidarfield.io import read_range_image, read_scan


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def small_sensor(**kw):
    d = {"azimuth_count": 32, "elevation_deg": list(np.linspace(-10, 10, 4)), "min_range_m": 0.5,
         "max_range_m": 60.0, "subrays": 7}
    d.update(kw)
    return d


def traj(n):
    return {"poses": [{"translation": [0.3 * k, 0.0, 0.0], "yaw_deg": 10.0 * k} for k in range(n)]}


@pytest.fixture
def sim_inputs(tmp_path):
    return (write(tmp_path / "sensor.json", small_sensor()), write(tmp_path / "traj.json", traj(4)))


def test_simulate_one_file_per_pose(tmp_path, sim_inputs):
    sensor, tr = sim_inputs
    out = tmp_path / "scans"
    assert main(["simulate", "--scene", "builtin:box", "--sensor", sensor, "--trajectory", tr,
                 "--out", str(out)]) == 0
    files = sorted(out.glob("*.nfl"))
    assert len(files) == 4
    assert read_scan(files[0]).drop.sum() == 0
    side = json.loads((out / "resolved_config.json").read_text())
    assert side["command"] == "simulate" and len(side["trajectory"]) == 4


def test_missing_scene_leaves_nothing(tmp_path, sim_inputs):
    sensor, tr = sim_inputs
    out = tmp_path / "never"
    assert main(["simulate", "--scene", str(tmp_path / "nope.ply"), "--sensor", sensor, "--trajectory", tr,
                 "--out", str(out)]) == 2
    assert not out.exists()
    assert not list(tmp_path.glob(".stage-*"))


def test_usage_errors(tmp_path, sim_inputs):
    sensor, tr = sim_inputs
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--bogus"])
    assert exc.value.code == 1
    assert main(["simulate", "--scene", "builtin:box", "--trajectory", tr, "--out", str(tmp_path / "o")]) == 1
    assert main(["simulate", "--scene", "builtin:moon", "--sensor", sensor, "--trajectory", tr,
                 "--out", str(tmp_path / "o")]) == 1
    bad = write(tmp_path / "bad.json", {"train": {"no_such_key": 1}})
    assert main(["fit", "--scans", str(tmp_path), "--config", bad, "--out", str(tmp_path / "c")]) == 2  # no scans
    r = subprocess.run([sys.executable, "-m", "lidarfield.cli", "eval", "--out", "x"], capture_output=True)
    assert r.returncode == 1


def test_full_pattern_beam_count(tmp_path):
    sensor = write(tmp_path / "s.json", {"azimuth_count": 1024, "elevation_count": 64, "elevation_min_deg": -25,
                                         "elevation_max_deg": 15, "subrays": 1})
    tr = write(tmp_path / "t.json", traj(1))
    out = tmp_path / "scans"
    assert main(["simulate", "--scene", "builtin:box", "--sensor", sensor, "--trajectory", tr,
                 "--out", str(out)]) == 0
    f = next(out.glob("*.nfl"))
    s = read_scan(f)
    assert s.pattern.size == 65536 and s.first_range.shape == (64, 1024)
    ri = tmp_path / "r.bin"
    assert main(["range-image", "--scan", str(f), "--out", str(ri), "--preview", str(tmp_path / "r.png")]) == 0
    assert read_range_image(ri).shape == (64, 1024)


def test_eval_identity(tmp_path, sim_inputs):
    sensor, tr = sim_inputs
    out = tmp_path / "scans"
    main(["simulate", "--scene", "builtin:edge", "--sensor", sensor, "--trajectory", tr, "--out", str(out)])
    assert main(["eval", "--pred", str(out), "--gt", str(out), "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["range"]["mae_cm"] == 0.0 and rep["range"]["medae_cm"] == 0.0 and rep["range"]["chamfer_cm"] == 0.0
    assert rep["range"]["recall50"] == 100.0
    csv = (tmp_path / "ev" / "report.csv").read_text().splitlines()
    assert len(csv) == 2 and csv[1].startswith("scene,0")


def test_idempotent_and_sidecar_refeed(tmp_path, sim_inputs):
    sensor, tr = sim_inputs
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    args = ["simulate", "--scene", "builtin:edge", "--sensor", sensor, "--trajectory", tr]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b), "--threads", "2"]) == 0
    assert main(["simulate", "--config", str(a / "resolved_config.json"), "--out", str(c)]) == 0
    for f in sorted(a.glob("*")):
        assert f.read_bytes() == (b / f.name).read_bytes() == (c / f.name).read_bytes()

    cfg = write(tmp_path / "fit.json", {"train": {"iterations": 3, "batch_size": 64, "subrays": 7, "chunk": 32,
                                                  "render": {"n_coarse": 32, "n_fine": 8}},
                                         "field": {"voxel_size": 2.0}})
    k1, k2 = tmp_path / "k1.ckpt", tmp_path / "k2.ckpt"
    assert main(["fit", "--scans", str(a), "--config", cfg, "--out", str(k1), "--seed", "5"]) == 0
    assert main(["fit", "--scans", str(a), "--config", str(k1) + ".resolved.json", "--out", str(k2)]) == 0
    assert k1.read_bytes() == k2.read_bytes()
    assert (tmp_path / "k1.ckpt.json").read_bytes() == (tmp_path / "k2.ckpt.json").read_bytes()


def test_baseline_and_closed_loop_commands(tmp_path, sim_inputs):
    sensor, tr = sim_inputs
    scans = tmp_path / "scans"
    main(["simulate", "--scene", "builtin:box", "--sensor", sensor, "--trajectory", tr, "--out", str(scans)])
    assert main(["baseline", "--scans", str(scans), "--out", str(tmp_path / "bl")]) == 0
    assert (tmp_path / "bl" / "surfels.ply").exists() and len(list((tmp_path / "bl").glob("*.nfl"))) == 4
    assert main(["closed-loop", "--scans", str(scans), "--method", "surfel", "--shift", "0.2", "0.2", "0.1",
                 "--out", str(tmp_path / "cl")]) == 0
    rep = json.loads((tmp_path / "cl" / "report.json").read_text())
    assert rep["range"]["chamfer_cm"] is not None


@pytest.mark.slow
def test_wall_fit_render_eval(tmp_path):
    sensor = write(tmp_path / "s.json", {"azimuth_count": 64, "elevation_deg": list(np.linspace(-10, 10, 16)),
                                         "azimuth_start_deg": -12, "azimuth_span_deg": 24, "min_range_m": 0.5,
                                         "max_range_m": 60, "subrays": 7})
    tr = write(tmp_path / "t.json", {"poses": [{"translation": [0, y, z], "yaw_deg": 0}
                                               for y, z in ((-0.5, -0.08), (0, 0), (0.5, 0.08))]})
    cfg = write(tmp_path / "c.json", {
        "train": {"iterations": 800, "lr_start": 0.5, "lr_end": 0.05, "batch_size": 1024, "subrays": 7,
                  "two_return_supervision": False, "render": {"n_coarse": 128, "n_fine": 32}},
        "field": {"voxel_size": 0.1, "margin": 0.5, "two_return_mode": "none"}})
    gt = tmp_path / "gt"
    assert main(["simulate", "--scene", "builtin:wall", "--sensor", sensor, "--trajectory", tr, "--out", str(gt)]) == 0
    ck = tmp_path / "f.ckpt"
    assert main(["fit", "--scans", str(gt), "--config", cfg, "--out", str(ck)]) == 0
    pred = tmp_path / "pred"
    assert main(["render", "--checkpoint", str(ck), "--sensor", sensor, "--trajectory", tr, "--out", str(pred)]) == 0
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    print(f"wall CLI MedAE {rep['range']['medae_cm']:.3f} cm")
    assert rep["range"]["medae_cm"] < 5.0
