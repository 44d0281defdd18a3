import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarfield.field import VoxelGridField
from lidarfield.io import (FormatError, export_scan_ply, load_checkpoint, read_range_image, read_scan,
                           read_trajectory, save_checkpoint, write_range_image, write_range_preview, write_scan,
                           write_trajectory)
from lidarfield.plyio import read_ply
from lidarfield.types import LidarScan, ScanPattern

from helpers import pose_at, random_rotation


def random_scan(rng, rows=3, cols=5):
    pat = ScanPattern(cols, tuple(np.sort(rng.uniform(-0.4, 0.4, rows))), float(rng.uniform(0.1, 1)),
                      float(rng.uniform(50, 120)), azimuth_start=float(rng.uniform(-3, 0)),
                      azimuth_span=float(rng.uniform(0.1, 6.28)))
    from lidarfield.types import SensorPose
    s = LidarScan.empty(SensorPose(random_rotation(rng), rng.normal(size=3)), pat)
    shape = pat.shape
    s.drop[:] = rng.random(shape) < 0.3
    s.two_return[:] = ~s.drop & (rng.random(shape) < 0.4)
    s.first_range[:] = np.where(s.drop, np.nan, rng.uniform(1, 50, shape))
    s.first_intensity[:] = np.where(s.drop, np.nan, rng.random(shape))
    s.second_range[:] = np.where(s.two_return, s.first_range + rng.uniform(2, 20, shape), np.nan)
    s.second_intensity[:] = np.where(s.two_return, rng.random(shape), np.nan)
    return s


@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.integers(1, 9))
def test_scan_round_trip_bit_exact(seed, rows, cols):
    import os, tempfile
    s = random_scan(np.random.default_rng(seed), rows, cols)
    fd, path = tempfile.mkstemp(suffix=".nfl")
    os.close(fd)
    try:
        write_scan(path, s)
        back = read_scan(path)
    finally:
        os.unlink(path)
    assert back.equals(s)
    assert back.pose == s.pose
    assert back.pattern == s.pattern


def test_scan_file_validation(tmp_path, rng):
    s = random_scan(rng)
    p = tmp_path / "a.nfl"
    write_scan(p, s)
    data = p.read_bytes()
    (tmp_path / "bad.nfl").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        read_scan(tmp_path / "bad.nfl")
    (tmp_path / "short.nfl").write_bytes(data[:-3])
    with pytest.raises(FormatError, match="records"):
        read_scan(tmp_path / "short.nfl")
    with pytest.raises(FormatError):
        read_scan(tmp_path / "missing.nfl")


def test_range_image_64x1024(tmp_path):
    pat = ScanPattern(1024, tuple(np.linspace(-0.3, 0.1, 64)), 0.5, 80.0)
    s = LidarScan.empty(pose_at(), pat)
    s.drop[:] = False
    s.first_range[:] = 12.5
    s.drop[3, 7] = True
    s.first_range[3, 7] = np.nan
    write_range_image(tmp_path / "r.bin", s)
    img = read_range_image(tmp_path / "r.bin")
    assert img.shape == (64, 1024) and img.dtype == np.float32
    assert img[3, 7] == -1.0 and img[0, 0] == 12.5
    assert (tmp_path / "r.bin").stat().st_size == 16 + 4 * 64 * 1024
    write_range_preview(tmp_path / "r.png", img, 80.0)
    from PIL import Image
    assert Image.open(tmp_path / "r.png").size == (1024, 64)


def test_ply_export_is_consistent(tmp_path, rng):
    s = random_scan(rng)
    export_scan_ply(tmp_path / "p.ply", s)
    v = read_ply(tmp_path / "p.ply")["vertex"]
    n1, n2 = int((~s.drop).sum()), int(s.two_return.sum())
    assert len(v["x"]) == n1 + n2
    assert sorted(np.asarray(v["return_index"]).tolist()) == [1] * n1 + [2] * n2


def test_checkpoint_round_trip(tmp_path, rng):
    f = VoxelGridField(([-1, 0, 2], [3, 4, 5]), (3, 4, 5), params=rng.normal(size=(3, 3, 4, 5)))
    save_checkpoint(tmp_path / "c.ckpt", f, {"note": [1, 2]})
    g, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"note": [1, 2]}
    assert g.resolution == f.resolution
    np.testing.assert_array_equal(g.lo, f.lo)
    np.testing.assert_array_equal(g.params, f.params.astype(np.float32))
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_trajectory_round_trip(tmp_path, rng):
    poses = [pose_at(1, 2, 3, 30), pose_at(-1, 0, 0.5, -120)]
    write_trajectory(tmp_path / "t.json", poses)
    back = read_trajectory(tmp_path / "t.json")
    for a, b in zip(poses, back):
        np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-15)
        np.testing.assert_array_equal(a.translation, b.translation)
    (tmp_path / "bad.json").write_text('{"poses": [{"rotation": [[1, 0], [0, 1]]}]}')
    with pytest.raises(FormatError):
        read_trajectory(tmp_path / "bad.json")
    (tmp_path / "junk.json").write_text("{nope")
    with pytest.raises(FormatError, match="line 1"):
        read_trajectory(tmp_path / "junk.json")
