import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarfield.types import (LidarScan, Ray, RayObservation, ScanPattern, SensorPose, generate_scan_rays,
                              poses_from_json, scan_ray_arrays, transform_ray)

from helpers import random_rotation


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        SensorPose(np.diag([1.0, 1.0, 1.1]), np.zeros(3))
    with pytest.raises(ValueError):
        SensorPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # reflection


def test_ray_rejects_non_unit_direction():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))


@pytest.mark.parametrize("bad", [
    dict(azimuth_count=0, elevation_angles=(0.0,)),
    dict(azimuth_count=4, elevation_angles=(0.1, 0.0)),
    dict(azimuth_count=4, elevation_angles=(0.0,), min_range=5.0, max_range=1.0),
    dict(azimuth_count=4, elevation_angles=()),
])
def test_scan_pattern_validation(bad):
    with pytest.raises(ValueError):
        ScanPattern(**bad)


def test_uniform_azimuth_grid_directions():
    rays = generate_scan_rays(ScanPattern(4, (0.0,)), SensorPose.identity())
    got = np.array([r.direction for r in rays])
    np.testing.assert_allclose(got, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], atol=1e-15)


def test_pole_direction():
    (ray,) = generate_scan_rays(ScanPattern(1, (math.pi / 2,)), SensorPose.identity())
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-15)


def test_yawed_pose_rotates_forward_beam():
    (ray,) = generate_scan_rays(ScanPattern(1, (0.0,)), SensorPose.from_yaw(math.pi / 2))
    np.testing.assert_allclose(ray.direction, [0, 1, 0], atol=1e-15)


def test_elevation_major_order():
    pat = ScanPattern(3, (-0.1, 0.0, 0.2))
    o, d = scan_ray_arrays(pat, SensorPose.identity())
    local = pat.local_directions()
    for i in range(3):
        for j in range(3):
            np.testing.assert_allclose(d[i * 3 + j], local[i, j], atol=1e-15)
    assert np.allclose(np.arcsin(d[::3, 2]), [-0.1, 0.0, 0.2])


def test_transform_ray_examples():
    r = Ray(np.array([0.5, -1.0, 2.0]), np.array([0.0, 0.6, 0.8]))
    same = transform_ray(SensorPose.identity(), r)
    assert np.array_equal(same.origin, r.origin) and np.array_equal(same.direction, r.direction)
    moved = transform_ray(SensorPose(np.eye(3), np.array([1.0, 0, 0])), Ray(np.zeros(3), np.array([0, 0, 1.0])))
    np.testing.assert_allclose(moved.origin, [1, 0, 0])
    flipped = transform_ray(SensorPose.from_yaw(math.pi), Ray(np.zeros(3), np.array([1.0, 0, 0])))
    np.testing.assert_allclose(flipped.direction, [-1, 0, 0], atol=1e-15)


@given(st.integers(1, 50), st.lists(st.floats(-1.5, 1.5), min_size=1, max_size=12, unique=True),
       st.integers(0, 2 ** 31))
def test_scan_ray_count_and_unit_norm(cols, elev, seed):
    pat = ScanPattern(cols, tuple(sorted(elev)))
    pose = SensorPose(random_rotation(np.random.default_rng(seed)), np.ones(3))
    rays = generate_scan_rays(pat, pose)
    assert len(rays) == cols * len(elev)
    norms = np.linalg.norm([r.direction for r in rays], axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-12


@given(st.integers(0, 2 ** 31))
def test_transform_ray_composes(seed):
    rng = np.random.default_rng(seed)
    p1 = SensorPose(random_rotation(rng), rng.normal(size=3))
    p2 = SensorPose(random_rotation(rng), rng.normal(size=3))
    d = rng.normal(size=3)
    r = Ray(rng.normal(size=3), d / np.linalg.norm(d))
    a = transform_ray(p2, transform_ray(p1, r))
    b = transform_ray(p2.compose(p1), r)
    assert abs(np.linalg.norm(a.direction) - 1.0) < 1e-12
    np.testing.assert_allclose(a.origin, b.origin, atol=1e-9)
    np.testing.assert_allclose(a.direction, b.direction, atol=1e-9)


def test_pose_and_pattern_dict_round_trip():
    p = SensorPose.from_yaw(0.3, (1.0, 2.0, 3.0))
    assert SensorPose.from_dict(p.to_dict()) == p
    assert poses_from_json([p.to_dict()])[0] == p
    pat = ScanPattern(16, (-0.2, 0.0, 0.3), 1.0, 80.0, azimuth_start=-0.5, azimuth_span=1.0)
    back = ScanPattern.from_dict(pat.to_dict())
    assert back.shape == pat.shape
    np.testing.assert_allclose(back.local_directions(), pat.local_directions(), atol=1e-14)


def test_observation_invariants():
    with pytest.raises(ValueError):
        RayObservation(10.0, 0.5, drop=True)
    with pytest.raises(ValueError):
        RayObservation(10.0, 1.5, drop=False)
    with pytest.raises(ValueError):
        RayObservation(10.0, 0.5, False, True, 9.0, 0.2)
    obs = RayObservation(10.0, 0.5, False, True, 13.0, 0.2)
    assert obs.check_separation(2.0) and not obs.check_separation(3.5)
    assert RayObservation.dropped().drop


def test_scan_grid_round_trip():
    pat = ScanPattern(3, (0.0, 0.1))
    obs = [[RayObservation.dropped(), RayObservation(5.0, 0.3, False), RayObservation(4.0, 0.1, False, True, 9.0, 0.05)],
           [RayObservation(7.0, 1.0, False), RayObservation.dropped(), RayObservation.dropped()]]
    scan = LidarScan.from_observations(SensorPose.identity(), pat, obs)
    for i in range(2):
        for j in range(3):
            assert scan.observation(i, j) == obs[i][j]
    assert len(scan.points("first")) == 3 and len(scan.points("second")) == 1
    with pytest.raises(ValueError):
        LidarScan(SensorPose.identity(), pat, *(np.zeros((3, 2)),) * 6)
