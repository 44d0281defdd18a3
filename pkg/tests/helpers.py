"""Small builders shared by the test modules."""

import numpy as np

from lidarfield.types import ScanPattern, SensorPose


def sector_pattern(cols=64, rows=8, half_az=0.2, half_el=0.1, min_range=0.5, max_range=60.0):
    """Forward-looking pattern centred on +x."""
    return ScanPattern(cols, tuple(np.linspace(-half_el, half_el, rows)), min_range, max_range,
                       azimuth_start=-half_az, azimuth_span=2 * half_az)


def pose_at(x=0.0, y=0.0, z=0.0, yaw_deg=0.0):
    return SensorPose.from_dict({"translation": [x, y, z], "yaw_deg": yaw_deg})


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
