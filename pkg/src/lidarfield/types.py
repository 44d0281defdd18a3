"""Geometric and observational data model shared by every stage of the pipeline.

Conventions: right-handed, z-up sensor frame, azimuth counter-clockwise from +x,
range images stored elevation-major (row = elevation index, column = azimuth).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SensorPose:
    """Rigid sensor-to-world transform x_world = R @ x_sensor + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose must be finite")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SensorPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "SensorPose":
        c, s = math.cos(yaw), math.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(translation, dtype=np.float64))

    def compose(self, other: "SensorPose") -> "SensorPose":
        """Return self∘other, i.e. apply ``other`` first."""
        R = self.rotation @ other.rotation
        # re-orthonormalize to keep long chains inside the 1e-9 tolerance
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return SensorPose(R, self.rotation @ other.translation + self.translation)

    def shifted(self, offset) -> "SensorPose":
        return SensorPose(self.rotation, self.translation + np.asarray(offset, dtype=np.float64))

    def apply_points(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_directions(self, dirs) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorPose":
        t = d.get("translation", [0.0, 0.0, 0.0])
        if "rotation" in d:
            return cls(np.asarray(d["rotation"], dtype=np.float64), t)
        return cls.from_yaw(math.radians(float(d.get("yaw_deg", 0.0))), t)

    def __eq__(self, other):
        if not isinstance(other, SensorPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _frozen(self.origin, (3,))
        d = _frozen(self.direction, (3,))
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, zeta):
        return self.origin + np.multiply.outer(np.asarray(zeta, dtype=np.float64), self.direction)


@dataclass(frozen=True)
class ScanPattern:
    azimuth_count: int
    elevation_angles: tuple
    min_range: float = 0.5
    max_range: float = 100.0
    frequency: float = 10.0
    # azimuth of column j is azimuth_start + azimuth_span * j / azimuth_count (full turn by default)
    azimuth_start: float = 0.0
    azimuth_span: float = 2.0 * math.pi

    def __post_init__(self):
        if not 0.0 < self.azimuth_span <= 2.0 * math.pi + 1e-12:
            raise ValueError("azimuth_span must be in (0, 2π]")
        elev = tuple(float(e) for e in self.elevation_angles)
        object.__setattr__(self, "elevation_angles", elev)
        if int(self.azimuth_count) != self.azimuth_count or self.azimuth_count < 1:
            raise ValueError("azimuth_count must be a positive integer")
        object.__setattr__(self, "azimuth_count", int(self.azimuth_count))
        if len(elev) == 0 or any(b <= a for a, b in zip(elev, elev[1:])):
            raise ValueError("elevation_angles must be non-empty and strictly increasing")
        if not (0.0 < self.min_range < self.max_range):
            raise ValueError("require 0 < min_range < max_range")

    @property
    def shape(self) -> tuple:
        return (len(self.elevation_angles), self.azimuth_count)

    @property
    def size(self) -> int:
        return len(self.elevation_angles) * self.azimuth_count

    def local_directions(self) -> np.ndarray:
        """Unit beam directions in the sensor frame, shape (rows, cols, 3)."""
        e = np.asarray(self.elevation_angles)[:, None]
        a = (self.azimuth_start + self.azimuth_span * np.arange(self.azimuth_count) / self.azimuth_count)[None, :]
        d = np.stack(
            [np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.broadcast_to(np.sin(e), (e.shape[0], a.shape[1]))],
            axis=-1,
        )
        return d

    def to_dict(self) -> dict:
        return {
            "azimuth_count": self.azimuth_count,
            "elevation_deg": [math.degrees(e) for e in self.elevation_angles],
            "min_range_m": self.min_range,
            "max_range_m": self.max_range,
            "frequency_hz": self.frequency,
            "azimuth_start_deg": math.degrees(self.azimuth_start),
            "azimuth_span_deg": math.degrees(self.azimuth_span),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanPattern":
        if "elevation_deg" in d:
            elev = [math.radians(float(x)) for x in d["elevation_deg"]]
        elif "elevation_count" in d:
            n = int(d["elevation_count"])
            lo, hi = float(d["elevation_min_deg"]), float(d["elevation_max_deg"])
            elev = [math.radians(x) for x in (np.linspace(lo, hi, n) if n > 1 else [lo])]
        else:
            raise ValueError("scan pattern needs 'elevation_deg' or 'elevation_count'")
        return cls(
            azimuth_count=int(d["azimuth_count"]),
            elevation_angles=tuple(elev),
            min_range=float(d.get("min_range_m", 0.5)),
            max_range=float(d.get("max_range_m", 100.0)),
            frequency=float(d.get("frequency_hz", 10.0)),
            azimuth_start=math.radians(float(d.get("azimuth_start_deg", 0.0))),
            azimuth_span=math.radians(float(d.get("azimuth_span_deg", 360.0))),
        )


@dataclass(frozen=True)
class RayObservation:
    """One beam's measurement (first return, drop flag, two-return flag, second return)."""

    first_range: Optional[float] = None
    first_intensity: Optional[float] = None
    drop: bool = True
    two_return: bool = False
    second_range: Optional[float] = None
    second_intensity: Optional[float] = None

    def __post_init__(self):
        if self.drop:
            if any(v is not None for v in (self.first_range, self.first_intensity, self.second_range,
                                           self.second_intensity)) or self.two_return:
                raise ValueError("dropped observation must carry no returns")
            return
        if self.first_range is None or self.first_intensity is None:
            raise ValueError("non-dropped observation needs a first return")
        if not 0.0 <= self.first_intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")
        if self.two_return:
            if self.second_range is None or self.second_intensity is None:
                raise ValueError("two-return observation needs a second return")
            if not self.second_range > self.first_range:
                raise ValueError("second return must lie beyond the first")
            if not 0.0 <= self.second_intensity <= 1.0:
                raise ValueError("intensity must lie in [0, 1]")
        elif self.second_range is not None or self.second_intensity is not None:
            raise ValueError("single-return observation must not carry a second return")

    def check_separation(self, min_separation: float) -> bool:
        return not self.two_return or self.second_range > self.first_range + min_separation

    @classmethod
    def dropped(cls) -> "RayObservation":
        return cls()


def _opt(x) -> Optional[float]:
    return None if not np.isfinite(x) else float(x)


@dataclass(eq=False)
class LidarScan:
    """A posed scan stored as elevation-major arrays of shape ``pattern.shape``.

    Absent ranges and intensities are NaN; ``drop`` and ``two_return`` are bool grids.
    """

    pose: SensorPose
    pattern: ScanPattern
    first_range: np.ndarray
    first_intensity: np.ndarray
    drop: np.ndarray
    two_return: np.ndarray
    second_range: np.ndarray
    second_intensity: np.ndarray

    def __post_init__(self):
        shape = self.pattern.shape
        for name in ("first_range", "first_intensity", "second_range", "second_intensity"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, pattern needs {shape}")
            setattr(self, name, arr)
        for name in ("drop", "two_return"):
            arr = np.asarray(getattr(self, name), dtype=bool)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, pattern needs {shape}")
            setattr(self, name, arr)

    @classmethod
    def empty(cls, pose: SensorPose, pattern: ScanPattern) -> "LidarScan":
        shape = pattern.shape
        nan = np.full(shape, np.nan)
        return cls(pose, pattern, nan.copy(), nan.copy(), np.ones(shape, bool), np.zeros(shape, bool),
                   nan.copy(), nan.copy())

    @classmethod
    def from_observations(cls, pose, pattern, observations: Sequence[Sequence[RayObservation]]):
        scan = cls.empty(pose, pattern)
        for i, row in enumerate(observations):
            for j, obs in enumerate(row):
                scan.set(i, j, obs)
        return scan

    def set(self, i: int, j: int, obs: RayObservation) -> None:
        nan = np.nan
        self.drop[i, j] = obs.drop
        self.two_return[i, j] = obs.two_return
        self.first_range[i, j] = nan if obs.first_range is None else obs.first_range
        self.first_intensity[i, j] = nan if obs.first_intensity is None else obs.first_intensity
        self.second_range[i, j] = nan if obs.second_range is None else obs.second_range
        self.second_intensity[i, j] = nan if obs.second_intensity is None else obs.second_intensity

    def observation(self, i: int, j: int) -> RayObservation:
        return RayObservation(
            _opt(self.first_range[i, j]), _opt(self.first_intensity[i, j]), bool(self.drop[i, j]),
            bool(self.two_return[i, j]), _opt(self.second_range[i, j]), _opt(self.second_intensity[i, j]),
        )

    def world_directions(self) -> np.ndarray:
        return self.pose.apply_directions(self.pattern.local_directions())

    def points(self, which: str = "first", frame: str = "sensor") -> np.ndarray:
        """Return points of valid returns, (K, 3), in the sensor or world frame."""
        r = self.first_range if which == "first" else self.second_range
        valid = ~self.drop & np.isfinite(r)
        d = self.pattern.local_directions()[valid]
        pts = d * r[valid][:, None]
        return self.pose.apply_points(pts) if frame == "world" else pts

    def equals(self, other: "LidarScan") -> bool:
        """Bitwise equality (NaN == NaN)."""
        if self.pose != other.pose or self.pattern != other.pattern:
            return False
        for name in ("first_range", "first_intensity", "second_range", "second_intensity"):
            a, b = getattr(self, name), getattr(other, name)
            if a.tobytes() != b.tobytes():
                return False
        return np.array_equal(self.drop, other.drop) and np.array_equal(self.two_return, other.two_return)


def transform_ray(pose: SensorPose, local: Ray) -> Ray:
    """Map a sensor-frame ray into the world frame."""
    d = pose.rotation @ local.direction
    d = d / np.linalg.norm(d)
    return Ray(pose.rotation @ local.origin + pose.translation, d)


def scan_ray_arrays(pattern: ScanPattern, pose: SensorPose) -> tuple[np.ndarray, np.ndarray]:
    """World-frame beam origins and directions, each (rows*cols, 3), elevation-major."""
    d = pose.apply_directions(pattern.local_directions().reshape(-1, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return o, d


def generate_scan_rays(pattern: ScanPattern, pose: SensorPose) -> list[Ray]:
    o, d = scan_ray_arrays(pattern, pose)
    return [Ray(oi, di) for oi, di in zip(o, d)]


def poses_from_json(items: Iterable[dict]) -> list[SensorPose]:
    return [SensorPose.from_dict(p) for p in items]
