"""File formats: native scan files, range images, field checkpoints, JSON configs, trajectories."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .field import VoxelGridField
from .plyio import write_ply
from .types import LidarScan, ScanPattern, SensorPose

SCAN_MAGIC = b"NFLS"
SCAN_VERSION = 1
RANGE_IMAGE_MAGIC = b"NFLR"
CHECKPOINT_MAGIC = b"NFLC"
CHECKPOINT_VERSION = 1

_RECORD = np.dtype([
    ("first_range", "<f8"), ("first_intensity", "<f8"), ("second_range", "<f8"), ("second_intensity", "<f8"),
    ("drop", "u1"), ("two_return", "u1"),
])


class FormatError(ValueError):
    """Raised for malformed or mismatched files."""


@contextmanager
def atomic_write(path):
    """Yield a temporary path next to ``path``; it replaces ``path`` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_scan(path, scan: LidarScan) -> None:
    header = json.dumps({"pattern": _pattern_exact(scan.pattern), "pose": _pose_exact(scan.pose)},
                        sort_keys=True).encode("utf-8")
    rec = np.empty(scan.pattern.size, dtype=_RECORD)
    for name in ("first_range", "first_intensity", "second_range", "second_intensity"):
        rec[name] = getattr(scan, name).ravel()
    rec["drop"] = scan.drop.ravel()
    rec["two_return"] = scan.two_return.ravel()
    with atomic_write(path) as tmp, open(tmp, "wb") as fh:
        fh.write(SCAN_MAGIC + struct.pack("<II", SCAN_VERSION, len(header)))
        fh.write(header)
        fh.write(rec.tobytes())


def read_scan(path) -> LidarScan:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    if len(data) < 12 or data[:4] != SCAN_MAGIC:
        raise FormatError(f"{path}: not a scan file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != SCAN_VERSION:
        raise FormatError(f"{path}: unsupported scan file version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        pattern = _pattern_from_exact(header["pattern"])
        pose = _pose_from_exact(header["pose"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc
    body = data[12 + hlen:]
    if len(body) != pattern.size * _RECORD.itemsize:
        raise FormatError(f"{path}: expected {pattern.size} records, file holds {len(body) / _RECORD.itemsize:g}")
    rec = np.frombuffer(body, dtype=_RECORD)
    shape = pattern.shape
    return LidarScan(pose, pattern, rec["first_range"].reshape(shape).copy(),
                     rec["first_intensity"].reshape(shape).copy(), rec["drop"].reshape(shape).astype(bool),
                     rec["two_return"].reshape(shape).astype(bool), rec["second_range"].reshape(shape).copy(),
                     rec["second_intensity"].reshape(shape).copy())


# float.hex keeps the header exact, so read(write(x)) reproduces every bit
def _hex(a):
    return [float(x).hex() for x in np.asarray(a, dtype=np.float64).ravel()]


def _unhex(v):
    return np.array([float.fromhex(x) for x in v])


def _pattern_exact(p: ScanPattern) -> dict:
    return {"azimuth_count": p.azimuth_count, "elevation": _hex(p.elevation_angles), "min_range": _hex([p.min_range]),
            "max_range": _hex([p.max_range]), "frequency": _hex([p.frequency]),
            "azimuth_start": _hex([p.azimuth_start]), "azimuth_span": _hex([p.azimuth_span])}


def _pattern_from_exact(d) -> ScanPattern:
    return ScanPattern(int(d["azimuth_count"]), tuple(_unhex(d["elevation"])), float(_unhex(d["min_range"])[0]),
                       float(_unhex(d["max_range"])[0]), float(_unhex(d["frequency"])[0]),
                       float(_unhex(d["azimuth_start"])[0]), float(_unhex(d["azimuth_span"])[0]))


def _pose_exact(p: SensorPose) -> dict:
    return {"rotation": _hex(p.rotation), "translation": _hex(p.translation)}


def _pose_from_exact(d) -> SensorPose:
    return SensorPose(_unhex(d["rotation"]).reshape(3, 3), _unhex(d["translation"]))


def export_scan_ply(path, scan: LidarScan, frame: str = "world") -> None:
    """Point export with intensity, return_index (1 or 2) and drop. Dropped beams and waveform
    details are not representable, so this is lossy."""
    pts, inten, ret = [], [], []
    for k, which in ((1, "first"), (2, "second")):
        r = scan.first_range if k == 1 else scan.second_range
        e = scan.first_intensity if k == 1 else scan.second_intensity
        valid = ~scan.drop & np.isfinite(r)
        pts.append(scan.points(which, frame))
        inten.append(e[valid])
        ret.append(np.full(int(valid.sum()), k, dtype=np.uint8))
    p = np.concatenate(pts)
    with atomic_write(path) as tmp:
        write_ply(tmp, {"vertex": {"x": p[:, 0].astype("<f4"), "y": p[:, 1].astype("<f4"), "z": p[:, 2].astype("<f4"),
                                   "intensity": np.nan_to_num(np.concatenate(inten)).astype("<f4"),
                                   "return_index": np.concatenate(ret),
                                   "drop": np.zeros(len(p), dtype=np.uint8)}},
                  comments=("lossy export of a native scan file",))


def write_range_image(path, scan: LidarScan) -> np.ndarray:
    """Row-major float32 first ranges, −1 for dropped beams, behind a 16-byte header."""
    img = np.where(scan.drop | ~np.isfinite(scan.first_range), -1.0, scan.first_range).astype("<f4")
    rows, cols = img.shape
    with atomic_write(path) as tmp, open(tmp, "wb") as fh:
        fh.write(RANGE_IMAGE_MAGIC + struct.pack("<III", rows, cols, 0))
        fh.write(img.tobytes())
    return img


def read_range_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RANGE_IMAGE_MAGIC:
        raise FormatError(f"{path}: not a range image")
    rows, cols, _ = struct.unpack("<III", data[4:16])
    if len(data) != 16 + 4 * rows * cols:
        raise FormatError(f"{path}: truncated range image")
    return np.frombuffer(data[16:], dtype="<f4").reshape(rows, cols).copy()


def write_range_preview(path, img: np.ndarray, max_range: float | None = None) -> None:
    """Grayscale PNG: near is bright, far is dark, dropped beams black."""
    from PIL import Image

    valid = img > 0
    top = max_range or (float(img[valid].max()) if valid.any() else 1.0)
    g = np.where(valid, 255.0 * (1.0 - np.clip(img / top, 0.0, 1.0)) * 0.9 + 25.0, 0.0)
    g = g[::-1]  # highest elevation row on top
    with atomic_write(path) as tmp:
        Image.fromarray(g.astype(np.uint8), mode="L").save(tmp, format="PNG")


def save_checkpoint(path, field: VoxelGridField, meta: dict | None = None) -> None:
    """Binary blob (magic, version, bounds, resolution, float32 raw params) plus a JSON sidecar."""
    lo, hi = field.bounds
    with atomic_write(path) as tmp, open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(np.concatenate([lo, hi]).astype("<f8").tobytes())
        fh.write(struct.pack("<III", *field.resolution))
        fh.write(field.params.astype("<f4").tobytes())
    side = Path(str(path) + ".json")
    with atomic_write(side) as tmp:
        Path(tmp).write_text(json.dumps(meta or {}, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Returns (field, sidecar dict)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    b = np.frombuffer(data[8:56], dtype="<f8")
    res = struct.unpack("<III", data[56:68])
    n = 3 * int(np.prod(res))
    if len(data) != 68 + 4 * n:
        raise FormatError(f"{path}: truncated parameter block")
    params = np.frombuffer(data[68:], dtype="<f4").astype(np.float64).reshape((3,) + res)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return VoxelGridField((b[:3], b[3:]), res, params), meta


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def write_json(path, obj) -> None:
    with atomic_write(path) as tmp:
        Path(tmp).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_trajectory(path) -> list[SensorPose]:
    """JSON list of poses, or ``{"poses": [...]}``; each pose has ``translation`` and
    ``rotation`` (3×3) or ``yaw_deg``."""
    d = read_json(path)
    items = d["poses"] if isinstance(d, dict) else d
    try:
        return [SensorPose.from_dict(p) for p in items]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad pose entry: {exc}") from exc


def write_trajectory(path, poses) -> None:
    write_json(path, {"poses": [p.to_dict() for p in poses]})
