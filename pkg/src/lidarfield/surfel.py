"""Reconstruct-then-simulate baseline: scan points → oriented disks → ray casting with a heuristic
two-return rule."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .beam import Beam, BeamProfile, subray_directions
from .geometry import AcceleratedScene, SurfaceHit, SurfelCloud, build_bvh
from .types import LidarScan, Ray, RayObservation, ScanPattern, SensorPose, scan_ray_arrays

SURFEL_RADIUS_PRESETS = {"waymo": 0.06, "town": 0.12}


@dataclass(frozen=True)
class SurfelConfig:
    surfel_radius: float = 0.06
    voxel_size: float = 0.04
    normal_radius: float = 0.2
    min_neighbors: int = 3
    subrays: int = 7
    gamma0: float = 2e-3
    two_return_threshold: float = 2.0

    def __post_init__(self):
        for k in ("surfel_radius", "voxel_size", "normal_radius", "gamma0", "two_return_threshold"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "SurfelConfig":
        if name not in SURFEL_RADIUS_PRESETS:
            raise ValueError(f"unknown preset '{name}'; choose from {sorted(SURFEL_RADIUS_PRESETS)}")
        return cls(surfel_radius=SURFEL_RADIUS_PRESETS[name], **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SurfelConfig":
        d = dict(d)
        base = cls.preset(d.pop("preset")) if "preset" in d else cls()
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown surfel config keys: {sorted(unknown)}")
        return cls(**{**asdict(base), **d})


def estimate_normals(points, radius: float, viewpoints=None, min_neighbors: int = 3):
    """PCA normals over a ball neighborhood. Returns (normals (n,3), valid (n,)).

    Normals are flipped to face their point's viewpoint (one per point, or a single 3-vector).
    Points with fewer than ``min_neighbors`` neighbours (themselves included) are invalid.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(p)
    normals = np.zeros((n, 3))
    if n == 0:
        return normals, np.zeros(0, dtype=bool)
    tree = cKDTree(p)
    nbrs = tree.query_ball_point(p, r=radius)
    counts = np.array([len(x) for x in nbrs])
    valid = counts >= min_neighbors
    flat = np.concatenate([np.asarray(x, dtype=np.int64) for x in nbrs])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    q = p[flat]
    s1 = np.add.reduceat(q, starts, axis=0)
    s2 = np.add.reduceat(q[:, :, None] * q[:, None, :], starts, axis=0)
    mean = s1 / counts[:, None]
    cov = s2 / counts[:, None, None] - mean[:, :, None] * mean[:, None, :]
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if viewpoints is not None:
        vp = np.broadcast_to(np.asarray(viewpoints, dtype=np.float64), p.shape)
        flip = np.sum(normals * (vp - p), axis=1) < 0
        normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[~valid] = 0.0
    return normals, valid


def voxel_downsample(points, voxel: float, attributes=None):
    """One centroid per occupied voxel (attributes averaged likewise), ordered by voxel key."""
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keys = np.floor(p / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    m = len(counts)

    def mean(a):
        a = np.asarray(a, dtype=np.float64)
        flat = a.reshape(len(p), -1)
        out = np.zeros((m, flat.shape[1]))
        for c in range(flat.shape[1]):
            out[:, c] = np.bincount(inv, weights=flat[:, c], minlength=m)
        return (out / counts[:, None]).reshape((m,) + a.shape[1:])

    centers = mean(p)
    if attributes is None:
        return centers
    if isinstance(attributes, dict):
        return centers, {k: mean(v) for k, v in attributes.items()}
    return centers, mean(attributes)


def build_surfels(points, normals, radius: float, reflectance=None, valid=None) -> SurfelCloud:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    keep = np.ones(len(p), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    keep &= np.linalg.norm(nrm, axis=1) > 0.5
    if not keep.any():
        raise ValueError("no valid points to build surfels from")
    refl = np.full(len(p), 0.5) if reflectance is None else np.clip(np.asarray(reflectance, dtype=np.float64), 0, 1)
    return SurfelCloud(p[keep], nrm[keep], np.full(int(keep.sum()), float(radius)), refl[keep])


def reconstruct_surfels(scans: list[LidarScan], cfg: SurfelConfig = SurfelConfig()) -> SurfelCloud:
    """Merge first and second returns of all scans, estimate normals on the full cloud,
    downsample (averaging normals and intensity per voxel) and emit one disk per voxel."""
    pts, inten, view = [], [], []
    for s in scans:
        for which, e in (("first", s.first_intensity), ("second", s.second_intensity)):
            world = s.points(which, frame="world")
            mask = np.isfinite(s.first_range if which == "first" else s.second_range) & ~s.drop
            pts.append(world)
            inten.append(e[mask])
            view.append(np.broadcast_to(s.pose.translation, world.shape))
    p = np.concatenate(pts)
    if len(p) == 0:
        raise ValueError("scans contain no returns")
    normals, valid = estimate_normals(p, cfg.normal_radius, np.concatenate(view), cfg.min_neighbors)
    intensity = np.nan_to_num(np.concatenate(inten), nan=0.5)
    centers, attrs = voxel_downsample(p, cfg.voxel_size, {"intensity": intensity, "normal": normals})
    n = attrs["normal"]
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 1e-6
    n[ok] /= norm[ok, None]
    return build_surfels(centers, n, cfg.surfel_radius, attrs["intensity"], ok)


def cast_ray_surfels(scene: AcceleratedScene, ray: Ray, min_range: float = 0.0,
                     max_range: float = np.inf) -> list[SurfaceHit]:
    return scene.cast_ray(ray, min_range, max_range)


def simulate_surfel_beams(scene: AcceleratedScene, origins, central_dirs, cfg: SurfelConfig,
                          min_range: float, max_range: float, max_hits: int = 8):
    """Batched baseline beams. Returns dict of per-beam arrays like :func:`render_beams`."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(central_dirs, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    profile = BeamProfile.preset(cfg.gamma0, cfg.subrays)
    M = profile.subray_count
    sd = subray_directions(d, profile)
    sd[:, 0] = d
    t, ids, cnt = scene.cast_batch(np.repeat(o, M, axis=0), sd.reshape(-1, 3), min_range, max_range, max_hits)
    t = t.reshape(n, M, max_hits)
    ids = ids.reshape(n, M, max_hits)
    first = t[:, :, 0]
    drop = ~np.isfinite(first).any(axis=1)
    arg = np.argmin(first, axis=1)
    rows = np.arange(n)
    r1 = first[rows, arg]
    id1 = ids[rows, arg, 0]
    fin = np.where(np.isfinite(first), first, np.nan)
    with np.errstate(invalid="ignore"):
        spread = np.nanmax(np.where(drop[:, None], 0.0, fin), axis=1) - np.nanmin(np.where(drop[:, None], 0.0, fin), axis=1)
    two = ~drop & (spread > cfg.two_return_threshold)
    beyond = np.where(t >= (r1 + cfg.two_return_threshold)[:, None, None], t, np.inf).reshape(n, -1)
    k2 = np.argmin(beyond, axis=1)
    r2 = beyond[rows, k2]
    two &= np.isfinite(r2)
    id2 = ids.reshape(n, -1)[rows, k2]
    refl = scene.reflectance
    return {
        "first_range": np.where(drop, np.nan, r1),
        "first_intensity": np.where(drop, np.nan, refl[np.maximum(id1, 0)]),
        "drop": drop,
        "two_return": two,
        "second_range": np.where(two, r2, np.nan),
        "second_intensity": np.where(two, refl[np.maximum(id2, 0)], np.nan),
    }


def simulate_lidarsim_beam(scene: AcceleratedScene, beam: Beam, cfg: SurfelConfig = SurfelConfig(),
                           min_range: float = 0.5, max_range: float = 100.0) -> RayObservation:
    cfg = _with_beam(cfg, beam.profile)
    out = simulate_surfel_beams(scene, beam.central.origin, beam.central.direction, cfg, min_range, max_range)
    if out["drop"][0]:
        return RayObservation.dropped()
    if out["two_return"][0]:
        return RayObservation(float(out["first_range"][0]), float(out["first_intensity"][0]), False, True,
                              float(out["second_range"][0]), float(out["second_intensity"][0]))
    return RayObservation(float(out["first_range"][0]), float(out["first_intensity"][0]), False, False)


def _with_beam(cfg: SurfelConfig, profile: BeamProfile) -> SurfelConfig:
    if profile.subray_count == cfg.subrays and profile.gamma0 == cfg.gamma0:
        return cfg
    return SurfelConfig(**{**asdict(cfg), "subrays": profile.subray_count, "gamma0": profile.gamma0})


def simulate_surfel_scan(scene: AcceleratedScene, pattern: ScanPattern, pose: SensorPose,
                         cfg: SurfelConfig = SurfelConfig()) -> LidarScan:
    o, d = scan_ray_arrays(pattern, pose)
    out = simulate_surfel_beams(scene, o, d, cfg, pattern.min_range, pattern.max_range)
    scan = LidarScan.empty(pose, pattern)
    for k, v in out.items():
        getattr(scan, k)[:] = v.reshape(pattern.shape)
    return scan


class SurfelBaseline:
    """fit/render wrapper used by the closed-loop protocol."""

    def __init__(self, cfg: SurfelConfig = SurfelConfig()):
        self.cfg = cfg
        self.surfels: SurfelCloud | None = None
        self.scene: AcceleratedScene | None = None

    def fit(self, scans):
        self.surfels = reconstruct_surfels(list(scans), self.cfg)
        self.scene = build_bvh(self.surfels)
        return self

    def render(self, poses, pattern: ScanPattern) -> list[LidarScan]:
        if self.scene is None:
            raise RuntimeError("fit the baseline before rendering")
        return [simulate_surfel_scan(self.scene, pattern, p, self.cfg) for p in poses]
