"""Volume rendering for an active sensor.

The sensor emits its own light, so a sample is lit only if the path from the sensor is clear
and the echo must come back along the same path. Transmittance is therefore squared, which
doubles the optical depth in the weights: w_j = T²_j − T²_{j+1} with T²_j = exp(−2 Σ_{k<j} σ_k δ_k).
``weight_mode="passive"`` gives the usual single-trip camera weights for comparison.

Everything here works on batches of rays. :class:`RangePass` keeps the intermediate arrays so
that the fitting code can run the exact reverse pass of the same computation.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .beam import Beam, BeamProfile, subray_directions
from .types import LidarScan, Ray, RayObservation, ScanPattern, SensorPose, scan_ray_arrays

WEIGHT_MODES = {"active": 2.0, "passive": 1.0}


@dataclass(frozen=True)
class RenderConfig:
    coarse_samples: int = 768
    fine_samples: int = 64
    window: float = 0.8            # half-width of the refinement window (m)
    confidence: float = 0.1        # minimum peak coarse weight for a trusted surface
    buffer: float = 2.0            # gap past the first return ignored when looking for the second (m)
    weight_mode: str = "active"
    min_range: float = 0.5
    max_range: float = 100.0
    drop_threshold: float = 0.5
    intensity_falloff: bool = False  # if set, rendered intensity is ρ·(ref_range/ζ)², clamped to 1
    ref_range: float = 10.0

    def __post_init__(self):
        if not self.coarse_samples >= self.fine_samples >= 2:
            raise ValueError("need coarse_samples >= fine_samples >= 2")
        if not self.window > 0 or not self.buffer > 0:
            raise ValueError("window and buffer must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence threshold must lie in (0, 1)")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {sorted(WEIGHT_MODES)}")
        if not 0.0 < self.min_range < self.max_range:
            raise ValueError("require 0 < min_range < max_range")

    @property
    def factor(self) -> float:
        return WEIGHT_MODES[self.weight_mode]

    _JSON_KEYS = {
        "n_coarse": "coarse_samples", "n_fine": "fine_samples", "epsilon_m": "window", "eta": "confidence",
        "xi_m": "buffer", "weight_mode": "weight_mode", "min_range_m": "min_range", "max_range_m": "max_range",
        "drop_threshold": "drop_threshold", "intensity_falloff": "intensity_falloff", "ref_range_m": "ref_range",
    }

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[v] for k, v in self._JSON_KEYS.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        unknown = set(d) - set(cls._JSON_KEYS)
        if unknown:
            raise ValueError(f"unknown render config keys: {sorted(unknown)}")
        kw = {cls._JSON_KEYS[k]: v for k, v in d.items()}
        for k in ("coarse_samples", "fine_samples"):
            if k in kw:
                kw[k] = int(kw[k])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class RaySamples:
    """Piecewise-constant samples along one (or a batch of) rays.

    ``boundaries`` has N+1 entries on its last axis; channel arrays have N.
    """

    boundaries: np.ndarray
    sigma: np.ndarray
    reflectance: Optional[np.ndarray] = None
    drop: Optional[np.ndarray] = None

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        s = np.asarray(self.sigma, dtype=np.float64)
        if b.shape[-1] < 2 or s.shape != b.shape[:-1] + (b.shape[-1] - 1,):
            raise ValueError("need N >= 1 segments and one σ per segment")
        if np.any(np.diff(b, axis=-1) <= 0):
            raise ValueError("segment boundaries must be strictly increasing")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("σ must be finite and non-negative")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "sigma", s)
        for name in ("reflectance", "drop"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=np.float64))

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.boundaries, axis=-1)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.boundaries[..., 1:] + self.boundaries[..., :-1])

    @classmethod
    def from_field(cls, field, ray: Ray, boundaries) -> "RaySamples":
        b = np.asarray(boundaries, dtype=np.float64)
        mids = 0.5 * (b[1:] + b[:-1])
        sigma, rho, drop = field.sample(ray.at(mids))
        return cls(b, sigma, rho, drop)


def transmittance(samples: RaySamples, j) -> np.ndarray:
    """One-way transmittance exp(−Σ_{k<j} σ_k δ_k) from the first boundary to boundary ``j``."""
    depth = np.concatenate([np.zeros(samples.sigma.shape[:-1] + (1,)),
                            np.cumsum(samples.sigma * samples.deltas, axis=-1)], axis=-1)
    return np.exp(-depth[..., j])


def weights_and_transmittance(sigma, delta, factor: float = 2.0):
    """Weights (…, N) and the factor-scaled transmittance at every boundary (…, N+1)."""
    tau = factor * sigma * delta
    depth = np.cumsum(tau, axis=-1)
    T = np.exp(-np.concatenate([np.zeros(tau.shape[:-1] + (1,)), depth], axis=-1))
    w = T[..., :-1] * -np.expm1(-tau)
    return w, T


def weights_vjp(delta, w, T, g_w, factor: float = 2.0):
    """Gradient of Σ g_w·w with respect to σ: κδ_m (g_m T_{m+1} − Σ_{j>m} g_j w_j)."""
    gw = g_w * w
    tail = np.cumsum(gw[..., ::-1], axis=-1)[..., ::-1] - gw  # Σ_{j>m}
    return factor * delta * (g_w * T[..., 1:] - tail)


def lidar_weights(samples: RaySamples, mode: str = "active") -> np.ndarray:
    return weights_and_transmittance(samples.sigma, samples.deltas, WEIGHT_MODES[mode])[0]


def render_scalar(samples: RaySamples, weights, channel: str = "reflectance") -> np.ndarray:
    """Σ_j w_j v_j for the ``reflectance`` or ``drop`` channel."""
    values = getattr(samples, channel)
    if values is None:
        raise ValueError(f"samples carry no '{channel}' channel")
    return np.sum(np.asarray(weights) * values, axis=-1)


def beam_range_features(estimates) -> tuple[float, float]:
    """(population std, max − min) of the valid subray range estimates."""
    e = np.asarray(estimates, dtype=np.float64).ravel()
    e = e[np.isfinite(e)]
    if len(e) < 2:
        raise ValueError("need at least two valid range estimates")
    return float(np.std(e)), float(e.max() - e.min())


def beam_range_features_batch(estimates: np.ndarray) -> np.ndarray:
    """Row-wise features over (B, M) estimates with NaN for misses; rows with < 2 valid give (0, 0)."""
    e = np.asarray(estimates, dtype=np.float64)
    valid = np.isfinite(e)
    n = valid.sum(axis=1)
    ez = np.where(valid, e, 0.0)
    mean = ez.sum(axis=1) / np.maximum(n, 1)
    var = np.where(valid, (e - mean[:, None]) ** 2, 0.0).sum(axis=1) / np.maximum(n, 1)
    hi = np.where(valid, e, -np.inf).max(axis=1)
    lo = np.where(valid, e, np.inf).min(axis=1)
    ok = n >= 2
    return np.stack([np.where(ok, np.sqrt(var), 0.0), np.where(ok, hi - lo, 0.0)], axis=1)


# ------------------------------------------------------------------------------------ batched engine

def ray_interval(field, origins, dirs, min_range: float, max_range: float):
    """Clip [min_range, max_range] to the field's bounding box when it has one. Returns (near, far, hit)."""
    n = len(origins)
    near = np.full(n, float(min_range))
    far = np.full(n, float(max_range))
    bounds = getattr(field, "bounds", None)
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (lo - origins) * inv
            t1 = (hi - origins) * inv
        tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
        near = np.maximum(near, tmin)
        far = np.minimum(far, tmax)
    hit = far - near > 1e-9
    return near, far, hit


def _evaluate(field, pts, need_cache):
    if need_cache or hasattr(field, "evaluate"):
        if not hasattr(field, "evaluate"):
            raise TypeError("gradients need a field with evaluate/vjp (e.g. VoxelGridField)")
        return field.evaluate(pts)
    s, r, d = field.sample(pts)
    return np.asarray(s, dtype=np.float64), np.asarray(r, dtype=np.float64), np.asarray(d, dtype=np.float64), None


class SamplePass:
    """Samples of a batch of rays on given boundaries (B, N+1), with optional σ truncation."""

    def __init__(self, field, origins, dirs, boundaries, factor, truncate=None, need_cache=False):
        self.boundaries = boundaries
        self.mids = 0.5 * (boundaries[:, 1:] + boundaries[:, :-1])
        self.delta = np.diff(boundaries, axis=1)
        B, N = self.mids.shape
        pts = origins[:, None, :] + self.mids[..., None] * dirs[:, None, :]
        sigma, rho, drop, self.cache = _evaluate(field, pts.reshape(-1, 3), need_cache)
        self.sigma = sigma.reshape(B, N)
        self.rho = rho.reshape(B, N)
        self.drop = drop.reshape(B, N)
        self.keep = None
        if truncate is not None:
            self.keep = self.mids > truncate[:, None]
            self.sigma = np.where(self.keep, self.sigma, 0.0)
        self.factor = factor
        self.w, self.T = weights_and_transmittance(self.sigma, self.delta, factor)

    def backprop(self, field, g_w, g_rho, g_drop):
        g_sigma = weights_vjp(self.delta, self.w, self.T, g_w, self.factor)
        if self.keep is not None:
            g_sigma = np.where(self.keep, g_sigma, 0.0)
        return field.vjp(self.cache, g_sigma.ravel(), g_rho.ravel(), g_drop.ravel())


def _linspace_rows(lo, hi, n):
    t = np.linspace(0.0, 1.0, n + 1)
    return lo[:, None] + (hi - lo)[:, None] * t[None, :]


class RangePass:
    """Coarse pass, peak pick, fine pass and the derived per-ray outputs.

    Attributes: ``range`` (NaN when the coarse weights vanish), ``confidence`` (peak coarse
    weight), ``fallback`` (peak below the confidence threshold, so the coarse expectation is
    used), ``reflectance`` and ``drop`` (Σ w p_d plus the untouched remainder 1 − Σ w).
    """

    def __init__(self, field, origins, dirs, near, far, cfg: RenderConfig, truncate=None,
                 need_cache=False, reject_boundary_peak=False):
        self.origins, self.dirs = origins, dirs
        self.near, self.far = near, far
        f = cfg.factor
        self.coarse = c = SamplePass(field, origins, dirs, _linspace_rows(near, far, cfg.coarse_samples), f,
                                     truncate, need_cache)
        B = len(origins)
        rows = np.arange(B)
        self.peak = p = np.argmax(c.w, axis=1)  # first maximum: nearest sample wins ties
        self.confidence = c.w[rows, p]
        self.fallback = self.confidence < cfg.confidence
        zp = c.mids[rows, p]
        lo = np.clip(zp - cfg.window, near, far)
        hi = np.clip(zp + cfg.window, near, far)
        self.fine = fi = SamplePass(field, origins, dirs, _linspace_rows(lo, hi, cfg.fine_samples), f,
                                    truncate, need_cache)
        self.fine_sum = S = fi.w.sum(axis=1)
        self.wbar = fi.w / np.where(S > 0, S, 1.0)[:, None]
        self.coarse_sum = c.w.sum(axis=1)
        fb = self.fallback
        self.range = np.where(fb, np.sum(c.w * c.mids, axis=1), np.sum(self.wbar * fi.mids, axis=1))
        self.reflectance = np.where(fb, np.sum(c.w * c.rho, axis=1), np.sum(self.wbar * fi.rho, axis=1))
        self.drop = np.sum(c.w * c.drop, axis=1) + (1.0 - self.coarse_sum)
        self.surface = (self.coarse_sum > 0) & (fb | (S > 0))
        if reject_boundary_peak and truncate is not None:
            # a peak on the first retained sample means the cut went through occupied space
            first_kept = np.argmax(c.keep, axis=1)
            self.boundary_peak = c.keep.any(axis=1) & (p == first_kept)
        else:
            self.boundary_peak = np.zeros(B, dtype=bool)
        self.range = np.where(self.surface, self.range, np.nan)

    @property
    def confident(self) -> np.ndarray:
        return self.surface & ~self.fallback & ~self.boundary_peak

    def backprop(self, field, g_range, g_refl, g_drop, g_coarse_w=None):
        """Parameter gradient for upstream gradients on range, reflectance, drop and (optionally)
        directly on the coarse weights. The fine window placement is treated as a constant."""
        c, fi = self.coarse, self.fine
        fb = self.fallback[:, None]
        g_range = np.where(self.surface, g_range, 0.0)[:, None]
        g_refl = np.asarray(g_refl, dtype=np.float64)[:, None] * np.ones_like(g_range)
        g_drop = np.asarray(g_drop, dtype=np.float64)[:, None] * np.ones_like(g_range)
        gw_c = g_drop * (c.drop - 1.0) + np.where(fb, g_range * c.mids + g_refl * c.rho, 0.0)
        if g_coarse_w is not None:
            gw_c = gw_c + g_coarse_w
        grad = c.backprop(field, gw_c, np.where(fb, g_refl * c.w, 0.0), g_drop * c.w)
        g_wbar = np.where(fb, 0.0, g_range * fi.mids + g_refl * fi.rho)
        S = np.where(self.fine_sum > 0, self.fine_sum, 1.0)[:, None]
        gw_f = (g_wbar - np.sum(g_wbar * self.wbar, axis=1, keepdims=True)) / S
        grad += fi.backprop(field, gw_f, np.where(fb, 0.0, g_refl * self.wbar), np.zeros_like(fi.w))
        return grad


def _as_batch(o, d):
    o = np.ascontiguousarray(o, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(d, dtype=np.float64).reshape(-1, 3)
    return o, d


def render_rays(field, origins, dirs, cfg: RenderConfig, truncate=None, reject_boundary_peak=False):
    """Forward-only batched rendering. Rays that miss the field box are reported as no-surface."""
    o, d = _as_batch(origins, dirs)
    near, far, hit = ray_interval(field, o, d, cfg.min_range, cfg.max_range)
    n = len(o)
    out = {
        "range": np.full(n, np.nan), "confidence": np.zeros(n), "reflectance": np.zeros(n),
        "drop": np.ones(n), "confident": np.zeros(n, dtype=bool), "fallback": np.ones(n, dtype=bool),
    }
    idx = np.flatnonzero(hit)
    if len(idx):
        tr = None if truncate is None else np.asarray(truncate, dtype=np.float64).reshape(-1)[idx]
        rp = RangePass(field, o[idx], d[idx], near[idx], far[idx], cfg, tr,
                       reject_boundary_peak=reject_boundary_peak)
        out["range"][idx] = rp.range
        out["confidence"][idx] = rp.confidence
        out["reflectance"][idx] = rp.reflectance
        out["drop"][idx] = rp.drop
        out["confident"][idx] = rp.confident
        out["fallback"][idx] = rp.fallback
    return out


class FirstRange(NamedTuple):
    range: Optional[float]     # None when the coarse weights all vanish
    confidence: float
    coarse_weights: np.ndarray
    reflectance: float
    drop: float
    fallback: bool


def render_first_range(field, ray: Ray, cfg: RenderConfig) -> FirstRange:
    o, d = ray.origin[None], ray.direction[None]
    near, far, hit = ray_interval(field, o, d, cfg.min_range, cfg.max_range)
    if not hit[0]:
        return FirstRange(None, 0.0, np.zeros(cfg.coarse_samples), 0.0, 1.0, True)
    rp = RangePass(field, o, d, near, far, cfg)
    r = float(rp.range[0])
    return FirstRange(None if not np.isfinite(r) else r, float(rp.confidence[0]), rp.coarse.w[0].copy(),
                      float(rp.reflectance[0]), float(rp.drop[0]), bool(rp.fallback[0]))


def render_second_range(field, ray: Ray, first_range: float, cfg: RenderConfig) -> Optional[float]:
    """Range of the next surface past ``first_range + buffer``, or None if not confidently found."""
    out = render_rays(field, ray.origin, ray.direction, cfg, truncate=[first_range + cfg.buffer],
                      reject_boundary_peak=True)
    return float(out["range"][0]) if out["confident"][0] else None


# ------------------------------------------------------------------------------------ beams & scans

class OracleDecider:
    """Uses known two-return labels instead of a classifier."""

    requires_features = False

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool).reshape(-1)

    def decide(self, features, beam_ids) -> np.ndarray:
        return self.mask[np.asarray(beam_ids)].astype(np.float64)


class ThresholdDecider:
    """p_s = 1 when the subray range spread (std) exceeds ``std_threshold`` metres."""

    requires_features = True

    def __init__(self, std_threshold: float = 0.3):
        self.std_threshold = float(std_threshold)

    def decide(self, features, beam_ids=None) -> np.ndarray:
        return (np.asarray(features)[:, 0] > self.std_threshold).astype(np.float64)


def _intensity(cfg: RenderConfig, rho, rng):
    if not cfg.intensity_falloff:
        return np.clip(rho, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.clip(rho * (cfg.ref_range / rng) ** 2, 0.0, 1.0)


def render_beams(field, origins, central_dirs, profile: BeamProfile, cfg: RenderConfig, decider=None,
                 beam_ids=None, return_features=False):
    """Render many beams. Single-return beams use the central ray; for beams the decider flags,
    every subray is rendered, the nearest estimate is the first return and the nearest confident
    truncated estimate is the second."""
    o, d = _as_batch(origins, central_dirs)
    n = len(o)
    ids = np.arange(n) if beam_ids is None else np.asarray(beam_ids)
    cen = render_rays(field, o, d, cfg)
    r1 = cen["range"].copy()
    e1 = _intensity(cfg, cen["reflectance"], r1)
    drop = (cen["drop"] >= cfg.drop_threshold) | ~np.isfinite(r1)
    two = np.zeros(n, dtype=bool)
    r2 = np.full(n, np.nan)
    e2 = np.full(n, np.nan)
    feats = np.zeros((n, 2))
    M = profile.subray_count
    if decider is not None and M > 1:
        if decider.requires_features:
            cand = np.arange(n)
        else:
            cand = np.flatnonzero(decider.decide(None, ids) >= 0.5)
        cand = cand[~drop[cand]]
        if len(cand):
            sub_d = subray_directions(d[cand], profile)
            sub_d[:, 0] = d[cand]
            sub_o = np.repeat(o[cand], M, axis=0)
            sub = render_rays(field, sub_o, sub_d.reshape(-1, 3), cfg)
            est = sub["range"].reshape(-1, M)
            feats[cand] = beam_range_features_batch(est)
            ps = decider.decide(feats[cand], ids[cand])
            sel = ps >= 0.5
            chosen = cand[sel]
            est_c = est[sel]
            has = np.isfinite(est_c).any(axis=1)
            chosen, est_c = chosen[has], est_c[has]
            if len(chosen):
                rows = np.flatnonzero(sel)[has]
                arg1 = np.nanargmin(est_c, axis=1)
                z1 = est_c[np.arange(len(chosen)), arg1]
                refl_sub = sub["reflectance"].reshape(-1, M)[rows]
                r1[chosen] = z1
                e1[chosen] = _intensity(cfg, refl_sub[np.arange(len(chosen)), arg1], z1)
                tr = np.repeat(z1 + cfg.buffer, M)
                sub2 = render_rays(field, np.repeat(o[chosen], M, axis=0),
                                   sub_d[rows].reshape(-1, 3), cfg, truncate=tr, reject_boundary_peak=True)
                est2 = np.where(sub2["confident"], sub2["range"], np.nan).reshape(-1, M)
                ok2 = np.isfinite(est2).any(axis=1)
                if ok2.any():
                    k = chosen[ok2]
                    arg2 = np.nanargmin(est2[ok2], axis=1)
                    z2 = est2[ok2][np.arange(len(k)), arg2]
                    two[k] = True
                    r2[k] = z2
                    e2[k] = _intensity(cfg, sub2["reflectance"].reshape(-1, M)[ok2][np.arange(len(k)), arg2], z2)
    r1 = np.where(drop, np.nan, r1)
    e1 = np.where(drop, np.nan, e1)
    two &= ~drop
    r2 = np.where(two, r2, np.nan)
    e2 = np.where(two, e2, np.nan)
    out = {"first_range": r1, "first_intensity": e1, "drop": drop, "two_return": two,
           "second_range": r2, "second_intensity": e2}
    if return_features:
        out["features"] = feats
    return out


def render_beam(field, beam: Beam, cfg: RenderConfig, decider=None) -> RayObservation:
    out = render_beams(field, beam.central.origin, beam.central.direction, beam.profile, cfg, decider)
    if out["drop"][0]:
        return RayObservation.dropped()
    if out["two_return"][0]:
        return RayObservation(float(out["first_range"][0]), float(out["first_intensity"][0]), False, True,
                              float(out["second_range"][0]), float(out["second_intensity"][0]))
    return RayObservation(float(out["first_range"][0]), float(out["first_intensity"][0]), False, False)


def render_scan(field, pattern: ScanPattern, pose: SensorPose, profile: BeamProfile, cfg: RenderConfig,
                decider=None, threads: int = 1, chunk: int = 4096) -> LidarScan:
    """Render a full scan. Work is split into fixed chunks so the result does not depend on ``threads``."""
    o, d = scan_ray_arrays(pattern, pose)
    cfg = _scan_cfg(cfg, pattern)
    n = len(o)
    keys = ("first_range", "first_intensity", "drop", "two_return", "second_range", "second_intensity")
    parts = {}

    def work(s):
        e = min(s + chunk, n)
        parts[s] = render_beams(field, o[s:e], d[s:e], profile, cfg, decider, beam_ids=np.arange(s, e))

    starts = list(range(0, n, chunk))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    scan = LidarScan.empty(pose, pattern)
    for k in keys:
        getattr(scan, k)[:] = np.concatenate([parts[s][k] for s in starts]).reshape(pattern.shape)
    return scan


def _scan_cfg(cfg: RenderConfig, pattern: ScanPattern) -> RenderConfig:
    return replace(cfg, min_range=pattern.min_range, max_range=pattern.max_range)
