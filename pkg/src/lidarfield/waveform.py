"""Waveform-level LiDAR simulation.

Each subray's hits are turned into delta target responses (Lambertian, 1/ζ² receiver
falloff, two-way transmittance), convolved with the transmitted pulse by splatting a
sampled pulse template into a range histogram, summed over the beam with Gaussian
subray weights, and reduced to at most two returns by thresholded peak detection.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .beam import Beam, BeamProfile, subray_directions
from .geometry import AcceleratedScene, SurfaceHit
from .types import LidarScan, RayObservation, ScanPattern, SensorPose, scan_ray_arrays

SPEED_OF_LIGHT = 299792458.0
# pulse template is truncated at t = _SUPPORT·τ, where it has decayed below 1e-12 of its peak
_SUPPORT = 40.0


@dataclass(frozen=True)
class PulseModel:
    """Transmitted pulse P_e(t) = I₀ (t/2τ)² exp(2 − t/τ), τ = τ_H/1.75; peak I₀ at t = 2τ."""

    tau_h: float = 1e-9
    peak_power: float = 1.0

    def __post_init__(self):
        if not self.tau_h > 0:
            raise ValueError("pulse half-power width must be positive")

    @property
    def tau(self) -> float:
        return self.tau_h / 1.75

    @property
    def peak_shift(self) -> float:
        """Range offset of the echo peak behind the surface: c·τ (m)."""
        return SPEED_OF_LIGHT * self.tau


def pulse_power(t, pulse: PulseModel):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("pulse time must be non-negative")
    x = t_arr / pulse.tau
    p = pulse.peak_power * 0.25 * x * x * np.exp(2.0 - x)
    return float(p) if p.ndim == 0 else p


@dataclass(frozen=True)
class DetectorConfig:
    """Receiver settings. ``power_threshold`` is relative to the reference peak, i.e. the peak a
    ρ=1 surface at normal incidence and range ``ref_range`` produces with the full beam."""

    power_threshold: float = 0.01
    min_separation: float = 2.0
    bin_width: float = 0.05
    ref_range: float = 10.0
    system_constant: float = 1.0
    max_returns: int = 2

    def __post_init__(self):
        for name in ("power_threshold", "min_separation", "bin_width", "ref_range", "system_constant"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_returns < 1:
            raise ValueError("max_returns must be >= 1")

    def reference_peak(self, pulse: PulseModel, weight_sum: float = 1.0) -> float:
        return self.system_constant * pulse.peak_power * weight_sum / self.ref_range ** 2


@dataclass(frozen=True, eq=False)
class Waveform:
    start_range: float
    bin_width: float
    power: np.ndarray

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError("bin width must be positive")
        p = np.asarray(self.power, dtype=np.float64)
        if np.any(p < 0):
            raise ValueError("waveform power must be non-negative")
        object.__setattr__(self, "power", p)

    @property
    def centers(self) -> np.ndarray:
        return self.start_range + (np.arange(len(self.power)) + 0.5) * self.bin_width

    def same_binning(self, other: "Waveform") -> bool:
        return (self.start_range == other.start_range and self.bin_width == other.bin_width
                and len(self.power) == len(other.power))


def waveform_bin_count(max_range: float, pulse: PulseModel, bin_width: float, start_range: float = 0.0) -> int:
    tail = 0.5 * SPEED_OF_LIGHT * pulse.tau * _SUPPORT
    return int(math.ceil((max_range + tail - start_range) / bin_width)) + 2


@numba.njit(cache=True, nogil=True)
def _splat(power, start, bw, zeta0, amp, half_ctau, lo_hi):
    """Add amp·P_e(2(ζ−ζ₀)/c) at every bin center; tracks the touched bin span in lo_hi."""
    nb = power.shape[0]
    b0 = int(math.floor((zeta0 - start) / bw - 0.5)) + 1
    if b0 < 0:
        b0 = 0
    b = b0
    while b < nb:
        zc = start + (b + 0.5) * bw
        x = (zc - zeta0) / half_ctau
        if x > _SUPPORT:
            break
        if x >= 0.0:
            power[b] += amp * 0.25 * x * x * math.exp(2.0 - x)
        b += 1
    if b0 < lo_hi[0]:
        lo_hi[0] = b0
    if b > lo_hi[1]:
        lo_hi[1] = b


@numba.njit(cache=True, nogil=True)
def _detect(power, lo, hi, start, bw, threshold, shift, min_sep, max_ret, out_r, out_p):
    """Nearest-first selection of thresholded local maxima with parabolic sub-bin refinement."""
    n = 0
    nb = power.shape[0]
    if lo < 0:
        lo = 0
    if hi > nb:
        hi = nb
    for b in range(lo, hi):
        y1 = power[b]
        if y1 <= threshold:
            continue
        y0 = power[b - 1] if b > 0 else 0.0
        y2 = power[b + 1] if b + 1 < nb else 0.0
        if not (y1 > y0 and y1 >= y2):
            continue
        den = y0 - 2.0 * y1 + y2
        off = 0.0
        if den < 0.0:
            off = 0.5 * (y0 - y2) / den
        peak = y1 - 0.25 * (y0 - y2) * off
        r = start + (b + 0.5 + off) * bw - shift
        ok = True
        for k in range(n):
            if abs(r - out_r[k]) < min_sep:
                ok = False
                break
        if ok:
            out_r[n] = r
            out_p[n] = peak
            n += 1
            if n == max_ret:
                break
    return n


@numba.njit(cache=True, nogil=True)
def _beams_kernel(hit_t, hit_amp, hit_trans, hit_n, weights, n_sub, nb, start, bw, half_ctau,
                  threshold, shift, min_sep, max_ret, out_n, out_r, out_p):
    power = np.zeros(nb)
    lo_hi = np.empty(2, np.int64)
    n_beams = out_n.shape[0]
    for i in range(n_beams):
        lo_hi[0] = nb
        lo_hi[1] = 0
        for m in range(n_sub):
            r = i * n_sub + m
            T2 = 1.0
            for k in range(hit_n[r]):
                a = weights[m] * hit_amp[r, k] * T2
                if a > 0.0:
                    _splat(power, start, bw, hit_t[r, k], a, half_ctau, lo_hi)
                tr = hit_trans[r, k]
                T2 *= tr * tr
                if T2 == 0.0:
                    break
        if lo_hi[1] > lo_hi[0]:
            out_n[i] = _detect(power, lo_hi[0], lo_hi[1], start, bw, threshold, shift, min_sep, max_ret,
                               out_r[i], out_p[i])
            power[lo_hi[0]:lo_hi[1] + 1] = 0.0
        else:
            out_n[i] = 0


def _hit_amplitudes(hits_r, cosi, refl, C):
    with np.errstate(divide="ignore", invalid="ignore"):
        amp = C * refl * cosi / np.square(hits_r)
    return np.where(np.isfinite(hits_r), amp, 0.0)


def ray_waveform(hits: list[SurfaceHit], pulse: PulseModel, detector: DetectorConfig, max_range: float,
                 start_range: float = 0.0) -> Waveform:
    """Received power histogram of one ideal ray; later hits are attenuated by the two-way
    transmissivity of the surfaces in front of them (opaque surfaces block everything behind)."""
    ranges = [h.range for h in hits]
    if any(b < a for a, b in zip(ranges, ranges[1:])):
        raise ValueError("hits must be sorted by ascending range")
    nb = waveform_bin_count(max_range, pulse, detector.bin_width, start_range)
    power = np.zeros(nb)
    lo_hi = np.array([nb, 0], dtype=np.int64)
    T2 = 1.0
    half_ctau = 0.5 * SPEED_OF_LIGHT * pulse.tau
    for h in hits:
        amp = detector.system_constant * pulse.peak_power * h.reflectance * h.cos_incidence * T2 / h.range ** 2
        if amp > 0:
            _splat(power, start_range, detector.bin_width, h.range, amp, half_ctau, lo_hi)
        T2 *= h.transmissivity ** 2
        if T2 == 0.0:
            break
    return Waveform(start_range, detector.bin_width, power)


def beam_waveform(beam: Beam | BeamProfile, waveforms: list[Waveform]) -> Waveform:
    """Bin-wise Σ g(γ_i)·P_i over the subray waveforms."""
    profile = beam.profile if isinstance(beam, Beam) else beam
    if len(waveforms) != profile.subray_count:
        raise ValueError("need one waveform per subray")
    first = waveforms[0]
    if not all(first.same_binning(w) for w in waveforms[1:]):
        raise ValueError("subray waveforms use mismatched binning")
    total = np.zeros_like(first.power)
    for g, w in zip(profile.weights, waveforms):
        total += g * w.power
    return Waveform(first.start_range, first.bin_width, total)


def detect_returns(w: Waveform, detector: DetectorConfig, pulse: PulseModel,
                   reference_weight: float = 1.0, correct_bias: bool = True) -> list[tuple[float, float]]:
    """(range, peak power) of up to ``detector.max_returns`` echoes, nearest first.

    Ranges have the pulse peak offset c·τ removed unless ``correct_bias`` is False.
    ``reference_weight`` is the subray weight sum the threshold reference is scaled by.
    """
    out_r = np.zeros(detector.max_returns)
    out_p = np.zeros(detector.max_returns)
    thr = detector.power_threshold * detector.reference_peak(pulse, reference_weight)
    shift = pulse.peak_shift if correct_bias else 0.0
    n = _detect(w.power, 0, len(w.power), w.start_range, w.bin_width, thr, shift,
                detector.min_separation, detector.max_returns, out_r, out_p)
    return [(float(out_r[k]), float(out_p[k])) for k in range(n)]


@dataclass(frozen=True)
class SensorConfig:
    """Everything needed to simulate a scan; mirrors the JSON sensor config."""

    pattern: ScanPattern
    pulse: PulseModel = PulseModel()
    detector: DetectorConfig = DetectorConfig()
    gamma0: float = 2e-3
    subrays: int = 37

    @property
    def profile(self) -> BeamProfile:
        return BeamProfile.preset(self.gamma0, self.subrays)

    def to_dict(self) -> dict:
        d = self.pattern.to_dict()
        d.update({
            "gamma0_mrad": self.gamma0 * 1e3,
            "subrays": self.subrays,
            "tau_h_ns": self.pulse.tau_h * 1e9,
            "peak_power": self.pulse.peak_power,
            "bin_width_m": self.detector.bin_width,
            "power_threshold": self.detector.power_threshold,
            "min_separation_m": self.detector.min_separation,
            "ref_range_m": self.detector.ref_range,
            "system_constant": self.detector.system_constant,
            "max_returns": self.detector.max_returns,
        })
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SensorConfig":
        pattern = ScanPattern.from_dict(d)
        pulse = PulseModel(float(d.get("tau_h_ns", 1.0)) * 1e-9, float(d.get("peak_power", 1.0)))
        det = DetectorConfig(
            power_threshold=float(d.get("power_threshold", 0.01)),
            min_separation=float(d.get("min_separation_m", 2.0)),
            bin_width=float(d.get("bin_width_m", 0.05)),
            ref_range=float(d.get("ref_range_m", 10.0)),
            system_constant=float(d.get("system_constant", 1.0)),
            max_returns=int(d.get("max_returns", 2)),
        )
        return cls(pattern, pulse, det, float(d.get("gamma0_mrad", 2.0)) * 1e-3, int(d.get("subrays", 37)))


def simulate_beams(scene: AcceleratedScene, origins, central_dirs, profile: BeamProfile, pulse: PulseModel,
                   detector: DetectorConfig, min_range: float, max_range: float, threads: int = 1,
                   chunk: int = 2048):
    """Vectorized beam simulation. Returns (n_returns, ranges (n,R), intensities (n,R))."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    central_dirs = np.asarray(central_dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    R = detector.max_returns
    out_n = np.zeros(n, np.int64)
    out_r = np.zeros((n, R))
    out_p = np.zeros((n, R))
    M = profile.subray_count
    g = profile.weight_array
    nb = waveform_bin_count(max_range, pulse, detector.bin_width)
    ref = detector.reference_peak(pulse, profile.weight_sum)
    thr = detector.power_threshold * ref
    half_ctau = 0.5 * SPEED_OF_LIGHT * pulse.tau
    max_hits = 1 if scene.opaque else 8

    def work(s):
        e = min(s + chunk, n)
        dirs = subray_directions(central_dirs[s:e], profile)
        dirs[:, 0] = central_dirs[s:e]
        o = np.repeat(origins[s:e], M, axis=0)
        d = dirs.reshape(-1, 3)
        t, ids, cnt = scene.cast_batch(o, d, min_range, max_range, max_hits)
        cosi, refl, trans = scene.hit_attributes(d, ids)
        amp = _hit_amplitudes(t, cosi, refl, detector.system_constant * pulse.peak_power)
        _beams_kernel(t, amp, trans, cnt, g, M, nb, 0.0, detector.bin_width, half_ctau, thr,
                      pulse.peak_shift, detector.min_separation, R, out_n[s:e], out_r[s:e], out_p[s:e])

    starts = list(range(0, n, chunk))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    intensity = np.clip(out_p / ref, 0.0, 1.0)
    return out_n, out_r, intensity


def _observation(nret, r, e) -> RayObservation:
    if nret == 0:
        return RayObservation.dropped()
    if nret == 1:
        return RayObservation(float(r[0]), float(e[0]), False, False)
    return RayObservation(float(r[0]), float(e[0]), False, True, float(r[1]), float(e[1]))


def simulate_beam(scene: AcceleratedScene, beam: Beam, pulse: PulseModel, detector: DetectorConfig,
                  min_range: float = 0.5, max_range: float = 100.0) -> RayObservation:
    n, r, e = simulate_beams(scene, beam.central.origin[None], beam.central.direction[None], beam.profile,
                             pulse, detector, min_range, max_range)
    return _observation(int(n[0]), r[0], e[0])


def simulate_scan(scene: AcceleratedScene, pattern: ScanPattern, pose: SensorPose, pulse: PulseModel,
                  detector: DetectorConfig, profile: BeamProfile, threads: int = 1) -> LidarScan:
    o, d = scan_ray_arrays(pattern, pose)
    n, r, e = simulate_beams(scene, o, d, profile, pulse, detector, pattern.min_range, pattern.max_range,
                             threads=threads)
    scan = LidarScan.empty(pose, pattern)
    shape = pattern.shape
    has1 = n >= 1
    has2 = n >= 2
    scan.drop[:] = (~has1).reshape(shape)
    scan.two_return[:] = has2.reshape(shape)
    scan.first_range[:] = np.where(has1, r[:, 0], np.nan).reshape(shape)
    scan.first_intensity[:] = np.where(has1, e[:, 0], np.nan).reshape(shape)
    if r.shape[1] > 1:
        scan.second_range[:] = np.where(has2, r[:, 1], np.nan).reshape(shape)
        scan.second_intensity[:] = np.where(has2, e[:, 1], np.nan).reshape(shape)
    return scan


def simulate_sensor_scan(scene: AcceleratedScene, sensor: SensorConfig, pose: SensorPose, threads: int = 1):
    return simulate_scan(scene, sensor.pattern, pose, sensor.pulse, sensor.detector, sensor.profile, threads)
