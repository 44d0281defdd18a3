"""Diverged-beam discretization: subray layout and Gaussian irradiance weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import Ray

SUPPORTED_SUBRAY_COUNTS = (1, 7, 37)


def subray_weight(gamma, gamma0: float):
    """Relative irradiance exp(-2 γ²/γ₀²) of a subray at angle ``gamma`` off the beam axis."""
    if not gamma0 > 0:
        raise ValueError("divergence half-angle must be positive")
    g = np.exp(-2.0 * np.square(gamma) / gamma0 ** 2)
    return float(g) if np.ndim(g) == 0 else g


@dataclass(frozen=True)
class BeamProfile:
    gamma0: float
    subray_count: int
    angles: tuple  # (γ_i, φ_i) pairs, central ray first
    weights: tuple

    @classmethod
    def preset(cls, gamma0: float, subray_count: int) -> "BeamProfile":
        """Concentric ring layouts: 1 = central ray, 7 = 1+6 at γ₀, 37 = 1+6+12+18 at γ₀/3, 2γ₀/3, γ₀."""
        if subray_count not in SUPPORTED_SUBRAY_COUNTS:
            raise ValueError(f"unsupported subray count {subray_count}; use one of {SUPPORTED_SUBRAY_COUNTS}")
        if not gamma0 > 0:
            raise ValueError("divergence half-angle must be positive")
        rings = {1: [], 7: [(1.0, 6)], 37: [(1 / 3, 6), (2 / 3, 12), (1.0, 18)]}[subray_count]
        angles = [(0.0, 0.0)]
        for frac, n in rings:
            angles += [(frac * gamma0, 2.0 * math.pi * k / n) for k in range(n)]
        weights = tuple(subray_weight(g, gamma0) for g, _ in angles)
        return cls(float(gamma0), subray_count, tuple(angles), weights)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights)

    @property
    def weight_sum(self) -> float:
        return float(np.sum(self.weights))


def orthonormal_frame(d: np.ndarray):
    """Two unit vectors spanning the plane orthogonal to ``d`` (smallest-component construction)."""
    d = np.asarray(d, dtype=np.float64)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(d)))] = 1.0
    u = np.cross(d, axis)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def subray_directions(central_dirs: np.ndarray, profile: BeamProfile) -> np.ndarray:
    """Subray directions for many beams at once: (n, 3) → (n, M, 3)."""
    d = np.asarray(central_dirs, dtype=np.float64).reshape(-1, 3)
    idx = np.argmin(np.abs(d), axis=1)
    axis = np.zeros_like(d)
    axis[np.arange(len(d)), idx] = 1.0
    u = np.cross(d, axis)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(d, u)
    ang = np.asarray(profile.angles)
    gam, phi = ang[:, 0], ang[:, 1]
    out = (np.cos(gam)[None, :, None] * d[:, None, :]
           + (np.sin(gam) * np.cos(phi))[None, :, None] * u[:, None, :]
           + (np.sin(gam) * np.sin(phi))[None, :, None] * v[:, None, :])
    return out / np.linalg.norm(out, axis=2, keepdims=True)


@dataclass(frozen=True, eq=False)
class Beam:
    central: Ray
    profile: BeamProfile
    subrays: tuple

    @property
    def directions(self) -> np.ndarray:
        return np.array([r.direction for r in self.subrays])


def make_beam(central: Ray, gamma0: float, subray_count: int) -> Beam:
    profile = BeamProfile.preset(gamma0, subray_count)
    dirs = subray_directions(central.direction[None], profile)[0]
    dirs[0] = central.direction
    return Beam(central, profile, tuple(Ray(central.origin, di) for di in dirs))
