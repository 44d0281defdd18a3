"""Volumetric fields mapping 3-D points to (density, reflectance, drop probability)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numba import njit
from scipy.special import expit


class FieldSampler(Protocol):
    def sample(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(..., 3) points → σ ≥ 0 (1/m), ρ ∈ [0,1], p_d ∈ [0,1], each shaped (...)."""
        ...


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


CHANNELS = ("sigma", "reflectance", "drop")


@dataclass
class _InterpCache:
    idx: np.ndarray       # (P, 8) flat vertex indices
    wt: np.ndarray        # (P, 8) trilinear weights, zero for outside points
    inside: np.ndarray    # (P,)
    raw: np.ndarray       # (3, P) interpolated pre-activation values


class VoxelGridField:
    """Trilinearly interpolated vertex grid of raw values; σ = softplus, ρ and p_d = sigmoid.

    ``params`` has shape (3, nx, ny, nz) holding raw σ, ρ and p_d. Points outside ``bounds``
    read as empty space (0, 0, 1) and receive no gradient.
    """

    def __init__(self, bounds, resolution, params=None, init_sigma=0.01, init_reflectance=0.5,
                 init_drop=0.12):
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
        if np.any(hi <= lo):
            raise ValueError("field bounds must have positive extent")
        res = tuple(int(r) for r in resolution)
        if len(res) != 3 or min(res) < 2:
            raise ValueError("resolution needs at least 2 vertices per axis")
        self.lo, self.hi, self.resolution = lo, hi, res
        self.cell = (hi - lo) / (np.asarray(res) - 1)
        if params is None:
            params = np.empty((3,) + res)
            params[0] = inverse_softplus(init_sigma)
            params[1] = logit(init_reflectance)
            params[2] = logit(init_drop)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (3,) + res:
            raise ValueError(f"params must have shape {(3,) + res}")
        self.params = params.copy()

    @property
    def bounds(self):
        return self.lo.copy(), self.hi.copy()

    @property
    def n_vertices(self) -> int:
        return int(np.prod(self.resolution))

    def copy(self) -> "VoxelGridField":
        return VoxelGridField((self.lo, self.hi), self.resolution, self.params)

    def _interp(self, points) -> _InterpCache:
        p = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        idx, wt, inside, raw = _trilinear(p, self.lo, self.cell, np.asarray(self.resolution, dtype=np.int64),
                                          np.ascontiguousarray(self.params.reshape(3, -1)))
        return _InterpCache(idx, wt, inside, raw)

    def evaluate(self, points):
        """Like :meth:`sample` on flat (P, 3) points, also returning the cache for :meth:`vjp`."""
        c = self._interp(points)
        sigma = np.where(c.inside, softplus(c.raw[0]), 0.0)
        rho = np.where(c.inside, expit(c.raw[1]), 0.0)
        drop = np.where(c.inside, expit(c.raw[2]), 1.0)
        return sigma, rho, drop, c

    def vjp(self, cache: _InterpCache, g_sigma, g_rho, g_drop) -> np.ndarray:
        """Pull per-point output gradients back to a (3, nx, ny, nz) parameter gradient."""
        raw = cache.raw
        s_rho, s_drop = expit(raw[1]), expit(raw[2])
        g_raw = np.stack([
            np.asarray(g_sigma) * expit(raw[0]),
            np.asarray(g_rho) * s_rho * (1.0 - s_rho),
            np.asarray(g_drop) * s_drop * (1.0 - s_drop),
        ])
        g_raw[:, ~cache.inside] = 0.0
        out = _scatter(cache.idx, cache.wt, np.ascontiguousarray(g_raw), self.n_vertices)
        return out.reshape(self.params.shape)

    def sample(self, points):
        pts = np.asarray(points, dtype=np.float64)
        sigma, rho, drop, _ = self.evaluate(pts.reshape(-1, 3))
        shape = pts.shape[:-1]
        return sigma.reshape(shape), rho.reshape(shape), drop.reshape(shape)

    def channel(self, name: str) -> np.ndarray:
        raw = self.params[CHANNELS.index(name)]
        return softplus(raw) if name == "sigma" else expit(raw)


@njit(cache=True, nogil=True)
def _trilinear(p, lo, cell, res, flat):
    n = p.shape[0]
    idx = np.empty((n, 8), dtype=np.int64)
    wt = np.zeros((n, 8))
    inside = np.empty(n, dtype=np.bool_)
    raw = np.zeros((3, n))
    sy, sz = res[1] * res[2], res[2]
    i0 = np.empty(3, dtype=np.int64)
    f = np.empty(3)
    for q in range(n):
        ok = True
        for a in range(3):
            u = (p[q, a] - lo[a]) / cell[a]
            if not (u >= 0.0 and u <= res[a] - 1):
                ok = False
            i = np.int64(np.floor(u)) if u == u else 0
            i = min(max(i, 0), res[a] - 2)
            i0[a] = i
            f[a] = min(max(u - i, 0.0), 1.0) if u == u else 0.0
        inside[q] = ok
        base = i0[0] * sy + i0[1] * sz + i0[2]
        k = 0
        for dx in range(2):
            wx = f[0] if dx else 1.0 - f[0]
            for dy in range(2):
                wy = f[1] if dy else 1.0 - f[1]
                for dz in range(2):
                    wz = f[2] if dz else 1.0 - f[2]
                    j = base + dx * sy + dy * sz + dz
                    idx[q, k] = j
                    if ok:
                        w = wx * wy * wz
                        wt[q, k] = w
                        for c in range(3):
                            raw[c, q] += w * flat[c, j]
                    k += 1
    return idx, wt, inside, raw


@njit(cache=True, nogil=True)
def _scatter(idx, wt, g, n_vertices):
    out = np.zeros((3, n_vertices))
    for q in range(idx.shape[0]):
        for k in range(8):
            w = wt[q, k]
            if w != 0.0:
                j = idx[q, k]
                for c in range(3):
                    out[c, j] += w * g[c, q]
    return out


@dataclass
class SlabField:
    """Analytic field that depends on one coordinate only: a list of (start, end, σ, ρ, p_d) slabs.

    Space outside every slab is empty (σ=0, ρ=0, p_d=``background_drop``). Handy as an exact
    oracle for range rendering along rays parallel to ``axis``.
    """

    slabs: list
    axis: int = 0
    background_drop: float = 0.0

    def sample(self, points):
        x = np.asarray(points, dtype=np.float64)[..., self.axis]
        sigma = np.zeros(x.shape)
        rho = np.zeros(x.shape)
        drop = np.full(x.shape, float(self.background_drop))
        for a, b, s, r, d in self.slabs:
            m = (x >= a) & (x < b)
            sigma[m], rho[m], drop[m] = s, r, d
        return sigma, rho, drop


@dataclass
class FunctionField:
    """Wraps a vectorized callable ``fn(points (..., 3)) -> (σ, ρ, p_d)``."""

    fn: object
    bounds: tuple | None = None

    def sample(self, points):
        return self.fn(np.asarray(points, dtype=np.float64))
