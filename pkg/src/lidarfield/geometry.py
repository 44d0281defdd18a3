"""Scene primitives, scene loading, BVH construction and ray casting.

Triangle meshes and disk surfels share one flat BVH layout and one traversal kernel;
``kind`` selects the primitive test in the leaves.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numba
import numpy as np

from .plyio import SceneLoadError, read_obj, read_ply, write_ply
from .types import Ray

DEFAULT_REFLECTANCE = 0.5
KIND_TRIANGLE = 0
KIND_SURFEL = 1
_DET_EPS = 1e-9
_DUP_EPS = 1e-9


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    reflectance: Optional[np.ndarray] = None
    transmissivity: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        nf = len(self.triangles)
        if self.reflectance is None:
            self.reflectance = np.full(nf, DEFAULT_REFLECTANCE)
        self.reflectance = np.broadcast_to(np.asarray(self.reflectance, dtype=np.float64), (nf,)).copy()
        if self.transmissivity is None:
            self.transmissivity = np.zeros(nf)
        self.transmissivity = np.broadcast_to(np.asarray(self.transmissivity, dtype=np.float64), (nf,)).copy()
        if nf and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise SceneLoadError("triangle vertex index out of range")
        if np.any((self.reflectance < 0) | (self.reflectance > 1)):
            raise SceneLoadError("reflectance must lie in [0, 1]")
        if np.any((self.transmissivity < 0) | (self.transmissivity > 1)):
            raise SceneLoadError("transmissivity must lie in [0, 1]")
        # load-time filtering of zero-area triangles
        keep = self.areas() > 1e-12
        if not np.all(keep):
            self.triangles = self.triangles[keep]
            self.reflectance = self.reflectance[keep]
            self.transmissivity = self.transmissivity[keep]

    def __len__(self):
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, tris, refl, trans, off = [], [], [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            refl.append(m.reflectance)
            trans.append(m.transmissivity)
            off += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris), np.concatenate(refl),
                            np.concatenate(trans))

    def scaled_reflectance(self, k: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, self.reflectance * k, self.transmissivity)


@dataclass(frozen=True, eq=False)
class Surfel:
    center: np.ndarray
    normal: np.ndarray
    radius: float
    reflectance: float = DEFAULT_REFLECTANCE

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("surfel normal must be unit length")
        if not self.radius > 0:
            raise ValueError("surfel radius must be positive")
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValueError("reflectance must lie in [0, 1]")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "normal", n)


@dataclass(eq=False)
class SurfelCloud:
    """Array-of-disks storage; indexing yields :class:`Surfel` records."""

    centers: np.ndarray
    normals: np.ndarray
    radii: np.ndarray
    reflectance: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(n, 3)
        self.radii = np.broadcast_to(np.asarray(self.radii, dtype=np.float64), (n,)).copy()
        self.reflectance = np.broadcast_to(np.asarray(self.reflectance, dtype=np.float64), (n,)).copy()
        if n and np.max(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0)) > 1e-9:
            raise SceneLoadError("surfel normals must be unit length")
        if np.any(self.radii <= 0):
            raise SceneLoadError("surfel radius must be positive")
        if np.any((self.reflectance < 0) | (self.reflectance > 1)):
            raise SceneLoadError("reflectance must lie in [0, 1]")

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i) -> Surfel:
        return Surfel(self.centers[i], self.normals[i], float(self.radii[i]), float(self.reflectance[i]))

    @classmethod
    def from_surfels(cls, surfels) -> "SurfelCloud":
        surfels = list(surfels)
        return cls(np.array([s.center for s in surfels]).reshape(-1, 3),
                   np.array([s.normal for s in surfels]).reshape(-1, 3),
                   np.array([s.radius for s in surfels]), np.array([s.reflectance for s in surfels]))


@dataclass(frozen=True)
class SurfaceHit:
    range: float
    cos_incidence: float
    reflectance: float
    hit_point: np.ndarray
    primitive: int = -1
    transmissivity: float = 0.0


# --------------------------------------------------------------------------- loading

def load_scene(path, format: Optional[str] = None) -> Union[TriangleMesh, SurfelCloud]:
    """Load ``mesh-ply``, ``mesh-obj`` or ``surfel-ply``; the format is inferred when omitted."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise SceneLoadError(f"{path}: no such file")
    if format is None:
        if path.lower().endswith(".obj"):
            format = "mesh-obj"
        else:
            data = read_ply(path)
            format = "mesh-ply" if "face" in data and len(_face_indices(data["face"])) else "surfel-ply"
            return _mesh_or_surfels_from_ply(data, format, path)
    if format == "mesh-obj":
        V, F = read_obj(path)
        if len(F) == 0:
            raise SceneLoadError(f"{path}: scene contains no triangles")
        mesh = TriangleMesh(V, F)
        if len(mesh) == 0:
            raise SceneLoadError(f"{path}: scene contains only degenerate triangles")
        return mesh
    if format in ("mesh-ply", "surfel-ply"):
        return _mesh_or_surfels_from_ply(read_ply(path), format, path)
    raise SceneLoadError(f"unknown scene format '{format}'")


def _face_indices(face: dict):
    for key in ("vertex_indices", "vertex_index"):
        if key in face:
            return face[key]
    return []


def _mesh_or_surfels_from_ply(data, format, path):
    if "vertex" not in data:
        raise SceneLoadError(f"{path}: no vertex element")
    v = data["vertex"]
    try:
        xyz = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    except KeyError:
        raise SceneLoadError(f"{path}: vertex element lacks x/y/z")
    if format == "surfel-ply":
        if len(xyz) == 0:
            raise SceneLoadError(f"{path}: scene contains no surfels")
        for key in ("nx", "ny", "nz", "radius"):
            if key not in v:
                raise SceneLoadError(f"{path}: surfel vertex lacks '{key}'")
        n = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
        norms = np.linalg.norm(n, axis=1)
        if np.any(norms < 1e-6):
            raise SceneLoadError(f"{path}: surfel with zero normal")
        n /= norms[:, None]
        refl = v.get("reflectance", np.full(len(xyz), DEFAULT_REFLECTANCE))
        try:
            return SurfelCloud(xyz, n, v["radius"], refl)
        except SceneLoadError as exc:
            raise SceneLoadError(f"{path}: {exc}")
    face = data.get("face", {})
    idx = _face_indices(face)
    if isinstance(idx, list):
        tris, src = [], []
        for k, poly in enumerate(idx):
            for a in range(1, len(poly) - 1):
                tris.append((poly[0], poly[a], poly[a + 1]))
                src.append(k)
        F = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
        src = np.asarray(src, dtype=np.int64)
    else:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.shape[1] == 3:
            F, src = idx, np.arange(len(idx))
        else:
            fan = [np.stack([idx[:, 0], idx[:, a], idx[:, a + 1]], 1) for a in range(1, idx.shape[1] - 1)]
            F = np.concatenate(fan)
            src = np.tile(np.arange(len(idx)), len(fan))
    if len(F) == 0:
        raise SceneLoadError(f"{path}: scene contains no triangles")
    bad = (F < 0) | (F >= len(xyz))
    if bad.any():
        k = int(src[np.argmax(bad.any(axis=1))])
        raise SceneLoadError(f"{path}: face {k}: vertex index out of range")
    if "reflectance" in face:
        refl = np.asarray(face["reflectance"], dtype=np.float64)[src]
    elif "reflectance" in v:
        refl = np.asarray(v["reflectance"], dtype=np.float64)[F].mean(axis=1)
    else:
        refl = None
    trans = np.asarray(face["transmissivity"], dtype=np.float64)[src] if "transmissivity" in face else None
    try:
        mesh = TriangleMesh(xyz, F, refl, trans)
    except SceneLoadError as exc:
        raise SceneLoadError(f"{path}: {exc}")
    if len(mesh) == 0:
        raise SceneLoadError(f"{path}: scene contains only degenerate triangles")
    return mesh


def save_mesh_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    write_ply(path, {
        "vertex": {"x": mesh.vertices[:, 0], "y": mesh.vertices[:, 1], "z": mesh.vertices[:, 2]},
        "face": {"vertex_indices": mesh.triangles.astype(np.int32),
                 "reflectance": mesh.reflectance.astype(np.float32)},
    }, binary=binary)


def save_surfels_ply(path, surfels: SurfelCloud, binary: bool = True) -> None:
    c, n = surfels.centers, surfels.normals
    write_ply(path, {"vertex": {
        "x": c[:, 0], "y": c[:, 1], "z": c[:, 2], "nx": n[:, 0], "ny": n[:, 1], "nz": n[:, 2],
        "radius": surfels.radii, "reflectance": surfels.reflectance,
    }}, binary=binary)


# --------------------------------------------------------------------------- BVH

def _primitive_bounds(kind, p0, p1, p2):
    if kind == KIND_TRIANGLE:
        v0, v1, v2 = p0, p0 + p1, p0 + p2
        lo = np.minimum(np.minimum(v0, v1), v2)
        hi = np.maximum(np.maximum(v0, v1), v2)
        cent = (v0 + v1 + v2) / 3.0
    else:
        r = p2[:, 0:1]
        ext = r * np.sqrt(np.clip(1.0 - p1 ** 2, 0.0, 1.0))
        lo, hi, cent = p0 - ext, p0 + ext, p0
    pad = 1e-9 * (1.0 + np.abs(lo).max(axis=1, keepdims=True))
    return lo - pad, hi + pad, cent


def _build_nodes(lo, hi, cent, leaf_size):
    n = len(lo)
    order = np.arange(n, dtype=np.int64)
    node_lo, node_hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        node_lo.append(lo[idx].min(axis=0))
        node_hi.append(hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(left) - 1

    root = new_node(0, n)
    stack = [(root, 0, n)]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        idx = order[s:e]
        c = cent[idx]
        extent = c.max(axis=0) - c.min(axis=0)
        axis = int(np.argmax(extent))
        if extent[axis] <= 0.0:
            continue  # coincident centroids: keep as a (large) leaf
        mid = (e - s) // 2
        part = np.argpartition(c[:, axis], mid, kind="introselect")
        order[s:e] = idx[part]
        m = s + mid
        lchild = new_node(s, m)
        rchild = new_node(m, e)
        left[node], right[node], count[node] = lchild, rchild, 0
        stack.append((rchild, m, e))
        stack.append((lchild, s, m))
    return (np.array(node_lo), np.array(node_hi), np.array(left, np.int64), np.array(right, np.int64),
            np.array(start, np.int64), np.array(count, np.int64), order)


class AcceleratedScene:
    """Immutable primitive set plus a flat bounding-volume hierarchy.

    Triangles are stored as (v0, e1, e2); surfels as (center, normal, (radius, 0, 0)).
    """

    def __init__(self, kind, p0, p1, p2, normals, reflectance, transmissivity, leaf_size=4):
        if len(p0) == 0:
            raise ValueError("cannot build a BVH over zero primitives")
        self.kind = int(kind)
        self.p0, self.p1, self.p2 = (np.ascontiguousarray(a, dtype=np.float64) for a in (p0, p1, p2))
        self.normals = np.ascontiguousarray(normals, dtype=np.float64)
        self.reflectance = np.asarray(reflectance, dtype=np.float64)
        self.transmissivity = np.asarray(transmissivity, dtype=np.float64)
        lo, hi, cent = _primitive_bounds(self.kind, self.p0, self.p1, self.p2)
        (self.node_lo, self.node_hi, self.node_left, self.node_right, self.node_start,
         self.node_count, self.order) = _build_nodes(lo, hi, cent, leaf_size)
        self.prim_lo, self.prim_hi = lo, hi
        for a in (self.p0, self.p1, self.p2, self.normals, self.reflectance, self.transmissivity,
                  self.node_lo, self.node_hi, self.order):
            a.setflags(write=False)

    @property
    def n_primitives(self) -> int:
        return len(self.p0)

    @property
    def n_nodes(self) -> int:
        return len(self.node_left)

    @property
    def opaque(self) -> bool:
        return not np.any(self.transmissivity > 0)

    @property
    def bounds(self):
        return self.node_lo[0].copy(), self.node_hi[0].copy()

    def leaves(self):
        return np.flatnonzero(self.node_left < 0)

    def cast_batch(self, origins, directions, min_range, max_range, max_hits=8, threads=1, chunk=8192):
        """Cast many rays; returns (ranges (n,K) inf-padded, prim ids (n,K) -1-padded, counts (n,))."""
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(o)
        out_t = np.full((n, max_hits), np.inf)
        out_id = np.full((n, max_hits), -1, dtype=np.int64)
        out_n = np.zeros(n, dtype=np.int64)

        def work(s):
            e = min(s + chunk, n)
            _cast_kernel(self.kind, self.node_lo, self.node_hi, self.node_left, self.node_right,
                         self.node_start, self.node_count, self.order, self.p0, self.p1, self.p2,
                         o[s:e], d[s:e], float(min_range), float(max_range),
                         out_t[s:e], out_id[s:e], out_n[s:e])

        starts = range(0, n, chunk)
        if threads > 1 and n > chunk:
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(work, starts))
        else:
            for s in starts:
                work(s)
        return out_t, out_id, out_n

    def hit_attributes(self, directions, prim_ids):
        """cos(incidence), reflectance and transmissivity for (n, K) hit ids (-1 → 0)."""
        ids = np.maximum(prim_ids, 0)
        cosi = np.abs(np.sum(self.normals[ids] * directions[:, None, :], axis=-1))
        cosi = np.clip(cosi, 1e-12, 1.0)
        valid = prim_ids >= 0
        return (np.where(valid, cosi, 0.0), np.where(valid, self.reflectance[ids], 0.0),
                np.where(valid, self.transmissivity[ids], 0.0))

    def cast_ray(self, ray: Ray, min_range: float, max_range: float, max_hits: int = 64) -> list[SurfaceHit]:
        t, ids, cnt = self.cast_batch(ray.origin[None], ray.direction[None], min_range, max_range, max_hits)
        return self._hits_from_arrays(ray, t[0, :cnt[0]], ids[0, :cnt[0]])

    def _hits_from_arrays(self, ray, t, ids):
        cosi, refl, trans = self.hit_attributes(ray.direction[None], ids[None])
        return [SurfaceHit(float(t[k]), float(cosi[0, k]), float(refl[0, k]), ray.origin + t[k] * ray.direction,
                           int(ids[k]), float(trans[0, k])) for k in range(len(t))]


def build_bvh(primitives, leaf_size: int = 4) -> AcceleratedScene:
    """Build an :class:`AcceleratedScene` from a mesh or a surfel collection."""
    if isinstance(primitives, TriangleMesh):
        if len(primitives) == 0:
            raise ValueError("cannot build a BVH over zero primitives")
        v = primitives.vertices[primitives.triangles]
        e1, e2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
        nrm = np.cross(e1, e2)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return AcceleratedScene(KIND_TRIANGLE, v[:, 0], e1, e2, nrm, primitives.reflectance,
                                primitives.transmissivity, leaf_size)
    if not isinstance(primitives, SurfelCloud):
        primitives = SurfelCloud.from_surfels(primitives)
    if len(primitives) == 0:
        raise ValueError("cannot build a BVH over zero primitives")
    p2 = np.zeros((len(primitives), 3))
    p2[:, 0] = primitives.radii
    return AcceleratedScene(KIND_SURFEL, primitives.centers, primitives.normals, p2, primitives.normals,
                            primitives.reflectance, np.zeros(len(primitives)), leaf_size)


def cast_ray(scene: AcceleratedScene, ray: Ray, min_range: float, max_range: float) -> list[SurfaceHit]:
    return scene.cast_ray(ray, min_range, max_range)


def cast_ray_brute_force(scene: AcceleratedScene, ray: Ray, min_range: float, max_range: float,
                         max_hits: int = 64) -> list[SurfaceHit]:
    """Reference caster testing every primitive with vectorized numpy; no hierarchy involved."""
    o, d = ray.origin, ray.direction
    if scene.kind == KIND_TRIANGLE:
        v0, e1, e2 = scene.p0, scene.p1, scene.p2
        pvec = np.cross(np.broadcast_to(d, e2.shape), e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) >= _DET_EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0)
    else:
        c, nrm, r = scene.p0, scene.p1, scene.p2[:, 0]
        den = nrm @ d
        ok = np.abs(den) >= 1e-12
        t = np.where(ok, np.einsum("ij,ij->i", c - o, nrm) / np.where(ok, den, 1.0), -1.0)
        p = o + t[:, None] * d - c
        ok &= np.einsum("ij,ij->i", p, p) <= r * r
    ok &= (t >= min_range) & (t <= max_range)
    ids = np.flatnonzero(ok)
    ts = t[ids]
    srt = np.lexsort((ids, ts))
    ts, ids = ts[srt], ids[srt]
    keep_t, keep_id = [], []
    for tk, ik in zip(ts, ids):
        dup = [j for j, tj in enumerate(keep_t) if abs(tj - tk) < _DUP_EPS]
        if dup:
            j = dup[0]
            if ik < keep_id[j]:
                keep_id[j] = ik
            continue
        keep_t.append(tk)
        keep_id.append(ik)
    keep_t, keep_id = np.array(keep_t[:max_hits]), np.array(keep_id[:max_hits], dtype=np.int64)
    return scene._hits_from_arrays(ray, keep_t, keep_id)


# --------------------------------------------------------------------------- kernels

@numba.njit(cache=True, nogil=True)
def _insert_hit(t, pid, buf_t, buf_id, cnt, kmax):
    for k in range(cnt):
        if abs(buf_t[k] - t) < _DUP_EPS:
            if pid < buf_id[k]:
                buf_id[k] = pid
            return cnt
    if cnt == kmax:
        if t >= buf_t[kmax - 1]:
            return cnt
        cnt -= 1
    k = cnt
    while k > 0 and buf_t[k - 1] > t:
        buf_t[k] = buf_t[k - 1]
        buf_id[k] = buf_id[k - 1]
        k -= 1
    buf_t[k] = t
    buf_id[k] = pid
    return cnt + 1


@numba.njit(cache=True, nogil=True)
def _box_entry(lo, hi, o, d):
    tn = -np.inf
    tf = np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return np.inf
        else:
            inv = 1.0 / d[a]
            t1 = (lo[a] - o[a]) * inv
            t2 = (hi[a] - o[a]) * inv
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tn:
                tn = t1
            if t2 < tf:
                tf = t2
    if tn > tf or tf < 0.0:
        return np.inf
    return tn


@numba.njit(cache=True, nogil=True)
def _intersect(kind, i, p0, p1, p2, o, d):
    if kind == 0:
        e1x, e1y, e1z = p1[i, 0], p1[i, 1], p1[i, 2]
        e2x, e2y, e2z = p2[i, 0], p2[i, 1], p2[i, 2]
        px = d[1] * e2z - d[2] * e2y
        py = d[2] * e2x - d[0] * e2z
        pz = d[0] * e2y - d[1] * e2x
        det = e1x * px + e1y * py + e1z * pz
        if abs(det) < _DET_EPS:
            return -1.0
        inv = 1.0 / det
        tx, ty, tz = o[0] - p0[i, 0], o[1] - p0[i, 1], o[2] - p0[i, 2]
        u = (tx * px + ty * py + tz * pz) * inv
        if u < 0.0 or u > 1.0:
            return -1.0
        qx = ty * e1z - tz * e1y
        qy = tz * e1x - tx * e1z
        qz = tx * e1y - ty * e1x
        v = (qx * d[0] + qy * d[1] + qz * d[2]) * inv
        if v < 0.0 or u + v > 1.0:
            return -1.0
        return (e2x * qx + e2y * qy + e2z * qz) * inv
    nx, ny, nz = p1[i, 0], p1[i, 1], p1[i, 2]
    den = nx * d[0] + ny * d[1] + nz * d[2]
    if abs(den) < 1e-12:
        return -1.0
    t = ((p0[i, 0] - o[0]) * nx + (p0[i, 1] - o[1]) * ny + (p0[i, 2] - o[2]) * nz) / den
    qx = o[0] + t * d[0] - p0[i, 0]
    qy = o[1] + t * d[1] - p0[i, 1]
    qz = o[2] + t * d[2] - p0[i, 2]
    r = p2[i, 0]
    if qx * qx + qy * qy + qz * qz <= r * r:
        return t
    return -1.0


@numba.njit(cache=True, nogil=True)
def _cast_kernel(kind, node_lo, node_hi, node_left, node_right, node_start, node_count, order,
                 p0, p1, p2, origins, dirs, tmin, tmax, out_t, out_id, out_n):
    kmax = out_t.shape[1]
    stack = np.empty(128, np.int64)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        cnt = 0
        sp = 0
        if _box_entry(node_lo[0], node_hi[0], o, d) <= tmax:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            limit = tmax
            if cnt == kmax:
                limit = min(limit, out_t[r, kmax - 1])
            if _box_entry(node_lo[node], node_hi[node], o, d) > limit:
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for k in range(s, s + node_count[node]):
                    pid = order[k]
                    t = _intersect(kind, pid, p0, p1, p2, o, d)
                    if t >= tmin and t <= tmax:
                        cnt = _insert_hit(t, pid, out_t[r], out_id[r], cnt, kmax)
            else:
                stack[sp] = node_left[node]
                stack[sp + 1] = node_right[node]
                sp += 2
        out_n[r] = cnt
