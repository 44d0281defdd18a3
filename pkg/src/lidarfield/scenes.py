"""Small synthetic scenes used by tests, examples and the closed-loop protocol."""

from __future__ import annotations

import math

import numpy as np

from .geometry import TriangleMesh


def quad(corners, reflectance: float = 0.5, transmissivity: float = 0.0) -> TriangleMesh:
    """Two triangles over four corners given in winding order."""
    v = np.asarray(corners, dtype=np.float64).reshape(4, 3)
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), np.full(2, reflectance), np.full(2, transmissivity))


def wall(distance: float = 10.0, half_size: float = 20.0, reflectance: float = 0.5) -> TriangleMesh:
    """Plane x = distance facing the origin, spanning |y|, |z| ≤ half_size."""
    s = half_size
    return quad([(distance, -s, -s), (distance, s, -s), (distance, s, s), (distance, -s, s)], reflectance)


def slanted_plane(distance: float = 50.0, incidence_deg: float = 60.0, half_size: float = 200.0,
                  reflectance: float = 0.5) -> TriangleMesh:
    """Plane through (distance, 0, 0) whose normal is tilted from -x by ``incidence_deg`` about z.

    A ray from the origin along +x meets it at range ``distance`` with that incidence angle.
    """
    a = math.radians(incidence_deg)
    n = np.array([-math.cos(a), -math.sin(a), 0.0])
    t = np.array([-math.sin(a), math.cos(a), 0.0])  # in-plane, orthogonal to z
    z = np.array([0.0, 0.0, 1.0])
    c = np.array([distance, 0.0, 0.0])
    s = half_size
    assert abs(n @ t) < 1e-12
    return quad([c - s * t - s * z, c + s * t - s * z, c + s * t + s * z, c - s * t + s * z], reflectance)


def edge_scene(near: float = 10.0, far: float = 20.0, edge_y: float = 0.0, half_size: float = 20.0,
               reflectance: float = 0.5) -> TriangleMesh:
    """A near plane covering y ≤ edge_y in front of a far plane covering everything."""
    s = half_size
    front = quad([(near, -s, -s), (near, edge_y, -s), (near, edge_y, s), (near, -s, s)], reflectance)
    back = wall(far, half_size=s * far / near, reflectance=reflectance)
    return TriangleMesh.concatenate([front, back])


def box_scene(half_extents=(8.0, 6.0, 3.0), center=(0.0, 0.0, 0.0), reflectance=0.5) -> TriangleMesh:
    """Closed axis-aligned box (12 triangles) with optional per-face reflectance (6 values: -x,+x,-y,+y,-z,+z)."""
    hx, hy, hz = half_extents
    c = np.asarray(center, dtype=np.float64)
    v = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) + c
    # vertex index = 4*ix + 2*iy + iz
    faces = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    refl = np.broadcast_to(np.asarray(reflectance, dtype=np.float64), (6,))
    tris, face_refl = [], []
    for f, r in zip(faces, refl):
        tris += [(f[0], f[1], f[2]), (f[0], f[2], f[3])]
        face_refl += [r, r]
    return TriangleMesh(v, np.array(tris), np.array(face_refl))


SCENE_BUILDERS = {
    "wall": wall,
    "slanted": slanted_plane,
    "edge": edge_scene,
    "box": box_scene,
}
