import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarfield.geometry import SurfelCloud, TriangleMesh, load_scene, save_mesh_ply, save_surfels_ply
from lidarfield.plyio import SceneLoadError, read_ply, write_ply, write_obj

MIN_PLY = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
0 1 0
3 0 1 2
"""

CUBE_OBJ = "\n".join(
    [f"v {x} {y} {z}" for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    + ["f 1 2 4 3", "f 5 7 8 6", "f 1 5 6 2", "f 3 4 8 7", "f 1 3 7 5", "f 2 6 8 4"]
) + "\n"


def test_minimal_ascii_ply(tmp_path):
    p = tmp_path / "tri.ply"
    p.write_text(MIN_PLY)
    mesh = load_scene(p)
    assert isinstance(mesh, TriangleMesh) and len(mesh) == 1
    assert mesh.reflectance[0] == 0.5  # default when the file has none


def test_obj_cube_has_twelve_triangles(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    assert len(load_scene(p)) == 12


def test_out_of_range_index_reports_context(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text(MIN_PLY.replace("3 0 1 2", "3 0 1 7"))
    with pytest.raises(SceneLoadError, match="face 0"):
        load_scene(p)
    q = tmp_path / "bad.obj"
    q.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(SceneLoadError, match="line 4"):
        load_scene(q)


def test_empty_and_degenerate_scenes(tmp_path):
    p = tmp_path / "empty.obj"
    p.write_text("v 0 0 0\n")
    with pytest.raises(SceneLoadError):
        load_scene(p)
    q = tmp_path / "flat.obj"
    q.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(SceneLoadError, match="degenerate"):
        load_scene(q)
    with pytest.raises(SceneLoadError):
        load_scene(tmp_path / "missing.ply")


def test_malformed_header_line_number(tmp_path):
    p = tmp_path / "h.ply"
    p.write_text(MIN_PLY.replace("property float y", "property quux y"))
    with pytest.raises(SceneLoadError, match="line 5"):
        read_ply(p)


@given(st.integers(1, 40), st.booleans(), st.integers(0, 2 ** 31))
def test_ply_round_trip(n, binary, seed):
    import tempfile, os
    rng = np.random.default_rng(seed)
    props = {"x": rng.normal(size=n).astype("<f4"), "y": rng.normal(size=n), "k": rng.integers(0, 9, n).astype("<i4")}
    fd, path = tempfile.mkstemp(suffix=".ply")
    os.close(fd)
    try:
        write_ply(path, {"vertex": props}, binary=binary)
        back = read_ply(path)["vertex"]
    finally:
        os.unlink(path)
    for k, v in props.items():
        np.testing.assert_array_equal(np.asarray(back[k]).astype(v.dtype), v)


def test_mesh_and_surfel_save_load(tmp_path, rng):
    V = rng.normal(size=(10, 3))
    F = np.array([[0, 1, 2], [3, 4, 5], [6, 7, 8], [1, 3, 9]])
    mesh = TriangleMesh(V, F, np.linspace(0.1, 0.9, 4))
    save_mesh_ply(tmp_path / "m.ply", mesh)
    back = load_scene(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.triangles, F)
    np.testing.assert_allclose(back.reflectance, mesh.reflectance, rtol=1e-6)
    write_obj(tmp_path / "m.obj", V, F)
    np.testing.assert_allclose(load_scene(tmp_path / "m.obj").vertices, V)

    n = rng.normal(size=(5, 3))
    cloud = SurfelCloud(rng.normal(size=(5, 3)), n / np.linalg.norm(n, axis=1, keepdims=True), 0.06, 0.4)
    save_surfels_ply(tmp_path / "s.ply", cloud)
    got = load_scene(tmp_path / "s.ply")
    assert isinstance(got, SurfelCloud) and len(got) == 5
    np.testing.assert_allclose(got.radii, 0.06, rtol=1e-6)


def test_surfel_ply_requires_normals(tmp_path):
    write_ply(tmp_path / "p.ply", {"vertex": {"x": np.zeros(2), "y": np.zeros(2), "z": np.zeros(2)}})
    with pytest.raises(SceneLoadError, match="nx"):
        load_scene(tmp_path / "p.ply")
