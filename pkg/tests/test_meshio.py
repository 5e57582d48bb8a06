import numpy as np
import pytest

from nvfield import fixtures as fx
from nvfield.geometry import GeometryError, PointCloud, TriangleMesh
from nvfield.meshio import (read_cloud, read_field_dump, read_mesh, read_obj, read_ply, write_cloud,
                            write_field_dump, write_mesh, write_obj, write_ply)


def test_obj_roundtrip(tmp_path):
    mesh = fx.torus()
    write_obj(mesh, tmp_path / "t.obj")
    back = read_obj(tmp_path / "t.obj")
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_allclose(back.vertices, mesh.vertices, rtol=1e-8, atol=1e-12)


def test_obj_polygons_and_negative_indices(tmp_path):
    (tmp_path / "q.obj").write_text(
        "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1 4/4/1\nf -4 -3 -2\n"
    )
    m = read_obj(tmp_path / "q.obj")
    np.testing.assert_array_equal(m.triangles, [[0, 1, 2], [0, 2, 3], [0, 1, 2]])


def test_ply_roundtrip(tmp_path):
    mesh = fx.disk()
    write_ply(mesh, tmp_path / "d.ply")
    back = read_ply(tmp_path / "d.ply")
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.vertices, mesh.vertices.astype(np.float32))


def test_ply_extra_properties(tmp_path):
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment test\n"
        "element vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\n"
        "element face 1\nproperty uchar flags\nproperty list uchar int vertex_indices\nend_header\n"
    )
    vt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1")])
    v = np.array([(0, 0, 0, 1), (1, 0, 0, 2), (0, 1, 0, 3)], dtype=vt)
    face = bytes([7, 3]) + np.array([0, 1, 2], "<i4").tobytes()
    (tmp_path / "x.ply").write_bytes(header.encode() + v.tobytes() + face)
    m = read_ply(tmp_path / "x.ply")
    np.testing.assert_array_equal(m.triangles, [[0, 1, 2]])
    np.testing.assert_array_equal(m.vertices[1], [1, 0, 0])


def test_ply_ascii_rejected(tmp_path):
    (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(GeometryError):
        read_ply(tmp_path / "a.ply")


def test_read_mesh_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_mesh(tmp_path / "missing.obj")
    (tmp_path / "m.stl").write_text("solid")
    with pytest.raises(GeometryError):
        read_mesh(tmp_path / "m.stl")


def test_cloud_roundtrip(tmp_path):
    pts = np.random.default_rng(0).random((50, 3)).astype(np.float32).astype(np.float64)
    write_cloud(PointCloud(pts), tmp_path / "c.ply")
    np.testing.assert_array_equal(read_cloud(tmp_path / "c.ply").points, pts)


def test_write_mesh_by_suffix(tmp_path):
    mesh = fx.square(n=2)
    write_mesh(mesh, tmp_path / "s.ply")
    write_mesh(mesh, tmp_path / "s.obj")
    assert (tmp_path / "s.ply").read_bytes()[:3] == b"ply"
    assert (tmp_path / "s.obj").read_text().startswith("v ")


def test_empty_mesh_roundtrip(tmp_path):
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    for name in ("e.obj", "e.ply"):
        write_mesh(empty, tmp_path / name)
        back = read_mesh(tmp_path / name)
        assert len(back) == 0 and len(back.vertices) == 0


def test_field_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    q, d = rng.random((10, 3)), rng.random((10, 3))
    write_field_dump(tmp_path / "f.bin", q, d)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"NVF1"
    assert len(raw) == 4 + 8 + 10 * 6 * 4
    q2, d2 = read_field_dump(tmp_path / "f.bin")
    np.testing.assert_array_equal(q2, q.astype(np.float32))
    np.testing.assert_array_equal(d2, d.astype(np.float32))


def test_field_dump_empty(tmp_path):
    write_field_dump(tmp_path / "e.bin", np.zeros((0, 3)), np.zeros((0, 3)))
    q, d = read_field_dump(tmp_path / "e.bin")
    assert q.shape == (0, 3) and d.shape == (0, 3)


def test_field_dump_bad_magic(tmp_path):
    (tmp_path / "b.bin").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(GeometryError):
        read_field_dump(tmp_path / "b.bin")
