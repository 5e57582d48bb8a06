"""OBJ/PLY mesh I/O and the binary ground-truth field dump."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import GeometryError, PointCloud, TriangleMesh

FIELD_MAGIC = b"NVF1"

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for j in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[j], idx[j + 1]))
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = ["v %.9g %.9g %.9g" % tuple(v) for v in mesh.vertices]
    lines += ["f %d %d %d" % tuple(t + 1) for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_ply(path) -> TriangleMesh:
    """Binary little-endian PLY with float vertex positions and optional faces."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise GeometryError(f"{path}: not a PLY file")
        elements = []
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise GeometryError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise GeometryError(f"{path}: only binary_little_endian PLY is supported")
        data = fh.read()

    off = 0
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if all(p[0] != "list" for p in props):
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], -1).astype(np.float64)
            continue
        # list properties force a sequential walk
        tris = []
        for _ in range(count):
            for p in props:
                if p[0] == "list":
                    ct = np.dtype("<" + _PLY_TYPES[p[1]])
                    it = np.dtype("<" + _PLY_TYPES[p[2]])
                    n = int(np.frombuffer(data, ct, 1, off)[0])
                    off += ct.itemsize
                    idx = np.frombuffer(data, it, n, off).astype(np.int64)
                    off += it.itemsize * n
                    if name == "face" and p[-1] in ("vertex_indices", "vertex_index"):
                        for j in range(1, n - 1):
                            tris.append((idx[0], idx[j], idx[j + 1]))
                else:
                    off += np.dtype(_PLY_TYPES[p[0]]).itemsize
        if name == "face":
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(verts, faces)


def write_ply(mesh: TriangleMesh, path) -> None:
    header = [
        "ply", "format binary_little_endian 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x", "property float y", "property float z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices", "end_header",
    ]
    body = mesh.vertices.astype("<f4").tobytes()
    rec = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    rec["n"] = 3
    rec["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(body)
        fh.write(rec.tobytes())


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise GeometryError(f"unsupported mesh format: {suffix}")


def write_mesh(mesh: TriangleMesh, path) -> None:
    if Path(path).suffix.lower() == ".ply":
        write_ply(mesh, path)
    else:
        write_obj(mesh, path)


def read_cloud(path) -> PointCloud:
    return PointCloud(read_mesh(path).vertices)


def write_cloud(cloud: PointCloud, path) -> None:
    write_mesh(TriangleMesh(cloud.points, np.zeros((0, 3), dtype=np.int64)), path)


def write_field_dump(path, queries, displacements) -> None:
    """``NVF1`` + u64 count + count x (q, dq) as little-endian float32."""
    q = np.asarray(queries, dtype="<f4").reshape(-1, 3)
    d = np.asarray(displacements, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<Q", len(q)))
        fh.write(np.concatenate([q, d], axis=1).tobytes())


def read_field_dump(path):
    raw = Path(path).read_bytes()
    if raw[:4] != FIELD_MAGIC:
        raise GeometryError(f"{path}: bad magic {raw[:4]!r}")
    (n,) = struct.unpack("<Q", raw[4:12])
    rec = np.frombuffer(raw, dtype="<f4", count=6 * n, offset=12).reshape(n, 6)
    return rec[:, :3].astype(np.float64), rec[:, 3:].astype(np.float64)
