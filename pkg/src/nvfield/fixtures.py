"""Analytic fixture meshes, built in unit-cube coordinates."""

import numpy as np

from .geometry import TriangleMesh


def icosphere(radius: float = 0.3, subdivisions: int = 4) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def _grid_faces(rows: int, cols: int, wrap_cols: bool, wrap_rows: bool = False):
    faces = []
    nr = rows if wrap_rows else rows - 1
    nc = cols if wrap_cols else cols - 1
    for i in range(nr):
        for j in range(nc):
            a = i * cols + j
            b = i * cols + (j + 1) % cols
            c = ((i + 1) % rows) * cols + (j + 1) % cols
            d = ((i + 1) % rows) * cols + j
            faces += [(a, b, c), (a, c, d)]
    return np.array(faces)


def torus(major: float = 0.3, minor: float = 0.1, n_major: int = 64, n_minor: int = 24) -> TriangleMesh:
    u = np.linspace(0, 2 * np.pi, n_major, endpoint=False)
    v = np.linspace(0, 2 * np.pi, n_minor, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    verts = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], -1).reshape(-1, 3)
    return TriangleMesh(verts, _grid_faces(n_major, n_minor, wrap_cols=True, wrap_rows=True))


def disk(radius: float = 0.35, rings: int = 24, sectors: int = 64) -> TriangleMesh:
    """Flat open disk in the plane z = 0."""
    verts = [(0.0, 0.0, 0.0)]
    for i in range(1, rings + 1):
        r = radius * i / rings
        for j in range(sectors):
            a = 2 * np.pi * j / sectors
            verts.append((r * np.cos(a), r * np.sin(a), 0.0))
    faces = []
    for j in range(sectors):
        faces.append((0, 1 + j, 1 + (j + 1) % sectors))
    for i in range(1, rings):
        base0 = 1 + (i - 1) * sectors
        base1 = 1 + i * sectors
        for j in range(sectors):
            jn = (j + 1) % sectors
            faces += [(base0 + j, base1 + j, base1 + jn), (base0 + j, base1 + jn, base0 + jn)]
    return TriangleMesh(np.array(verts), np.array(faces))


def square(half: float = 0.4, z: float = 0.0, n: int = 16) -> TriangleMesh:
    s = np.linspace(-half, half, n + 1)
    xx, yy = np.meshgrid(s, s, indexing="ij")
    verts = np.stack([xx, yy, np.full_like(xx, z)], -1).reshape(-1, 3)
    return TriangleMesh(verts, _grid_faces(n + 1, n + 1, wrap_cols=False))


def two_planes(gap: float = 0.2, half: float = 0.4, n: int = 16) -> TriangleMesh:
    """Two parallel squares at z = +-gap/2; the plane z = 0 is the ridge between them."""
    lower = square(half, -gap / 2, n)
    upper = square(half, gap / 2, n)
    verts = np.concatenate([lower.vertices, upper.vertices])
    faces = np.concatenate([lower.triangles, upper.triangles + len(lower.vertices)])
    return TriangleMesh(verts, faces)


FIXTURES = {
    "sphere": icosphere,
    "torus": torus,
    "disk": disk,
    "planes": two_planes,
}


def fixture(name: str) -> TriangleMesh:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None


# Closed-form displacement fields (nearest point minus query) for the analytic shapes.

def sphere_displacement(points, radius: float = 0.3):
    p = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(p, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(r > 0, p * (radius / r - 1.0), np.array([radius, 0.0, 0.0]))


def plane_displacement(points, z: float = 0.0):
    p = np.asarray(points, dtype=np.float64)
    out = np.zeros_like(p)
    out[..., 2] = z - p[..., 2]
    return out


def disk_displacement(points, radius: float = 0.35):
    p = np.asarray(points, dtype=np.float64)
    rho = np.linalg.norm(p[..., :2], axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rho > radius, radius / rho, 1.0)
    target = np.concatenate([p[..., :2] * scale, np.zeros_like(p[..., :1])], axis=-1)
    return target - p


def two_planes_displacement(points, gap: float = 0.2):
    """Infinite-plane idealisation; ties at z = 0 go to the lower plane."""
    p = np.asarray(points, dtype=np.float64)
    out = np.zeros_like(p)
    half = gap / 2
    out[..., 2] = np.where(p[..., 2] > 0, half - p[..., 2], -half - p[..., 2])
    return out
