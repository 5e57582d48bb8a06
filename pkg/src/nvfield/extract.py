"""Differentiation-free surface extraction from displacement fields.

The field is sampled on a regular lattice, lattices on opposite sides of the
surface are told apart by their displacement directions pointing at each
other, and marching cubes runs on the resulting pseudo-signed distances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels
from ._mc_table import CORNERS, EDGES, TRIANGLES
from .geometry import PAD, GeometryError, TriangleMesh

LATTICE_MAGIC = b"NVFL"
DEFAULT_RESOLUTION = 256
TAU_FLIP = -0.5
GATE_FACTOR = 2.0
RELIABLE_FACTOR = 0.5
SEAM_SLACK = 0.25


@dataclass
class LatticeField:
    resolution: int
    displacement: np.ndarray  # (n, n, n, 3)
    lo: float = -PAD
    hi: float = PAD

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.resolution - 1)

    @property
    def cell_diagonal(self) -> float:
        return self.spacing * np.sqrt(3.0)

    @property
    def distance(self) -> np.ndarray:
        return np.linalg.norm(self.displacement.astype(np.float64), axis=-1)

    def direction(self, eps: float = 1e-12) -> np.ndarray:
        d = self.distance[..., None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(d > eps, self.displacement / d, 0.0)

    def points(self) -> np.ndarray:
        return lattice_points(self.resolution, self.lo, self.hi)


@dataclass
class PseudoSignGrid:
    signs: np.ndarray  # (n, n, n) int8 in {+1, -1}
    confidence: np.ndarray  # agreeing neighbour votes per lattice
    conflicts: int
    flips: tuple  # per-axis flipping-edge masks


def lattice_points(resolution: int, lo: float = -PAD, hi: float = PAD) -> np.ndarray:
    ax = np.linspace(lo, hi, resolution)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1)


def evaluate_lattice(model, cloud, resolution: int = DEFAULT_RESOLUTION, chunk: int = 16384) -> LatticeField:
    """Sample the displacement field at every lattice point, one forward each.

    ``model`` is either a :class:`~nvfield.model.VectorFieldModel` (with
    ``cloud`` its encoded input) or any callable mapping (M, 3) points to
    (M, 3) displacements, in which case ``cloud`` is ignored.
    """
    if resolution < 8:
        raise ValueError("lattice resolution must be at least 8")
    pts = lattice_points(resolution).reshape(-1, 3)
    if hasattr(model, "displacement"):
        fc = cloud if hasattr(cloud, "features") and hasattr(cloud, "index") else model.encode(cloud)
        disp = model.displacement(fc, pts, chunk)
    else:
        disp = np.concatenate([np.asarray(model(pts[s:s + chunk])) for s in range(0, len(pts), chunk)])
    return LatticeField(resolution, np.asarray(disp).reshape(resolution, resolution, resolution, 3))


def flipping_edges(field: LatticeField, tau: float = TAU_FLIP, gate_factor: float = GATE_FACTOR):
    """Per-axis masks of lattice edges whose directions oppose near the surface."""
    g = field.direction()
    d = field.distance
    gate = gate_factor * field.cell_diagonal
    near = d < gate
    flips = []
    for axis in range(3):
        a, b = _axis_pair(axis)
        dot = (g[a] * g[b]).sum(-1)
        flips.append((dot < tau) & near[a] & near[b])
    return tuple(flips)


def _axis_pair(axis):
    a = [slice(None)] * 3
    b = [slice(None)] * 3
    a[axis] = slice(None, -1)
    b[axis] = slice(1, None)
    return tuple(a), tuple(b)


def edge_quality(field: LatticeField, reliable_factor: float = RELIABLE_FACTOR):
    """Per-axis trust in each edge's flip verdict, in [0, 1].

    Directions that are nearly parallel or antiparallel give a clear verdict,
    and lattices closer to the surface than ``reliable_factor`` spacings have
    directions dominated by prediction noise, so both shrink the score.
    """
    g = field.direction()
    d = field.distance
    ramp = np.minimum(1.0, d / (reliable_factor * field.spacing))
    out = []
    for axis in range(3):
        a, b = _axis_pair(axis)
        dot = np.abs((g[a] * g[b]).sum(-1))
        out.append(dot * np.minimum(ramp[a], ramp[b]))
    return tuple(out)


def assign_pseudo_signs(field: LatticeField, tau: float = TAU_FLIP,
                        gate_factor: float = GATE_FACTOR) -> PseudoSignGrid:
    """Assign a +1/-1 pseudo-sign to every lattice.

    1. Lattices away from the surface (``d >= gate``) that are connected to
       the global max-distance lattice are flooded from it with +1.
    2. Each connected near-surface band is flooded on its own from its most
       reliable flipping edge, always expanding along the most trustworthy
       edge first, so both sides of a sheet fill before the fronts meet at
       its open boundary.
    3. Each band is oriented to agree with the far field around it.
    4. Every remaining far-field region (e.g. the inside of a closed surface)
       takes the majority sign voted across its border.
    """
    flips = flipping_edges(field, tau, gate_factor)
    quality = edge_quality(field)
    d = field.distance
    shape = d.shape
    band = d < gate_factor * field.cell_diagonal
    labels, n_labels = ndimage.label(band)
    labels = labels.astype(np.int32)
    sign = np.zeros(shape, dtype=np.int8)
    conf = np.zeros(shape, dtype=np.int16)
    conflicts = 0

    seed = int(np.argmax(d))
    sign.flat[seed] = 1
    cid = -1 if labels.flat[seed] == 0 else -2
    conflicts += _kernels.flood_region(sign, conf, *flips, labels, cid, np.array([seed]))

    if n_labels:
        # best flip-edge quality touching each lattice, -1 where none
        best = np.full(shape, -1.0)
        for axis, (f, q) in enumerate(zip(flips, quality)):
            a, b = _axis_pair(axis)
            qf = np.where(f, q, -1.0)
            best[a] = np.maximum(best[a], qf)
            best[b] = np.maximum(best[b], qf)
        flat_labels = labels.reshape(-1)
        # most reliable flipping lattice per band (lowest flat index on ties), else the closest lattice
        key = np.lexsort((np.arange(d.size), d.reshape(-1), -best.reshape(-1), flat_labels))
        sorted_labels = flat_labels[key]
        firsts = key[np.searchsorted(sorted_labels, np.arange(1, n_labels + 1))]
        for c, s0 in enumerate(firsts, start=1):
            if sign.flat[s0] != 0:
                continue
            sign.flat[s0] = 1
            conflicts += _kernels.guided_flood(sign, conf, *flips, *quality, labels, c, np.array([s0]))
        score = _kernels.component_orientation(sign, *flips, labels, n_labels)
        negate = np.zeros(n_labels + 1, dtype=bool)
        negate[1:] = score[1:] < 0
        sign[negate[labels]] *= -1

    if (sign == 0).any():
        conflicts += _sign_far_regions(sign, conf, flips)
    return PseudoSignGrid(sign, conf, int(conflicts), flips)


def _sign_far_regions(sign, conf, flips) -> int:
    """Give each unsigned connected region the majority vote of its signed border."""
    regions, n_regions = ndimage.label(sign == 0)
    votes = np.zeros(n_regions + 1, dtype=np.int64)
    for axis, f in enumerate(flips):
        a, b = _axis_pair(axis)
        parity = np.where(f, -1, 1)
        for u, v in ((a, b), (b, a)):
            m = (regions[u] > 0) & (sign[v] != 0)
            np.add.at(votes, regions[u][m], (sign[v] * parity)[m])
    region_sign = np.where(votes >= 0, 1, -1).astype(np.int8)
    region_sign[0] = 0
    unsigned = regions > 0
    sign[unsigned] = region_sign[regions[unsigned]]
    # lattices on a region border whose neighbours disagree count as conflicts
    disagree = np.zeros(sign.shape, dtype=bool)
    for axis, f in enumerate(flips):
        a, b = _axis_pair(axis)
        bad = (sign[a] * sign[b] * np.where(f, -1, 1)) < 0
        for u in (a, b):
            disagree[u] |= bad & unsigned[u]
    conf[unsigned] = 0
    return int(disagree.sum())


_TRI_TABLE = np.full((256, 16), -1, dtype=np.int64)
for _i, _row in enumerate(TRIANGLES):
    _TRI_TABLE[_i, :len(_row)] = _row
_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGE_LOWER = np.array([np.minimum(_CORNERS[a], _CORNERS[b]) for a, b in EDGES])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORNERS[a] - _CORNERS[b]))) for a, b in EDGES])


def marching_cubes(field: LatticeField, signs: PseudoSignGrid, consistent_only: bool = True,
                   seam_slack: float = SEAM_SLACK) -> TriangleMesh:
    """Triangulate the zero set of the pseudo-signed distance ``s * d``.

    Crossing vertices sit at ``t = d_i / (d_i + d_j)`` along each edge. With
    ``consistent_only`` a cell is skipped when one of its sign changes lies on
    a non-flipping edge that the surface cannot cross, i.e. with
    ``d_i + d_j > (1 + seam_slack) * spacing``. This removes the seams left
    where the flood fill had to close up around open boundaries.
    """
    n = field.resolution
    d = field.distance
    inside = signs.signs < 0
    m = n - 1
    cube = np.zeros((m, m, m), dtype=np.int64)
    for c, (ox, oy, oz) in enumerate(CORNERS):
        cube |= inside[ox:ox + m, oy:oy + m, oz:oz + m].astype(np.int64) << c
    active = (cube != 0) & (cube != 255)
    limit = (1.0 + seam_slack) * field.spacing
    if consistent_only:
        for e, (a, b) in enumerate(EDGES):
            ca, cb = CORNERS[a], CORNERS[b]
            change = (inside[ca[0]:ca[0] + m, ca[1]:ca[1] + m, ca[2]:ca[2] + m]
                      != inside[cb[0]:cb[0] + m, cb[1]:cb[1] + m, cb[2]:cb[2] + m])
            lo = _EDGE_LOWER[e]
            fl = signs.flips[_EDGE_AXIS[e]][lo[0]:lo[0] + m, lo[1]:lo[1] + m, lo[2]:lo[2] + m]
            far = (d[ca[0]:ca[0] + m, ca[1]:ca[1] + m, ca[2]:ca[2] + m]
                   + d[cb[0]:cb[0] + m, cb[1]:cb[1] + m, cb[2]:cb[2] + m]) > limit
            active &= ~(change & ~fl & far)
    cells = np.argwhere(active)
    if len(cells) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    rows = _TRI_TABLE[cube[active]]  # argwhere and boolean indexing share C order
    tri_cells = np.repeat(np.arange(len(cells)), 5)
    tri_edges = rows[:, :15].reshape(-1, 3)
    keep = tri_edges[:, 0] >= 0
    tri_cells, tri_edges = tri_cells[keep], tri_edges[keep]

    # global edge id: axis-major, then the flat index of the edge's lower lattice
    lower = cells[tri_cells][:, None, :] + _EDGE_LOWER[tri_edges]
    axis = _EDGE_AXIS[tri_edges]
    gid = axis * n ** 3 + (lower[..., 0] * n + lower[..., 1]) * n + lower[..., 2]
    uniq, inv = np.unique(gid.reshape(-1), return_inverse=True)
    u_axis = uniq // n ** 3
    rem = uniq % n ** 3
    li = np.stack([rem // (n * n), (rem // n) % n, rem % n], -1)
    lj = li.copy()
    lj[np.arange(len(lj)), u_axis] += 1
    d0 = d[li[:, 0], li[:, 1], li[:, 2]]
    d1 = d[lj[:, 0], lj[:, 1], lj[:, 2]]
    denom = d0 + d1
    t = np.where(denom > 0, d0 / np.where(denom > 0, denom, 1.0), 0.5)
    h = field.spacing
    p0 = field.lo + li * h
    p1 = field.lo + lj * h
    verts = p0 + t[:, None] * (p1 - p0)
    faces = inv.reshape(-1, 3)
    # drop triangles collapsed by coincident vertices
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return TriangleMesh(verts, faces[ok])


def extract(model, cloud, resolution: int = DEFAULT_RESOLUTION, chunk: int = 16384,
            tau: float = TAU_FLIP, gate_factor: float = GATE_FACTOR):
    """Lattice evaluation, pseudo-signs and marching cubes in one call."""
    field = evaluate_lattice(model, cloud, resolution, chunk)
    signs = assign_pseudo_signs(field, tau, gate_factor)
    return marching_cubes(field, signs)


def write_lattice(field: LatticeField, path) -> None:
    """``NVFL`` + three u32 dims + float32 displacement vectors in C order."""
    n = field.resolution
    with open(path, "wb") as fh:
        fh.write(LATTICE_MAGIC)
        fh.write(struct.pack("<III", n, n, n))
        fh.write(np.ascontiguousarray(field.displacement, dtype="<f4").tobytes())


def read_lattice(path) -> LatticeField:
    raw = Path(path).read_bytes()
    if raw[:4] != LATTICE_MAGIC:
        raise GeometryError(f"{path}: bad lattice magic {raw[:4]!r}")
    nx, ny, nz = struct.unpack("<III", raw[4:16])
    if not nx == ny == nz:
        raise GeometryError("only cubic lattices are supported")
    vec = np.frombuffer(raw, "<f4", nx * ny * nz * 3, 16).reshape(nx, ny, nz, 3)
    return LatticeField(nx, vec.astype(np.float64))
