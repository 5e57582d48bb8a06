"""Reconstruction metrics: Chamfer distance, Earth Mover distance, F-score.

Distances follow the squared convention throughout: Chamfer averages squared
nearest-neighbour distances and F-score thresholds compare squared distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import GeometryError, PointCloud, TriangleMesh, sample_surface

CD_POINTS = 100_000
EMD_POINTS = 2048
FSCORE_THRESHOLDS = (1e-5, 2e-5)
EMD_MAX_POINTS = 4096


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("metric needs non-empty point sets")
    return pts


def _nn_sq(src, dst):
    d, _ = cKDTree(dst).query(src, k=1)
    return d * d


def chamfer(a, b) -> float:
    """Mean of the two directed mean squared nearest-neighbour distances."""
    pa, pb = _points(a), _points(b)
    return 0.5 * (float(_nn_sq(pa, pb).mean()) + float(_nn_sq(pb, pa).mean()))


def emd(a, b) -> float:
    """Mean Euclidean distance under the optimal one-to-one matching."""
    pa, pb = _points(a), _points(b)
    if len(pa) != len(pb):
        raise GeometryError(f"EMD needs equal point counts, got {len(pa)} and {len(pb)}")
    if len(pa) > EMD_MAX_POINTS:
        raise GeometryError(f"EMD limited to {EMD_MAX_POINTS} points")
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def precision_recall(recon, gt, threshold):
    pr, pg = _points(recon), _points(gt)
    precision = float((_nn_sq(pr, pg) < threshold).mean())
    recall = float((_nn_sq(pg, pr) < threshold).mean())
    return precision, recall


def f_score(recon, gt, threshold: float) -> float:
    """F1 in percent; zero when both precision and recall vanish."""
    p, r = precision_recall(recon, gt, threshold)
    if p + r == 0:
        return 0.0
    return 100.0 * 2 * p * r / (p + r)


@dataclass
class ReconReport:
    cd: float
    emd: float
    f1: dict = field(default_factory=dict)
    n_cd: int = CD_POINTS
    n_emd: int = EMD_POINTS
    seed: int = 0

    @property
    def cd_e4(self):
        return self.cd / 1e-4

    @property
    def emd_e2(self):
        return self.emd / 1e-2

    COLUMNS = ("shape", "cd", "cd_x1e-4", "emd_x1e-2", "f1_1e-5", "f1_2e-5", "n_cd", "n_emd", "seed")

    def row(self, name):
        f1 = [self.f1.get(t, float("nan")) for t in FSCORE_THRESHOLDS]
        return [name, "%.9e" % self.cd, "%.6f" % self.cd_e4, "%.6f" % self.emd_e2,
                "%.4f" % f1[0], "%.4f" % f1[1], self.n_cd, self.n_emd, self.seed]


def evaluate(recon: TriangleMesh, gt: TriangleMesh, seed: int = 0, n_cd: int = CD_POINTS,
             n_emd: int = EMD_POINTS, thresholds=FSCORE_THRESHOLDS) -> ReconReport:
    """Sample both surfaces and compute the full metric bundle."""
    if len(recon) == 0 or len(gt) == 0:
        raise GeometryError("cannot evaluate an empty mesh")
    rc = sample_surface(recon, n_cd, seed)
    gc = sample_surface(gt, n_cd, seed + 1)
    re = sample_surface(recon, n_emd, seed + 2)
    ge = sample_surface(gt, n_emd, seed + 3)
    f1 = {t: f_score(rc, gc, t) for t in thresholds}
    return ReconReport(chamfer(rc, gc), emd(re, ge), f1, n_cd, n_emd, seed)
