import itertools

import numpy as np
import pytest

from nvfield import fixtures as fx
from nvfield.geometry import GeometryError
from nvfield.metrics import ReconReport, chamfer, emd, evaluate, f_score, precision_recall


def test_chamfer_identical():
    a = np.random.default_rng(0).random((50, 3))
    assert chamfer(a, a) == 0.0


def test_chamfer_single_pair_squared():
    assert chamfer([[0, 0, 0]], [[0.1, 0, 0]]) == pytest.approx(0.01, abs=1e-15)


@pytest.mark.parametrize("trial", range(20))
def test_chamfer_matches_double_loop(trial):
    rng = np.random.default_rng(trial)
    a = rng.random((100, 3))
    b = a + 0.01 * rng.standard_normal((100, 3))
    ab = sum(min(sum((x - y) ** 2 for x, y in zip(p, q)) for q in b) for p in a) / len(a)
    ba = sum(min(sum((x - y) ** 2 for x, y in zip(p, q)) for q in a) for p in b) / len(b)
    assert chamfer(a, b) == pytest.approx(0.5 * (ab + ba), abs=1e-9)


def test_chamfer_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.random((70, 3)), rng.random((40, 3))
    assert chamfer(a, b) == chamfer(b, a)


def test_empty_point_set():
    with pytest.raises(GeometryError):
        chamfer(np.zeros((0, 3)), np.zeros((3, 3)))


def test_emd_identity_and_permutation():
    a = np.random.default_rng(2).random((30, 3))
    assert emd(a, a) == 0.0
    assert emd([[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [0, 0, 0]]) == 0.0


def brute_emd(a, b):
    return min(np.mean([np.linalg.norm(a[i] - b[j]) for i, j in enumerate(p)])
               for p in itertools.permutations(range(len(a))))


@pytest.mark.parametrize("trial", range(20))
def test_emd_matches_enumeration(trial):
    rng = np.random.default_rng(100 + trial)
    a, b = rng.random((6, 3)), rng.random((6, 3))
    assert emd(a, b) == pytest.approx(brute_emd(a, b), abs=1e-12)


def test_emd_unequal_counts():
    with pytest.raises(GeometryError):
        emd(np.zeros((3, 3)), np.zeros((4, 3)))


def test_emd_symmetric_and_triangle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a, b, c = (rng.random((6, 3)) for _ in range(3))
        assert emd(a, b) == pytest.approx(emd(b, a), abs=1e-12)
        assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-12


def test_fscore_identical():
    a = np.random.default_rng(3).random((40, 3))
    assert f_score(a, a, 1e-9) == 100.0


def test_fscore_disjoint():
    assert f_score(np.zeros((5, 3)), np.ones((5, 3)), 1e-5) == 0.0


def test_fscore_half_precision():
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    recon = np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0], [6.0, 0, 0]])
    p, r = precision_recall(recon, gt, 1e-5)
    assert (p, r) == (0.5, 1.0)
    assert f_score(recon, gt, 1e-5) == pytest.approx(200 / 3)


def test_fscore_threshold_is_squared():
    # a 0.003 offset is 9e-6 squared: inside 1e-5 although 0.003 > 1e-5
    assert f_score([[0, 0, 0]], [[0.003, 0, 0]], 1e-5) == 100.0
    assert f_score([[0, 0, 0]], [[0.0032, 0, 0]], 1e-5) == 0.0


def test_fscore_monotone():
    rng = np.random.default_rng(4)
    a, b = rng.random((200, 3)), rng.random((150, 3))
    vals = [f_score(a, b, t) for t in np.geomspace(1e-6, 1, 20)]
    assert all(x <= y for x, y in zip(vals, vals[1:]))


def test_evaluate_deterministic_and_self_zero():
    mesh = fx.icosphere(subdivisions=3)
    r1 = evaluate(mesh, mesh, seed=3, n_cd=5000, n_emd=256)
    r2 = evaluate(mesh, mesh, seed=3, n_cd=5000, n_emd=256)
    assert r1.row("s") == r2.row("s")
    assert r1.cd < 1e-4
    assert r1.cd_e4 == pytest.approx(r1.cd * 1e4)
    assert len(r1.row("s")) == len(ReconReport.COLUMNS)


def test_evaluate_empty():
    from nvfield.geometry import TriangleMesh
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(GeometryError):
        evaluate(empty, fx.icosphere())
