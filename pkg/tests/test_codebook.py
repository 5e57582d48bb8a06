import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nvfield.codebook import EMA_EPS, MultiHeadCodebook, codebook_stats, commitment_loss


def book(**kw):
    kw.setdefault("seed", 0)
    kw.setdefault("dtype", np.float64)
    return MultiHeadCodebook(**kw)


def test_default_shape():
    b = MultiHeadCodebook()
    assert b.codes.shape == (4, 128, 64)
    assert b.ema_counts.shape == (4, 128)
    assert b.width == 256


def test_exact_match_index():
    b = book()
    z = b.codes[:, 7].reshape(1, -1).copy()
    r = b.quantize(z)
    np.testing.assert_array_equal(r.indices, [[7, 7, 7, 7]])
    np.testing.assert_array_equal(r.residuals, 0.0)


def test_single_code():
    b = book(codes=1)
    r = b.quantize(np.random.default_rng(0).standard_normal((50, 256)))
    assert (r.indices == 0).all()


def test_quantize_matches_brute_force():
    b = MultiHeadCodebook(seed=3)
    z = np.random.default_rng(1).standard_normal((1000, 256)).astype(np.float32) * 0.1
    r = b.quantize(z)
    seg = z.reshape(1000, 4, 64).astype(np.float64)
    codes = b.codes.astype(np.float64)
    for h in range(4):
        d = ((seg[:, h, None, :] - codes[h][None]) ** 2).sum(-1)
        np.testing.assert_array_equal(r.indices[:, h], np.argmin(d, axis=1))
        # residual optimality against every code
        assert (r.residuals[:, h] ** 2 <= d.min(1) + 1e-9).all()
    np.testing.assert_array_equal(r.quantized, b.lookup(r.indices))


def test_tie_goes_to_lowest_index():
    b = book(heads=1, codes=4, dim=2)
    b.codes[:] = [[[1, 0], [-1, 0], [0, 1], [1, 0]]]
    r = b.quantize(np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(r.indices[:, 0], [0, 0])


def test_quantize_idempotent():
    b = MultiHeadCodebook(seed=5)
    z = np.random.default_rng(2).standard_normal((200, 256)).astype(np.float32)
    r = b.quantize(z)
    np.testing.assert_array_equal(b.quantize(r.quantized).indices, r.indices)


def test_ema_single_step_value():
    b = book(heads=1, codes=2, dim=1, gamma=0.99)
    b.codes[:] = 1.0
    b.ema_sums[:] = 1.0
    b.ema_counts[:] = 1.0
    b.ema_update(np.array([[0.0]]), np.array([[0]]), revive=False)
    assert b.codes[0, 0, 0] == pytest.approx(0.99)
    assert b.codes[0, 1, 0] == 1.0  # unassigned code untouched


def test_ema_unassigned_unchanged():
    b = book()
    before = b.codes.copy(), b.ema_counts.copy(), b.ema_sums.copy()
    z = np.random.default_rng(0).standard_normal((10, 256))
    idx = np.zeros((10, 4), dtype=np.int64)
    b.ema_update(z, idx, revive=False)
    for arr, old in zip((b.codes, b.ema_counts, b.ema_sums), before):
        np.testing.assert_array_equal(arr[:, 1:], old[:, 1:])


def test_ema_geometric_series_closed_form():
    g = 0.99
    b = book(heads=1, codes=1, dim=3, gamma=g)
    c0 = b.codes[0, 0].copy()
    cluster = np.random.default_rng(4).standard_normal((5, 3))
    mean, n = cluster.mean(0), len(cluster)
    for _ in range(1000):
        b.ema_update(cluster, np.zeros((n, 1), dtype=np.int64), revive=False)
    t = 1000
    count = g ** t * 1.0 + (1 - g ** t) * n
    total = g ** t * c0 + (1 - g ** t) * n * mean
    np.testing.assert_allclose(b.ema_counts[0, 0], count, rtol=0, atol=1e-6)
    np.testing.assert_allclose(b.codes[0, 0], total / max(count, EMA_EPS), rtol=0, atol=1e-6)
    assert np.abs(b.codes[0, 0] - mean).max() < 1e-3


def test_dead_code_revival():
    b = book(heads=1, codes=3, dim=2, revive_after=5)
    z = np.array([[3.0, 3.0]])
    for _ in range(5):
        b.ema_update(z, np.array([[0]]))
    # codes 1 and 2 idled for five batches and were re-seeded to a recent segment
    np.testing.assert_array_equal(b.codes[0, 1:], [[3.0, 3.0], [3.0, 3.0]])
    assert (b.idle == 0).all()


def test_commitment_loss_cases():
    b = book(heads=4, codes=2, dim=1)
    b.codes[:] = 0.0
    z = np.array([[1.0, 0.0, 0.0, 0.0]])
    r = b.quantize(z)
    assert commitment_loss(z, r)[0] == pytest.approx(1.0)
    assert commitment_loss(r.quantized, b.quantize(r.quantized))[0] == 0.0


def test_commitment_loss_recomputed():
    b = MultiHeadCodebook(seed=2)
    z = np.random.default_rng(3).standard_normal((30, 256))
    r = b.quantize(z)
    ref = sum(((z[:, h * 64:(h + 1) * 64] - b.codes[h][r.indices[:, h]]) ** 2).sum(1) for h in range(4))
    np.testing.assert_allclose(commitment_loss(z, r), ref, rtol=1e-6)


def test_perplexity_extremes():
    one = codebook_stats(np.zeros((100, 4), dtype=np.int64), 128)
    np.testing.assert_allclose(one["perplexity"], 1.0)
    uni = codebook_stats(np.tile(np.arange(128)[:, None], (3, 4)), 128)
    np.testing.assert_allclose(uni["perplexity"], 128.0)


def test_perplexity_mixed():
    idx = np.array([0, 0, 0, 1, 2, 2])[:, None]
    stats = codebook_stats(idx, 3)
    p = np.array([3, 1, 2]) / 6
    np.testing.assert_allclose(stats["perplexity"][0], np.exp(-(p * np.log(p)).sum()))
    np.testing.assert_array_equal(stats["histogram"][0], [3, 1, 2])


def test_capacity_enumeration():
    b = book(heads=2, codes=3, dim=1)
    b.codes[:] = np.array([[[0.0], [1.0], [2.0]], [[10.0], [11.0], [12.0]]])
    seen = set()
    for i, j in itertools.product(range(3), repeat=2):
        zq = b.quantize(np.array([[float(i), 10.0 + j]])).quantized
        seen.add(tuple(zq[0]))
    assert len(seen) == 3 ** 2


def test_loss_update_moves_toward_embedding():
    b = book(heads=1, codes=2, dim=2, beta=0.25)
    b.codes[:] = 0.0
    z = np.array([[1.0, 1.0]])
    b.loss_update(z, np.array([[0]]), lr=1.0)
    np.testing.assert_allclose(b.codes[0, 0], [0.5, 0.5])
    np.testing.assert_array_equal(b.codes[0, 1], 0.0)


def test_bad_gamma():
    with pytest.raises(ValueError):
        MultiHeadCodebook(gamma=1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 8), elements=st.floats(-3, 3)))
def test_chosen_code_is_nearest(z):
    b = book(heads=2, codes=6, dim=4, seed=1)
    r = b.quantize(z)
    for h in range(2):
        d = ((z[:, None, h * 4:(h + 1) * 4] - b.codes[h][None]) ** 2).sum(-1)
        chosen = d[np.arange(5), r.indices[:, h]]
        assert (chosen <= d.min(1) + 1e-9).all()
