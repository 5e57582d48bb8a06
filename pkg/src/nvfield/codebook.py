"""Multi-head vector quantization with exponential-moving-average code updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EMA_EPS = 1e-5


@dataclass
class QuantizationResult:
    quantized: np.ndarray  # (M, D)
    indices: np.ndarray  # (M, H)
    residuals: np.ndarray  # (M, H) Euclidean residual norm per head


class MultiHeadCodebook:
    """``heads`` sub-codebooks of ``codes`` entries, each ``dim`` wide.

    Codes move only through :meth:`ema_update` (or the optional loss-based
    mode driven by the trainer); quantization never propagates gradients.
    """

    def __init__(self, heads=4, codes=128, dim=64, gamma=0.99, beta=0.25, init_std=0.1,
                 revive_after=512, seed=0, dtype=np.float32):
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        self.heads = heads
        self.codes_per_head = codes
        self.dim = dim
        self.gamma = gamma
        self.beta = beta
        self.revive_after = revive_after
        rng = np.random.default_rng(seed)
        self.codes = (rng.standard_normal((heads, codes, dim)) * init_std).astype(dtype)
        self.ema_counts = np.ones((heads, codes), dtype=dtype)
        self.ema_sums = self.codes.copy()
        self.idle = np.zeros((heads, codes), dtype=np.int64)
        self._rng = np.random.default_rng(seed + 1)

    @property
    def width(self):
        return self.heads * self.dim

    def split(self, z):
        z = np.asarray(z)
        if z.shape[-1] != self.width:
            raise ValueError(f"embedding width {z.shape[-1]} != {self.width}")
        return z.reshape(z.shape[:-1] + (self.heads, self.dim))

    def quantize(self, z) -> QuantizationResult:
        """Nearest code per head; ties resolve to the lowest code index."""
        seg = self.split(np.atleast_2d(z)).astype(np.float64)  # (M, H, d)
        codes = self.codes.astype(np.float64)
        m = seg.shape[0]
        idx = np.empty((m, self.heads), dtype=np.int64)
        res = np.empty((m, self.heads))
        c2 = np.einsum("hrd,hrd->hr", codes, codes)
        for h in range(self.heads):
            s = seg[:, h]
            d2 = (s * s).sum(1)[:, None] - 2.0 * s @ codes[h].T + c2[h][None]
            i = np.argmin(d2, axis=1)
            idx[:, h] = i
            res[:, h] = np.linalg.norm(s - codes[h][i], axis=1)
        q = self.codes[np.arange(self.heads)[None], idx].reshape(m, self.width)
        return QuantizationResult(q.astype(self.codes.dtype), idx, res)

    def lookup(self, indices) -> np.ndarray:
        indices = np.atleast_2d(indices)
        return self.codes[np.arange(self.heads)[None], indices].reshape(len(indices), self.width)

    def ema_update(self, z, indices, revive=True) -> None:
        """Move each selected code toward the mean of its assigned segments.

        Unselected codes keep their accumulators untouched.
        """
        seg = self.split(np.atleast_2d(z)).astype(np.float64)
        indices = np.atleast_2d(indices)
        g = self.gamma
        for h in range(self.heads):
            counts = np.bincount(indices[:, h], minlength=self.codes_per_head)
            sums = np.zeros((self.codes_per_head, self.dim))
            np.add.at(sums, indices[:, h], seg[:, h])
            sel = counts > 0
            new_count = g * self.ema_counts[h, sel].astype(np.float64) + (1 - g) * counts[sel]
            new_sum = g * self.ema_sums[h, sel].astype(np.float64) + (1 - g) * sums[sel]
            self.ema_counts[h, sel] = new_count
            self.ema_sums[h, sel] = new_sum
            self.codes[h, sel] = new_sum / np.maximum(new_count, EMA_EPS)[:, None]
            self.idle[h, sel] = 0
            self.idle[h, ~sel] += 1
        if revive and self.revive_after:
            self._revive(seg)

    def _revive(self, seg):
        dead = np.argwhere(self.idle >= self.revive_after)
        for h, r in dead:
            pick = seg[self._rng.integers(len(seg)), h]
            self.codes[h, r] = pick
            self.ema_sums[h, r] = pick * self.ema_counts[h, r]
            self.idle[h, r] = 0

    def loss_update(self, z, indices, lr) -> None:
        """Gradient step on the code-side term ``beta * ||sg(z) - c||^2`` (non-EMA mode)."""
        seg = self.split(np.atleast_2d(z)).astype(np.float64)
        indices = np.atleast_2d(indices)
        m = len(seg)
        for h in range(self.heads):
            c = self.codes[h, indices[:, h]].astype(np.float64)
            grad = np.zeros((self.codes_per_head, self.dim))
            np.add.at(grad, indices[:, h], 2.0 * self.beta * (c - seg[:, h]) / m)
            self.codes[h] -= (lr * grad).astype(self.codes.dtype)

    def state(self):
        return {"codes": self.codes, "ema_counts": self.ema_counts, "ema_sums": self.ema_sums}


def commitment_loss(z, result: QuantizationResult) -> np.ndarray:
    """Per-query sum over heads of ``||z_h - sg(zhat_h)||^2``."""
    diff = np.asarray(z, dtype=np.float64) - result.quantized.astype(np.float64)
    return (diff * diff).sum(-1)


def codebook_stats(indices, codes_per_head):
    """Per-head usage histogram and perplexity (exp of assignment entropy)."""
    indices = np.atleast_2d(indices)
    hist = np.stack([np.bincount(indices[:, h], minlength=codes_per_head)
                     for h in range(indices.shape[1])])
    p = hist / np.maximum(hist.sum(1, keepdims=True), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(1)
    return {"histogram": hist, "perplexity": np.exp(ent)}
