"""Training objective, Adam, step-decay schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from typing import List, Sequence

import numpy as np

from .codebook import codebook_stats
from .geometry import (DEFAULT_SIGMAS, DEFAULT_UNIFORM_FRACTION, PAD, Bvh, TriangleMesh,
                       nearest_point_on_mesh, sample_queries, sample_surface)
from .model import VectorFieldModel

log = logging.getLogger(__name__)

MAX_DISPLACEMENT = 2 * PAD * np.sqrt(3.0)
RECORD_FIELDS = ("epoch", "lr", "displacement_loss", "commitment_loss", "total_loss",
                 "perplexity", "wall_clock")


class NumericalError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    lr: float = 0.001
    decay: float = 0.3
    decay_epochs: tuple = (30, 70, 120)
    lam: float = 0.001
    clouds_per_step: int = 4
    queries_per_cloud: int = 512
    queries_per_mesh: int = 16384
    cloud_points: int = 2048
    noise_sigmas: tuple = DEFAULT_SIGMAS
    uniform_fraction: float = DEFAULT_UNIFORM_FRACTION
    epochs: int = 150
    seed: int = 0
    codebook_mode: str = "ema"  # "ema" or "loss"
    strict_deterministic: bool = False

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.noise_sigmas = tuple(float(s) for s in self.noise_sigmas)
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.codebook_mode not in ("ema", "loss"):
            raise ValueError("codebook_mode must be 'ema' or 'loss'")


@dataclass
class TrainRecord:
    epoch: int
    lr: float
    displacement_loss: float
    commitment_loss: float
    total_loss: float
    perplexity: float
    wall_clock: float

    def row(self):
        return [self.epoch, repr(self.lr), repr(self.displacement_loss), repr(self.commitment_loss),
                repr(self.total_loss), repr(self.perplexity), "%.3f" % self.wall_clock]


def learning_rate(epoch: int, config: TrainConfig) -> float:
    """Step decay: multiply by ``decay`` once for every milestone already reached."""
    passed = sum(1 for e in config.decay_epochs if epoch >= e)
    return config.lr * config.decay ** passed


def loss(pred, target, z=None, zhat=None, lam=0.0):
    """Mean L1 displacement error plus ``lam`` times the mean commitment term.

    Returns ``(total, {"displacement": ..., "commitment": ...})`` in float64.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    disp = float(np.abs(target - pred).sum(-1).mean()) if len(pred) else 0.0
    commit = 0.0
    if z is not None and zhat is not None and len(pred):
        diff = np.asarray(z, dtype=np.float64) - np.asarray(zhat, dtype=np.float64)
        commit = float((diff * diff).sum(-1).mean())
    return disp + lam * commit, {"displacement": disp, "commitment": commit}


def loss_gradients(pred, target, z, zhat, lam, n_total):
    """d(loss)/d(pred) and d(loss)/dz for a slice of a batch of ``n_total`` queries."""
    d_out = -np.sign(np.asarray(target, dtype=np.float64) - pred) / n_total
    d_z = None
    if zhat is not None and lam:
        d_z = 2.0 * lam * (np.asarray(z, dtype=np.float64) - zhat) / n_total
    return d_out, d_z


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def step_optimizer(params, grads, state: Adam, lr):
    state.step(params, grads, lr)
    return params, state


@dataclass
class MeshData:
    mesh: TriangleMesh
    cloud: np.ndarray
    queries: np.ndarray
    targets: np.ndarray  # displacement (M, 3)


def prepare_mesh(mesh: TriangleMesh, config: TrainConfig, index: int) -> MeshData:
    """Sample the input cloud and the fixed labelled query set for one mesh."""
    base = config.seed * 1_000_003 + index * 101
    cloud = sample_surface(mesh, config.cloud_points, base + 1).points
    src = sample_surface(mesh, config.queries_per_mesh, base + 2)
    queries = sample_queries(src, config.queries_per_mesh, config.noise_sigmas,
                             config.uniform_fraction, base + 3)
    disp = nearest_point_on_mesh(mesh, Bvh(mesh), queries).displacement
    norm = np.linalg.norm(disp, axis=1, keepdims=True)
    disp = np.where(norm > MAX_DISPLACEMENT, disp * MAX_DISPLACEMENT / np.maximum(norm, 1e-300), disp)
    return MeshData(mesh, cloud, queries, disp)


def targets_for(model: VectorFieldModel, disp):
    if model.config.kind == "nvf":
        return disp
    return np.linalg.norm(disp, axis=1, keepdims=True)


def _thread_limit(config: TrainConfig):
    if not config.strict_deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(1)


def train(model: VectorFieldModel, meshes: Sequence[TriangleMesh], config: TrainConfig,
          callback=None, data: List[MeshData] | None = None):
    """Fit ``model`` to the meshes; returns the model and one record per epoch."""
    if not meshes and not data:
        raise ValueError("training needs at least one mesh")
    with _thread_limit(config):
        return _train(model, meshes, config, callback, data)


def _train(model, meshes, config, callback, data):
    data = data or [prepare_mesh(m, config, i) for i, m in enumerate(meshes)]
    rng = np.random.default_rng(config.seed)
    opt = Adam()
    records = []
    start = time.perf_counter()
    use_cb = model.config.use_codebook
    for epoch in range(config.epochs):
        lr = learning_rate(epoch, config)
        chunks = []
        for mi, md in enumerate(data):
            perm = rng.permutation(len(md.queries))
            for s in range(0, len(perm), config.queries_per_cloud):
                chunks.append((mi, perm[s:s + config.queries_per_cloud]))
        order = rng.permutation(len(chunks))
        chunks = [chunks[i] for i in order]

        sums = np.zeros(3)
        n_seen = 0
        epoch_indices = []
        for s in range(0, len(chunks), config.clouds_per_step):
            step = chunks[s:s + config.clouds_per_step]
            by_mesh = {}
            for mi, sel in step:
                by_mesh.setdefault(mi, []).append(sel)
            n_total = sum(len(sel) for _, sel in step)
            grads = {}
            zs, idxs = [], []
            for mi in sorted(by_mesh):
                md = data[mi]
                sel = np.concatenate(by_mesh[mi])
                fc = model.encode(md.cloud)
                out, tape = model.forward_batch(fc, md.queries[sel])
                tgt = targets_for(model, md.targets[sel])
                zhat = tape.quant.quantized if tape.quant is not None else None
                total, parts = loss(out, tgt, tape.z, zhat, config.lam)
                sums += np.array([parts["displacement"], parts["commitment"], total]) * len(sel)
                n_seen += len(sel)
                d_out, d_z = loss_gradients(out, tgt, tape.z, zhat, config.lam, n_total)
                g = model.backward_batch(tape, d_out, d_z)
                for k, v in g.items():
                    grads[k] = grads[k] + v if k in grads else v
                if tape.quant is not None:
                    zs.append(tape.z)
                    idxs.append(tape.quant.indices)
            if not np.isfinite(sums).all():
                rec = TrainRecord(epoch, lr, *(sums / max(n_seen, 1)), float("nan"),
                                  time.perf_counter() - start)
                raise NumericalError(f"non-finite loss at epoch {epoch}", rec)
            if lr > 0:
                opt.step(model.params, grads, lr)
            if use_cb and zs:
                z_all, i_all = np.concatenate(zs), np.concatenate(idxs)
                if config.codebook_mode == "ema":
                    model.codebook.ema_update(z_all, i_all)
                elif lr > 0:
                    model.codebook.loss_update(z_all, i_all, lr)
                epoch_indices.append(i_all)

        means = sums / max(n_seen, 1)
        if epoch_indices:
            stats = codebook_stats(np.concatenate(epoch_indices), model.codebook.codes_per_head)
            perplexity = float(stats["perplexity"].mean())
        else:
            perplexity = 0.0
        rec = TrainRecord(epoch, lr, float(means[0]), float(means[1]), float(means[2]),
                          perplexity, time.perf_counter() - start)
        records.append(rec)
        log.info("epoch %d lr %.2e disp %.5f commit %.5f ppl %.1f", epoch, lr,
                 rec.displacement_loss, rec.commitment_loss, perplexity)
        if callback is not None:
            callback(rec)
    return model, records


def heldout_error(model: VectorFieldModel, mesh: TriangleMesh, cloud, n: int = 4096, seed: int = 12345,
                  noise_sigmas=DEFAULT_SIGMAS, uniform_fraction=DEFAULT_UNIFORM_FRACTION) -> float:
    """Mean L1 displacement error on freshly sampled queries."""
    src = sample_surface(mesh, n, seed)
    q = sample_queries(src, n, noise_sigmas, uniform_fraction, seed + 1)
    gt = nearest_point_on_mesh(mesh, Bvh(mesh), q).displacement
    fc = model.encode(cloud)
    pred = model.predict(fc, q)
    return float(np.abs(targets_for(model, gt) - pred).sum(-1).mean())


def write_log(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow(r.row())


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["decay_epochs"] = list(config.decay_epochs)
    d["noise_sigmas"] = list(config.noise_sigmas)
    return d
