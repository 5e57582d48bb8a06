"""Neural vector field: point encoder, KNN query embedding, codebook, displacement head.

Forward and backward passes are written out by hand for the fixed
architecture; every intermediate needed by the backward pass lives on a
:class:`Tape`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .codebook import MultiHeadCodebook, QuantizationResult
from .geometry import CloudIndex, GeometryError, PointCloud

CHECKPOINT_MAGIC = b"NVFM"
CODEBOOK_MAGIC = b"VQCB"

# q (3) + p_i (3) + p_i - q (3) + |p_i - q| (1)
POSITION_CHANNELS = 10
PREDICT_TILE = 128  # fixed inference block height


@dataclass
class ModelConfig:
    kind: str = "nvf"  # "nvf" predicts displacements, "udf" the scalar baseline
    k: int = 16
    encoder_k: int = 16
    channels: int = 32
    encoder_hidden: int = 64
    signature_hidden: int = 64
    signature_width: int = 16
    head_hidden: int = 512
    heads: int = 4
    codes: int = 128
    gamma: float = 0.99
    beta: float = 0.25
    code_init_std: float = 0.1
    revive_after: int = 512
    use_codebook: bool = True
    absolute_positions: bool = True
    offset_scale: float = 1.0
    slope: float = 0.01
    seed: int = 0

    @property
    def width(self):
        return self.k * self.signature_width

    @property
    def out_dim(self):
        return 3 if self.kind == "nvf" else 1

    def validate(self):
        if self.kind not in ("nvf", "udf"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.width % self.heads:
            raise ValueError(f"embedding width {self.width} not divisible by {self.heads} heads")
        if self.k < 1 or self.encoder_k < 1:
            raise ValueError("neighbour counts must be positive")


@dataclass
class OpCounter:
    """Structural cost counters: query forwards, backward passes, finite-difference probes."""

    forwards: int = 0
    backward_passes: int = 0
    fd_probes: int = 0

    def reset(self):
        self.forwards = self.backward_passes = self.fd_probes = 0

    @property
    def gradient_ops(self):
        return self.backward_passes + self.fd_probes


@dataclass
class FeaturedCloud:
    """A point cloud with encoder features and the intermediates that produced them."""

    points: np.ndarray
    index: CloudIndex
    inputs: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.points)

    def as_cloud(self) -> PointCloud:
        return PointCloud(self.points, self.features)


@dataclass
class Tape:
    cloud: FeaturedCloud
    nbr: np.ndarray
    sig_in: np.ndarray
    sig_pre: np.ndarray
    sig_hidden: np.ndarray
    z: np.ndarray
    quant: QuantizationResult | None
    head_in: np.ndarray
    head_pre: list = field(default_factory=list)
    head_hidden: list = field(default_factory=list)
    consumed: bool = False

    def __len__(self):
        return len(self.z)


def leaky_relu(x, slope):
    return np.where(x > 0, x, x * slope)


def leaky_relu_grad(x, slope, upstream):
    return np.where(x > 0, upstream, upstream * slope)


def _layer_shapes(cfg: ModelConfig):
    c, d = cfg.channels, cfg.width
    sig_in = POSITION_CHANNELS + c
    return [
        ("enc.w1", (9, cfg.encoder_hidden)), ("enc.b1", (cfg.encoder_hidden,)),
        ("enc.w2", (cfg.encoder_hidden, c)), ("enc.b2", (c,)),
        ("sig.w1", (sig_in, cfg.signature_hidden)), ("sig.b1", (cfg.signature_hidden,)),
        ("sig.w2", (cfg.signature_hidden, cfg.signature_width)), ("sig.b2", (cfg.signature_width,)),
        ("head.w1", (2 * d, cfg.head_hidden)), ("head.b1", (cfg.head_hidden,)),
        ("head.w2", (cfg.head_hidden, cfg.head_hidden)), ("head.b2", (cfg.head_hidden,)),
        ("head.w3", (cfg.head_hidden, cfg.out_dim)), ("head.b3", (cfg.out_dim,)),
    ]


class VectorFieldModel:
    def __init__(self, config: ModelConfig | None = None, dtype=np.float32, **overrides):
        cfg = config or ModelConfig()
        if overrides:
            cfg = ModelConfig(**{**asdict(cfg), **overrides})
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.counter = OpCounter()
        rng = np.random.default_rng(cfg.seed)
        self.params = {}
        for name, shape in _layer_shapes(cfg):
            if name.endswith(("b1", "b2", "b3")):
                self.params[name] = np.zeros(shape, dtype=self.dtype)
            elif name == "head.w3":
                std = 0.1 * np.sqrt(1.0 / shape[0])
                self.params[name] = (rng.standard_normal(shape) * std).astype(self.dtype)
            else:
                std = np.sqrt(2.0 / shape[0])
                self.params[name] = (rng.standard_normal(shape) * std).astype(self.dtype)
        self.codebook = MultiHeadCodebook(
            heads=cfg.heads, codes=cfg.codes, dim=cfg.width // cfg.heads, gamma=cfg.gamma,
            beta=cfg.beta, init_std=cfg.code_init_std, revive_after=cfg.revive_after,
            seed=cfg.seed + 7919, dtype=self.dtype,
        )

    # ------------------------------------------------------------------ encoder

    def encode(self, cloud) -> FeaturedCloud:
        """Per-point features from each point and its local neighbourhood offsets."""
        cfg = self.config
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        if len(pts) < max(cfg.k, cfg.encoder_k):
            raise GeometryError(f"cloud has {len(pts)} points, need at least {max(cfg.k, cfg.encoder_k)}")
        index = CloudIndex(pts)
        nbr, _ = index.query(pts, cfg.encoder_k)
        off = (pts[nbr] - pts[:, None, :]) * cfg.offset_scale
        absolute = pts if cfg.absolute_positions else np.zeros_like(pts)
        x0 = np.concatenate([absolute, off.mean(1), off.max(1)], axis=1).astype(self.dtype)
        p = self.params
        pre = x0 @ p["enc.w1"] + p["enc.b1"]
        hidden = leaky_relu(pre, cfg.slope)
        feats = hidden @ p["enc.w2"] + p["enc.b2"]
        return FeaturedCloud(index.points, index, x0, pre, hidden, feats)

    # ---------------------------------------------------------------- embedding

    def _signature_inputs(self, fc: FeaturedCloud, q):
        cfg = self.config
        nbr, dist = fc.index.query(q, cfg.k)
        p = fc.points[nbr]
        rel = (p - q[:, None, :]) * cfg.offset_scale
        if cfg.absolute_positions:
            qa = np.broadcast_to(q[:, None, :], p.shape)
            pa = p
        else:
            qa = np.zeros_like(p)
            pa = np.zeros_like(p)
        x = np.concatenate(
            [qa, pa, rel, dist[..., None] * cfg.offset_scale], axis=-1
        ).astype(self.dtype)
        x = np.concatenate([x, fc.features[nbr]], axis=-1)
        return nbr, x

    def embed(self, fc: FeaturedCloud, q):
        """Continuous query embedding: neighbour signatures concatenated nearest first."""
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        nbr, x = self._signature_inputs(fc, q)
        z, _, _ = self._signatures(x)
        return z

    def _signatures(self, x):
        p = self.params
        pre = x @ p["sig.w1"] + p["sig.b1"]
        hidden = leaky_relu(pre, self.config.slope)
        s = hidden @ p["sig.w2"] + p["sig.b2"]
        return s.reshape(len(x), -1), pre, hidden

    def quantize(self, z):
        if self.config.use_codebook:
            res = self.codebook.quantize(z)
            return res.quantized, res
        return np.zeros_like(z), None

    # --------------------------------------------------------------------- head

    def _head(self, u):
        p, slope = self.params, self.config.slope
        pre1 = u @ p["head.w1"] + p["head.b1"]
        h1 = leaky_relu(pre1, slope)
        pre2 = h1 @ p["head.w2"] + p["head.b2"]
        h2 = leaky_relu(pre2, slope)
        out = h2 @ p["head.w3"] + p["head.b3"]
        return out, [pre1, pre2], [h1, h2]

    def predict_from_embeddings(self, z, zhat):
        out, _, _ = self._head(np.concatenate([z, zhat], axis=-1))
        return out

    # ------------------------------------------------------------ forward / backward

    def forward_batch(self, fc: FeaturedCloud, queries):
        """Forward pass over a batch of queries, returning outputs and a tape."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        nbr, x = self._signature_inputs(fc, q)
        z, sig_pre, sig_hidden = self._signatures(x)
        zhat, res = self.quantize(z)
        u = np.concatenate([z, zhat], axis=-1)
        out, pre, hid = self._head(u)
        self.counter.forwards += len(q)
        tape = Tape(fc, nbr, x, sig_pre, sig_hidden, z, res, u, pre, hid)
        return out, tape

    def backward_batch(self, tape: Tape, d_out, d_z=None):
        """Parameter gradients given d(loss)/d(output) and an optional extra d(loss)/dz.

        The quantized half of the head input is a stop-gradient branch: nothing
        flows back through the code lookup into codes or into ``z``.
        """
        if tape.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        p, cfg, slope = self.params, self.config, self.config.slope
        d_out = np.asarray(d_out, dtype=self.dtype).reshape(len(tape), -1)
        if d_out.shape[1] != cfg.out_dim:
            raise ValueError(f"upstream gradient shape {d_out.shape} does not match outputs")
        tape.consumed = True
        self.counter.backward_passes += 1
        g = {}
        h1, h2 = tape.head_hidden
        pre1, pre2 = tape.head_pre
        g["head.w3"] = h2.T @ d_out
        g["head.b3"] = d_out.sum(0)
        d = leaky_relu_grad(pre2, slope, d_out @ p["head.w3"].T)
        g["head.w2"] = h1.T @ d
        g["head.b2"] = d.sum(0)
        d = leaky_relu_grad(pre1, slope, d @ p["head.w2"].T)
        g["head.w1"] = tape.head_in.T @ d
        g["head.b1"] = d.sum(0)
        width = cfg.width
        dz = d @ p["head.w1"][:width].T
        if d_z is not None:
            dz = dz + np.asarray(d_z, dtype=self.dtype)

        m, k = tape.nbr.shape
        ds = dz.reshape(m * k, cfg.signature_width)
        hid = tape.sig_hidden.reshape(m * k, -1)
        x = tape.sig_in.reshape(m * k, -1)
        g["sig.w2"] = hid.T @ ds
        g["sig.b2"] = ds.sum(0)
        da = leaky_relu_grad(tape.sig_pre.reshape(m * k, -1), slope, ds @ p["sig.w2"].T)
        g["sig.w1"] = x.T @ da
        g["sig.b1"] = da.sum(0)

        fc = tape.cloud
        d_feat_rows = da @ p["sig.w1"][POSITION_CHANNELS:].T
        d_feat = np.zeros_like(fc.features)
        np.add.at(d_feat, tape.nbr.reshape(-1), d_feat_rows)
        g["enc.w2"] = fc.hidden.T @ d_feat
        g["enc.b2"] = d_feat.sum(0)
        de = leaky_relu_grad(fc.pre, slope, d_feat @ p["enc.w2"].T)
        g["enc.w1"] = fc.inputs.T @ de
        g["enc.b1"] = de.sum(0)
        return g

    # ---------------------------------------------------------------- inference

    def predict(self, fc: FeaturedCloud, queries, chunk: int = 16384):
        """Raw head outputs for each query, one forward per query, chunked."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        outs = []
        for s in range(0, len(q), max(1, chunk)):
            qc = q[s:s + max(1, chunk)]
            # BLAS rounding depends on the row count, so every matmul sees full
            # PREDICT_TILE-row blocks; this makes outputs independent of ``chunk``
            for t in range(0, len(qc), PREDICT_TILE):
                qt = qc[t:t + PREDICT_TILE]
                m = len(qt)
                if m < PREDICT_TILE:
                    qt = np.concatenate([qt, np.repeat(qt[-1:], PREDICT_TILE - m, 0)])
                nbr, x = self._signature_inputs(fc, qt)
                z, _, _ = self._signatures(x)
                zhat, _ = self.quantize(z)
                out, _, _ = self._head(np.concatenate([z, zhat], axis=-1))
                outs.append(out[:m])
            self.counter.forwards += len(qc)
        if not outs:
            return np.zeros((0, self.config.out_dim), dtype=self.dtype)
        return np.concatenate(outs)

    def displacement(self, fc, queries, chunk=16384):
        if self.config.kind != "nvf":
            raise TypeError("displacement() needs an nvf model")
        return self.predict(fc, queries, chunk)

    def distance_direction(self, fc, queries, chunk=16384):
        """Distance and unit direction read off one displacement forward."""
        dq = self.displacement(fc, queries, chunk)
        return distance_of(dq), direction_of(dq)

    def udf_distance(self, fc, queries, chunk=16384):
        if self.config.kind != "udf":
            raise TypeError("udf_distance() needs a udf model")
        return self.predict(fc, queries, chunk)[:, 0]

    # -------------------------------------------------------------- persistence

    def copy(self, dtype=None) -> "VectorFieldModel":
        other = VectorFieldModel(self.config, dtype=dtype or self.dtype)
        for k, v in self.params.items():
            other.params[k] = v.astype(other.dtype).copy()
        cb, ob = self.codebook, other.codebook
        ob.codes = cb.codes.astype(other.dtype).copy()
        ob.ema_counts = cb.ema_counts.astype(other.dtype).copy()
        ob.ema_sums = cb.ema_sums.astype(other.dtype).copy()
        ob.idle = cb.idle.copy()
        return other

    def save(self, path, extra: dict | None = None) -> None:
        cfg = self.config
        shapes = _layer_shapes(cfg)
        header = {
            "hyperparameters": asdict(cfg),
            "layers": [{"name": n, "shape": list(s)} for n, s in shapes],
            "seed": cfg.seed,
        }
        if extra:
            header["extra"] = extra
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(hb)))
        buf.write(hb)
        for name, _ in shapes:
            buf.write(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        cb = self.codebook
        buf.write(CODEBOOK_MAGIC)
        buf.write(struct.pack("<IIIf", cb.heads, cb.codes_per_head, cb.dim, cb.gamma))
        for arr in (cb.codes, cb.ema_counts, cb.ema_sums):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "VectorFieldModel":
        raw = open(path, "rb").read()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an NVFM checkpoint")
        (hlen,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8:8 + hlen])
        known = {f.name for f in fields(ModelConfig)}
        cfg = ModelConfig(**{k: v for k, v in header["hyperparameters"].items() if k in known})
        model = cls(cfg)
        off = 8 + hlen
        for layer in header["layers"]:
            shape = tuple(layer["shape"])
            n = int(np.prod(shape))
            model.params[layer["name"]] = np.frombuffer(raw, "<f4", n, off).reshape(shape).astype(np.float32)
            off += 4 * n
        if raw[off:off + 4] != CODEBOOK_MAGIC:
            raise ValueError(f"{path}: missing codebook section")
        off += 4
        h, r, d, gamma = struct.unpack("<IIIf", raw[off:off + 16])
        off += 16
        cb = model.codebook
        for name, shape in (("codes", (h, r, d)), ("ema_counts", (h, r)), ("ema_sums", (h, r, d))):
            n = int(np.prod(shape))
            setattr(cb, name, np.frombuffer(raw, "<f4", n, off).reshape(shape).astype(np.float32))
            off += 4 * n
        model.header = header
        return model


def distance_of(displacement):
    return np.linalg.norm(np.asarray(displacement, dtype=np.float64), axis=-1)


def direction_of(displacement):
    dq = np.asarray(displacement, dtype=np.float64)
    d = np.linalg.norm(dq, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(d > 0, dq / d, 0.0)


AXES = np.eye(3)


def udf_direction(model: VectorFieldModel, fc: FeaturedCloud, queries, h: float = 1e-3,
                  center=None, kink_slope: float = 0.5, chunk: int = 16384):
    """Baseline direction: minus the normalized central-difference gradient of the UDF.

    Costs six distance forwards per query. A query is flagged ambiguous when the
    gradient norm is below 1e-12, or, when ``center`` distances are supplied,
    when the one-sided slopes along some axis have opposite signs and both
    exceed ``kink_slope`` in magnitude (the stencil straddles a ridge or the
    surface itself).
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    m = len(q)
    probes = np.concatenate([q[:, None, :] + h * AXES[None], q[:, None, :] - h * AXES[None]], axis=1)
    d = model.udf_distance(fc, probes.reshape(-1, 3), chunk).astype(np.float64).reshape(m, 6)
    model.counter.fd_probes += 6 * m
    plus, minus = d[:, :3], d[:, 3:]
    grad = (plus - minus) / (2 * h)
    norm = np.linalg.norm(grad, axis=1)
    ambiguous = norm < 1e-12
    if center is not None:
        c = np.asarray(center, dtype=np.float64).reshape(m, 1)
        fwd = (plus - c) / h
        bwd = (c - minus) / h
        kink = (fwd * bwd < 0) & (np.minimum(np.abs(fwd), np.abs(bwd)) > kink_slope)
        ambiguous |= kink.any(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        direction = np.where(norm[:, None] > 0, -grad / norm[:, None], 0.0)
    return direction, ambiguous
