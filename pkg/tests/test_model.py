import json
import struct

import numpy as np
import pytest

from nvfield import fixtures as fx
from nvfield.geometry import GeometryError, sample_surface
from nvfield.model import (ModelConfig, OpCounter, VectorFieldModel, direction_of, distance_of,
                           udf_direction)
from nvfield.train import loss_gradients

SMALL = dict(k=16, signature_width=4, heads=4, codes=8, channels=8, encoder_hidden=8,
             signature_hidden=8, head_hidden=16)


def small_model(dtype=np.float64, **kw):
    return VectorFieldModel(ModelConfig(**{**SMALL, **kw}), dtype=dtype)


def cloud(n=64, seed=0):
    return sample_surface(fx.icosphere(), n, seed).points


def scalar_objective(model, pts, q, r_out, r_z):
    """Smooth test objective: <r_out, out> + <r_z, (z - sg(zhat))^2>."""
    fc = model.encode(pts)
    out, tape = model.forward_batch(fc, q)
    zhat = tape.quant.quantized if tape.quant is not None else np.zeros_like(tape.z)
    diff = tape.z - zhat
    return float((r_out * out).sum() + (r_z * diff * diff).sum()), tape, diff


def activation_pattern(tape):
    """Leaky ReLU branch and code choice of every unit; the objective is smooth while this is fixed."""
    parts = [tape.cloud.pre > 0, tape.sig_pre > 0] + [a > 0 for a in tape.head_pre]
    if tape.quant is not None:
        parts.append(tape.quant.indices)
    return [x.copy() for x in parts]


def analytic_grads(model, pts, q, r_out, r_z):
    _, tape, diff = scalar_objective(model, pts, q, r_out, r_z)
    return model.backward_batch(tape, r_out, 2 * r_z * diff)


def test_embedding_width():
    m = VectorFieldModel()
    fc = m.encode(cloud(64))
    assert m.embed(fc, np.zeros((2, 3))).shape == (2, 256)
    assert m.config.width == 256


def test_config_validation():
    with pytest.raises(ValueError):
        VectorFieldModel(heads=3)
    with pytest.raises(ValueError):
        VectorFieldModel(kind="sdf")


def test_encode_needs_k_points():
    with pytest.raises(GeometryError):
        VectorFieldModel().encode(np.random.default_rng(0).random((10, 3)))


@pytest.mark.parametrize("batch", range(5))
def test_gradients_match_finite_differences(batch):
    rng = np.random.default_rng(100 + batch)
    model = small_model(seed=batch)
    pts = cloud(64, seed=batch)
    q = rng.uniform(-0.5, 0.5, (4, 3))
    r_out = rng.standard_normal((4, 3))
    r_z = rng.random((4, model.config.width))
    grads = analytic_grads(model, pts, q, r_out, r_z)
    h = 1e-4
    total = skipped = 0
    for name, p in model.params.items():
        fd = np.zeros_like(p)
        valid = np.ones(p.shape, dtype=bool)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            fp, tp, _ = scalar_objective(model, pts, q, r_out, r_z)
            p[i] = old - h
            fm, tm, _ = scalar_objective(model, pts, q, r_out, r_z)
            p[i] = old
            fd[i] = (fp - fm) / (2 * h)
            # a stencil straddling a kink is not a valid oracle for the one-sided derivative
            valid[i] = all(np.array_equal(a, b) for a, b in zip(activation_pattern(tp), activation_pattern(tm)))
        total += p.size
        skipped += int((~valid).sum())
        ga, gf = grads[name][valid], fd[valid]
        err = np.linalg.norm(ga - gf) / max(np.linalg.norm(gf), np.linalg.norm(ga), 1e-12)
        assert err < 1e-4, (name, err)
    assert skipped <= 0.01 * total


def test_codebook_gets_no_gradient():
    model = small_model()
    pts = cloud()
    q = np.random.default_rng(0).uniform(-0.4, 0.4, (6, 3))
    grads = analytic_grads(model, pts, q, np.ones((6, 3)), np.ones((6, model.config.width)))
    assert not any(k.startswith("codebook") for k in grads)
    assert set(grads) == set(model.params)


def test_duplicated_batch_same_gradient():
    model = small_model()
    pts = cloud()
    rng = np.random.default_rng(3)
    q = rng.uniform(-0.4, 0.4, (5, 3))
    tgt = rng.uniform(-0.1, 0.1, (5, 3))
    fc = model.encode(pts)

    def grads_for(qs, ts):
        out, tape = model.forward_batch(fc, qs)
        d_out, d_z = loss_gradients(out, ts, tape.z, tape.quant.quantized, 0.001, len(qs))
        return model.backward_batch(tape, d_out, d_z)

    g1 = grads_for(q, tgt)
    g2 = grads_for(np.repeat(q, 2, 0), np.repeat(tgt, 2, 0))
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-10, atol=1e-14)


def test_tape_consumed_once():
    model = small_model()
    fc = model.encode(cloud())
    out, tape = model.forward_batch(fc, np.zeros((2, 3)))
    model.backward_batch(tape, np.ones_like(out))
    with pytest.raises(RuntimeError):
        model.backward_batch(tape, np.ones_like(out))


def test_backward_shape_mismatch():
    model = small_model()
    fc = model.encode(cloud())
    out, tape = model.forward_batch(fc, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        model.backward_batch(tape, np.ones((2, 1)))


def test_zero_final_layer_returns_bias():
    model = VectorFieldModel()
    model.params["head.w3"][:] = 0
    model.params["head.b3"][:] = [0.1, -0.2, 0.3]
    fc = model.encode(cloud())
    out = model.predict(fc, np.random.default_rng(0).uniform(-0.5, 0.5, (20, 3)))
    np.testing.assert_array_equal(out, np.tile(np.float32([0.1, -0.2, 0.3]), (20, 1)))


def test_distance_direction_views_are_exact():
    model = VectorFieldModel(seed=4)
    fc = model.encode(cloud())
    q = np.random.default_rng(1).uniform(-0.5, 0.5, (50, 3))
    dq = model.displacement(fc, q)
    d, g = model.distance_direction(fc, q)
    np.testing.assert_array_equal(d, distance_of(dq))
    np.testing.assert_array_equal(g, direction_of(dq))
    np.testing.assert_array_equal(np.linalg.norm(dq.astype(np.float64), axis=1), d)


def test_encoder_permutation_equivariant():
    model = small_model()
    pts = cloud(80)
    perm = np.random.default_rng(2).permutation(80)
    f0 = model.encode(pts).features
    f1 = model.encode(pts[perm]).features
    np.testing.assert_allclose(f1[np.argsort(perm)], f0, rtol=0, atol=1e-12)


def test_encoder_duplicate_points_share_features():
    model = small_model()
    pts = cloud(40)
    pts = np.concatenate([pts, pts[:1]])
    f = model.encode(pts).features
    np.testing.assert_array_equal(f[0], f[-1])


def test_encoder_translation_invariant_without_absolute_channel():
    model = small_model(absolute_positions=False)
    pts = cloud(64)
    f0 = model.encode(pts).features
    f1 = model.encode(pts + np.array([0.05, -0.02, 0.01])).features
    np.testing.assert_allclose(f1, f0, rtol=0, atol=1e-12)


def test_embedding_independent_of_storage_order():
    model = small_model()
    pts = cloud(80)
    q = np.random.default_rng(3).uniform(-0.4, 0.4, (10, 3))
    z0 = model.embed(model.encode(pts), q)
    perm = np.random.default_rng(4).permutation(80)
    z1 = model.embed(model.encode(pts[perm]), q)
    np.testing.assert_allclose(z1, z0, rtol=0, atol=1e-12)


def test_embedding_equal_under_lattice_translation():
    # integer lattice in raster order: shifting by one step keeps every distance exact
    # and preserves the index order of tied neighbours
    model = small_model(absolute_positions=False)
    g = np.stack(np.meshgrid(*[np.arange(12.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    fc = model.encode(g)
    q = np.array([[5.25, 5.375, 5.125], [6.25, 5.375, 5.125]])
    z = model.embed(fc, q)
    np.testing.assert_array_equal(z[0], z[1])


def test_embedding_locality():
    model = small_model()
    pts = cloud(200)
    q = np.array([[0.3, 0.0, 0.0]])
    fc = model.encode(pts)
    z0 = model.embed(fc, q)
    nbr, _ = fc.index.query(q, 16)
    rings, _ = fc.index.query(pts[nbr[0]], 16)
    used = set(rings.ravel()) | set(nbr.ravel())
    # anything that is not a neighbour of q or of its neighbours' neighbourhoods
    # may still enter a neighbour's 16-NN after moving, so move it far away instead
    far = [i for i in range(200) if i not in used and pts[i, 0] < -0.1]
    moved = pts.copy()
    moved[far[0]] += np.array([-0.05, 0.0, 0.0])
    z1 = model.embed(model.encode(moved), q)
    np.testing.assert_array_equal(z0, z1)


def test_forward_counter_and_no_backward():
    model = VectorFieldModel()
    fc = model.encode(cloud())
    model.counter.reset()
    model.distance_direction(fc, np.zeros((33, 3)), chunk=8)
    assert model.counter.forwards == 33
    assert model.counter.gradient_ops == 0


def test_prediction_chunk_invariant():
    model = VectorFieldModel(seed=2)
    fc = model.encode(cloud())
    q = np.random.default_rng(0).uniform(-0.5, 0.5, (40, 3))
    a = model.predict(fc, q, chunk=1)
    b = model.predict(fc, q, chunk=65536)
    np.testing.assert_array_equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    model = VectorFieldModel(seed=9, head_hidden=64)
    model.codebook.ema_counts[:] = 2.5
    path = tmp_path / "m.nvfm"
    model.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"NVFM"
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    assert header["seed"] == 9
    assert header["hyperparameters"]["head_hidden"] == 64
    assert [l["name"] for l in header["layers"]][0] == "enc.w1"
    assert b"VQCB" in raw
    back = VectorFieldModel.load(path)
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    np.testing.assert_array_equal(back.codebook.codes, model.codebook.codes)
    np.testing.assert_array_equal(back.codebook.ema_counts, model.codebook.ema_counts)
    np.testing.assert_array_equal(back.codebook.ema_sums, model.codebook.ema_sums)
    fc = model.encode(cloud())
    q = np.random.default_rng(0).uniform(-0.5, 0.5, (10, 3))
    np.testing.assert_array_equal(back.predict(back.encode(cloud()), q), model.predict(fc, q))
    back.save(tmp_path / "again.nvfm")
    assert (tmp_path / "again.nvfm").read_bytes() == raw


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.nvfm").write_bytes(b"JUNK" + bytes(16))
    with pytest.raises(ValueError):
        VectorFieldModel.load(tmp_path / "x.nvfm")


def test_without_codebook_uses_zero_half():
    model = VectorFieldModel(use_codebook=False)
    fc = model.encode(cloud())
    out, tape = model.forward_batch(fc, np.zeros((3, 3)))
    assert tape.quant is None
    np.testing.assert_array_equal(tape.head_in[:, 256:], 0)


class _RidgeField:
    """Stub UDF: two planes at z = +-0.1, exact distances."""

    def __init__(self):
        self.counter = OpCounter()

    def udf_distance(self, fc, q, chunk=0):
        self.counter.forwards += len(q)
        return np.minimum(np.abs(q[:, 2] - 0.1), np.abs(q[:, 2] + 0.1))


def test_udf_direction_ridge_is_ambiguous():
    f = _RidgeField()
    q = np.array([[0.0, 0.0, 0.0], [0.1, 0.2, 0.05], [0.0, 0.0, 0.0002]])
    center = f.udf_distance(None, q)
    direction, amb = udf_direction(f, None, q, h=1e-3, center=center)
    assert amb[0]
    assert not amb[1]
    np.testing.assert_allclose(direction[1], [0, 0, 1], atol=1e-9)
    # a stencil straddling the ridge is caught by the one-sided slope test
    assert amb[2]


def test_udf_direction_costs_six_forwards():
    model = VectorFieldModel(kind="udf", head_hidden=32)
    fc = model.encode(cloud())
    model.counter.reset()
    udf_direction(model, fc, np.zeros((7, 3)))
    assert model.counter.forwards == 42
    assert model.counter.fd_probes == 42
    assert model.counter.backward_passes == 0


def test_udf_direction_constant_field_flagged():
    model = VectorFieldModel(kind="udf", head_hidden=32)
    model.params["head.w3"][:] = 0
    fc = model.encode(cloud())
    _, amb = udf_direction(model, fc, np.zeros((3, 3)))
    assert amb.all()


def test_udf_direction_bad_step():
    model = VectorFieldModel(kind="udf", head_hidden=32)
    with pytest.raises(ValueError):
        udf_direction(model, model.encode(cloud()), np.zeros((1, 3)), h=0)


def test_model_kind_guards():
    with pytest.raises(TypeError):
        VectorFieldModel(kind="udf").displacement(None, np.zeros((1, 3)))
    with pytest.raises(TypeError):
        VectorFieldModel().udf_distance(None, np.zeros((1, 3)))
