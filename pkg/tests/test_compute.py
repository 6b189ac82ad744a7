"""Numeric core: embedding/mask/MLP forward fixtures, hand-derived
backward against central finite differences, and Adam."""

import numpy as np
import pytest

from lightfmp.compute import (AdamState, BackboneModel, NumericalError, ShapeError,
                              TapeError, adam_step, apply_mask, backward,
                              embed_forward, forward, mlp_forward)
from lightfmp.data import Batch, FieldSchema, FieldSpec
from lightfmp.objective import logloss_batch

SCHEMA2 = FieldSchema((FieldSpec("c", "categorical", 4), FieldSpec("x", "continuous")))


def small_model(schema=SCHEMA2, D=3, hidden=(5,), seed=0, dtype=np.float64):
    return BackboneModel(schema, embed_dim=D, hidden_sizes=hidden, seed=seed, dtype=dtype)


def test_embed_forward_lookup_and_scaling():
    model = small_model()
    batch = Batch(np.array([[1.0, 2.0]]), np.array([1.0]))
    e, _ = embed_forward(model, batch)
    np.testing.assert_allclose(e[0, :3], model.embeddings[0][1])
    np.testing.assert_allclose(e[0, 3:], 2.0 * model.embeddings[1][0])


def test_embed_forward_zero_value_and_zero_tables():
    model = small_model()
    batch = Batch(np.array([[0.0, 0.0]]), np.array([0.0]))
    e, _ = embed_forward(model, batch)
    np.testing.assert_array_equal(e[0, 3:], 0.0)
    for j in range(2):
        model.embeddings[j] = np.zeros_like(model.embeddings[j])
    e2, _ = embed_forward(model, batch)
    np.testing.assert_array_equal(e2, 0.0)


def test_embed_forward_linear_in_tables():
    model = small_model()
    batch = Batch(np.array([[2.0, -1.5], [0.0, 3.0]]), np.zeros(2))
    e, _ = embed_forward(model, batch)
    scaled = small_model()
    for j in range(2):
        scaled.embeddings[j] = 2.5 * model.embeddings[j]
    e2, _ = embed_forward(scaled, batch)
    np.testing.assert_allclose(e2, 2.5 * e, rtol=1e-12)


def test_embed_forward_index_error():
    model = small_model()
    with pytest.raises(ShapeError):
        embed_forward(model, Batch(np.array([[7.0, 0.0]]), np.array([0.0])))


def test_apply_mask_broadcast():
    e = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = apply_mask(e, np.array([0.5, 1.0]), embed_dim=2)
    np.testing.assert_allclose(out, [[0.5, 1.0, 3.0, 4.0]])
    np.testing.assert_array_equal(apply_mask(e, np.ones(2), 2), e)
    np.testing.assert_array_equal(apply_mask(e, np.zeros(2), 2), 0.0)


def test_apply_mask_exhaustive_small():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(4, 6))
    z = rng.random(3)
    out = apply_mask(e, z, embed_dim=2)
    for i in range(4):
        for j in range(3):
            for d in range(2):
                assert out[i, j * 2 + d] == e[i, j * 2 + d] * z[j]


def test_apply_mask_shape_error():
    with pytest.raises(ShapeError):
        apply_mask(np.ones((1, 6)), np.ones(2), embed_dim=2)


def test_mlp_forward_zero_network():
    model = small_model()
    for i in range(len(model.weights)):
        model.weights[i] = np.zeros_like(model.weights[i])
    logits = mlp_forward(model, np.random.default_rng(0).normal(size=(3, 6)))
    np.testing.assert_array_equal(logits, 0.0)


def test_mlp_forward_hand_arithmetic():
    schema = SCHEMA2
    model = BackboneModel(schema, embed_dim=1, hidden_sizes=(), seed=0, dtype=np.float64)
    model.weights = [np.array([[1.0], [-1.0]])]
    model.biases = [np.array([0.5])]
    logits = mlp_forward(model, np.array([[2.0, 3.0]]))
    assert logits[0, 0] == pytest.approx(-0.5)


def test_mlp_forward_relu_kills_negatives():
    model = small_model(hidden=(2,))
    model.weights[0] = np.full_like(model.weights[0], -1.0)
    model.biases[0] = np.zeros_like(model.biases[0])
    model.weights[1] = np.ones_like(model.weights[1])
    model.biases[1] = np.zeros_like(model.biases[1])
    logits = mlp_forward(model, np.ones((1, 6)))
    assert logits[0, 0] == 0.0


def test_mlp_forward_width_mismatch():
    with pytest.raises(ShapeError):
        mlp_forward(small_model(), np.ones((1, 5)))


def _loss_for_params(model, batch, z, u_free_z=None):
    logits, _ = forward(model, batch, z=z)
    loss, _ = logloss_batch(logits, batch.y)
    return loss


def randomize_params(model, rng, scale=0.5):
    """Finite-difference tests need O(1) activations and preactivations
    away from the ReLU kinks; the production init is too close to zero."""
    for name, p in model.params().items():
        model.set_param(name, rng.normal(0, scale, size=p.shape))


def min_abs_preact(model, batch, z):
    _, tape = forward(model, batch, z=z)
    return min(float(np.min(np.abs(p))) for p in tape.preacts[:-1]) \
        if len(tape.preacts) > 1 else 1.0


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    schema = FieldSchema((
        FieldSpec("a", "categorical", 3),
        FieldSpec("b", "categorical", 4),
        FieldSpec("c", "continuous"),
    ))
    model = small_model(schema, D=2, hidden=(4, 3), seed=1)
    B = 6
    while True:  # reject draws with preactivations near a ReLU kink
        randomize_params(model, rng)
        x = np.column_stack([
            rng.integers(0, 3, B), rng.integers(0, 4, B), rng.normal(size=B)]).astype(float)
        batch = Batch(x, rng.integers(0, 2, B).astype(float))
        z = rng.random(3)
        if min_abs_preact(model, batch, z) > 1e-3:
            break

    logits, tape = forward(model, batch, z=z)
    _, dlogits = logloss_batch(logits, batch.y)
    grads, dz, _ = backward(model, tape, dlogits)

    h = 1e-4
    for name, p in model.params().items():
        g = grads[name]
        flat = p.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = _loss_for_params(model, batch, z, None)
            flat[k] = orig - h
            dn = _loss_for_params(model, batch, z, None)
            flat[k] = orig
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(g.reshape(-1)[k]), 1e-8)
            assert abs(g.reshape(-1)[k] - fd) / denom < 1e-4, name

    for j in range(3):
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        fd = (_loss_for_params(model, batch, zp, None)
              - _loss_for_params(model, batch, zm, None)) / (2 * h)
        assert dz[j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_backward_dz_aggregation_identity():
    # with z = 1 and D = 1, dL/dz_j reduces to sum over the batch of
    # e_j * dL/de'_j
    rng = np.random.default_rng(3)
    schema = SCHEMA2
    model = small_model(schema, D=1, hidden=(4,), seed=2)
    x = np.column_stack([rng.integers(0, 4, 5), rng.normal(size=5)]).astype(float)
    batch = Batch(x, rng.integers(0, 2, 5).astype(float))
    logits, tape = forward(model, batch, z=np.ones(2))
    _, dlogits = logloss_batch(logits, batch.y)
    e = tape.e.copy()
    grads, dz, de = backward(model, tape, dlogits)
    np.testing.assert_allclose(dz, (e * de).sum(axis=0), rtol=1e-10)


def test_backward_frozen_param_zero_grad():
    # a categorical row never looked up gets exactly zero gradient
    model = small_model()
    batch = Batch(np.array([[1.0, 2.0]]), np.array([1.0]))
    logits, tape = forward(model, batch)
    _, dlogits = logloss_batch(logits, batch.y)
    grads, _, _ = backward(model, tape, dlogits)
    np.testing.assert_array_equal(grads["emb.0"][0], 0.0)
    np.testing.assert_array_equal(grads["emb.0"][3], 0.0)


def test_tape_single_use_and_ownership():
    model = small_model()
    batch = Batch(np.array([[1.0, 2.0]]), np.array([1.0]))
    logits, tape = forward(model, batch)
    backward(model, tape, np.ones((1, 1)))
    with pytest.raises(TapeError):
        backward(model, tape, np.ones((1, 1)))
    other = small_model(seed=9)
    _, tape2 = forward(model, batch)
    with pytest.raises(TapeError):
        backward(other, tape2, np.ones((1, 1)))


def test_forward_deterministic():
    model_a = small_model(seed=5, dtype=np.float32)
    model_b = small_model(seed=5, dtype=np.float32)
    batch = Batch(np.array([[2.0, 0.3], [1.0, -0.5]]), np.array([1.0, 0.0]))
    la, _ = forward(model_a, batch)
    lb, _ = forward(model_b, batch)
    np.testing.assert_array_equal(la, lb)


def test_adam_zero_gradient_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState(params, learning_rate=0.1, weight_decay=0.0)
    out = adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(out["w"], params["w"])
    assert state.step_count == 1


def test_adam_first_step_closed_form():
    params = {"b": np.array([0.0])}  # bias name: no decay applied
    state = AdamState(params, learning_rate=0.1, weight_decay=0.0)
    out = adam_step(params, {"b": np.array([1.0])}, state)
    # bias-corrected m_hat / sqrt(v_hat) = 1 on the first step
    assert out["b"][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_decay_targets():
    params = {"emb.0": np.ones((2, 2)), "mlp.0.W": np.ones((2, 2)),
              "mlp.0.b": np.ones(2)}
    state = AdamState(params, learning_rate=0.01, weight_decay=1e-2)
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    out = adam_step(params, zero, state)
    # decayed tensors move, biases do not
    assert not np.array_equal(out["emb.0"], params["emb.0"])
    assert not np.array_equal(out["mlp.0.W"], params["mlp.0.W"])
    np.testing.assert_array_equal(out["mlp.0.b"], params["mlp.0.b"])


def test_adam_deterministic_100_steps():
    def run():
        params = {"w": np.array([0.3, -0.7])}
        state = AdamState(params, learning_rate=0.01)
        rng = np.random.default_rng(0)
        for _ in range(100):
            params = adam_step(params, {"w": rng.normal(size=2)}, state)
        return params["w"]

    np.testing.assert_array_equal(run(), run())


def test_adam_nan_gradient_fails_fast():
    params = {"mlp.1.W": np.ones(2)}
    state = AdamState(params, learning_rate=0.1)
    with pytest.raises(NumericalError, match="mlp.1.W"):
        adam_step(params, {"mlp.1.W": np.array([np.nan, 0.0])}, state)


def test_model_finiteness_check():
    model = small_model()
    model.weights[0][0, 0] = np.inf
    with pytest.raises(NumericalError):
        model.check_finite()
