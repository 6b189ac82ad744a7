"""Checkpoint format: bit-exact round trips, checksum corruption
detection, and schema-hash verification."""

import numpy as np
import pytest

from lightfmp import gate as hc
from lightfmp.checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                                 save_checkpoint, schema_hash)
from lightfmp.compute import BackboneModel
from lightfmp.data import FieldSchema, FieldSpec
from lightfmp.pipeline import PruneMask, prune


def make_schema(m, card=5):
    return FieldSchema(tuple(FieldSpec(f"f{j}", "categorical", card) for j in range(m)))


def make_model(m=4, dtype=np.float32, seed=0):
    return BackboneModel(make_schema(m), embed_dim=3, hidden_sizes=(6, 3),
                         seed=seed, dtype=dtype)


def assert_models_equal(a, b):
    assert a.dtype == b.dtype
    assert a.hidden_sizes == b.hidden_sizes
    for name, p in a.params().items():
        got = b.params()[name]
        assert got.dtype == p.dtype
        np.testing.assert_array_equal(got, p)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bit_exact(tmp_path, dtype):
    model = make_model(dtype=dtype)
    gate_params = hc.init_gate(4, seed=2)
    path = tmp_path / "m_t.ckpt"
    save_checkpoint(path, Checkpoint(phase="T", model=model, gate=gate_params))
    back = load_checkpoint(path, model.schema)
    assert back.phase == "T"
    assert_models_equal(model, back.model)
    np.testing.assert_array_equal(back.gate.log_alpha, gate_params.log_alpha)
    assert back.gate.beta == gate_params.beta


def test_round_trip_pruned_with_mask(tmp_path):
    schema = make_schema(6)
    model = BackboneModel(schema, embed_dim=2, hidden_sizes=(5,), seed=1)
    g = hc.GateParams(log_alpha=np.array([20.0, 20.0, -20, 20, -20, -20.0]))
    m_p, mask = prune(model, g, tau=0.5)
    path = tmp_path / "m_p.ckpt"
    save_checkpoint(path, Checkpoint(phase="P", model=m_p, mask=mask))
    back = load_checkpoint(path, schema)
    assert_models_equal(m_p, back.model)
    np.testing.assert_array_equal(back.mask.keep, mask.keep)
    np.testing.assert_array_equal(back.mask.importance, mask.importance)
    assert back.mask.tau == 0.5
    assert back.model.schema.names == [schema.names[j] for j in mask.keep_indices]


def test_save_is_deterministic(tmp_path):
    model = make_model()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, Checkpoint(phase="S", model=model))
    save_checkpoint(p2, Checkpoint(phase="S", model=model))
    assert p1.read_bytes() == p2.read_bytes()


def test_single_byte_corruption_detected(tmp_path):
    model = make_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(phase="S", model=model))
    raw = bytearray(path.read_bytes())
    rng = np.random.default_rng(0)
    for _ in range(20):
        pos = int(rng.integers(4, len(raw)))  # keep the magic intact
        corrupt = bytearray(raw)
        corrupt[pos] ^= 0xFF
        path.write_bytes(bytes(corrupt))
        with pytest.raises(CheckpointError):
            load_checkpoint(path, model.schema)


def test_truncated_file_detected(tmp_path):
    model = make_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(phase="S", model=model))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path, model.schema)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"definitely not LFMP data")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path, make_schema(4))
    with pytest.raises(CheckpointError, match="no such"):
        load_checkpoint(tmp_path / "missing.ckpt", make_schema(4))


def test_schema_hash_mismatch(tmp_path):
    model = make_model(m=4, seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(phase="S", model=model))
    other = make_schema(4, card=9)
    with pytest.raises(CheckpointError, match="schema hash"):
        load_checkpoint(path, other)
    with pytest.raises(CheckpointError, match="m="):
        load_checkpoint(path, make_schema(5))


def test_schema_hash_sensitive_to_fields():
    a = schema_hash(make_schema(4))
    b = schema_hash(make_schema(4, card=6))
    assert a != b
