"""Checkpoint container: bitwise round trips, deterministic bytes, and
refusal of corrupt, truncated, or newer-versioned files."""

import hashlib
import struct

import numpy as np
import pytest

import sedkit.checkpoint as cp
from sedkit.checkpoint import (checkpoint_bytes, checkpoint_hash,
                               load_checkpoint, save_checkpoint)
from sedkit.encoder import PoolingSpec, encode
from sedkit.errors import CheckpointError, CheckpointVersionError
from sedkit.evalsts import evaluate_task
from sedkit.flow import CouplingFlow, flow_forward


def test_encoder_round_trip_bitwise(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    digest = save_checkpoint(tiny_model, path)
    assert digest == hashlib.sha256(path.read_bytes()).hexdigest()
    loaded = load_checkpoint(path)
    assert loaded.arch == tiny_model.arch
    assert loaded.vocab.tokens == tiny_model.vocab.tokens
    assert loaded.param_names() == tiny_model.param_names()
    for a, b in zip(tiny_model.parameters(), loaded.parameters()):
        assert np.array_equal(a.data, b.data)
        assert b.requires_grad


def test_save_load_save_bytes_identical(tiny_model, tmp_path):
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(tiny_model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_model_evaluates_identically(tiny_model, tiny_world, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    loaded = load_checkpoint(path)
    task = tiny_world.sts["test"]
    pool = PoolingSpec(2)
    assert evaluate_task(loaded, task, pool) == evaluate_task(
        tiny_model, task, pool)
    v1 = encode(tiny_model, "w000 w001", pool)
    v2 = encode(loaded, "w000 w001", pool)
    assert np.array_equal(v1, v2)


def test_flow_round_trip(tmp_path):
    flow = CouplingFlow(dim=8, n_layers=3, seed=4)
    rng = np.random.default_rng(0)
    for p in flow.parameters():
        p.data = p.data + rng.normal(0.0, 0.2, size=p.data.shape)
    path = tmp_path / "f.ckpt"
    save_checkpoint(flow, path)
    loaded = load_checkpoint(path)
    assert (loaded.dim, loaded.n_layers, loaded.hidden) == (8, 3, 16)
    x = rng.normal(size=(4, 8))
    z1, ld1 = flow_forward(flow, x)
    z2, ld2 = flow_forward(loaded, x)
    assert np.array_equal(z1, z2)
    assert np.array_equal(ld1, ld2)


def test_checkpoint_hash_matches_bytes(tiny_model):
    blob = checkpoint_bytes(tiny_model)
    assert checkpoint_hash(tiny_model) == hashlib.sha256(blob).hexdigest()
    # hashing twice gives the same answer: serialization is deterministic
    assert checkpoint_bytes(tiny_model) == blob


def test_truncated_file_refused(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = path.read_bytes()
    for cut in (10, len(blob) // 2, len(blob) - 1):
        clipped = tmp_path / f"cut{cut}.ckpt"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(clipped)


def test_corrupted_payload_refused(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(bad)


def test_corrupted_metadata_refused(tiny_model, tmp_path):
    # flip a byte inside the JSON metadata section and re-sign the file,
    # so the checksum passes but the metadata is garbage
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes()[:-32])
    blob[20] = 0x00  # inside the metadata JSON
    signed = bytes(blob) + hashlib.sha256(bytes(blob)).digest()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(signed)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_future_version_refused(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes()[:-32])
    blob[4:8] = struct.pack("<I", cp.VERSION + 1)
    signed = bytes(blob) + hashlib.sha256(bytes(blob)).digest()
    future = tmp_path / "future.ckpt"
    future.write_bytes(signed)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(future)


def test_bad_magic_refused(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes()[:-32])
    blob[0:4] = b"XXXX"
    signed = bytes(blob) + hashlib.sha256(bytes(blob)).digest()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(signed)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)


def test_trailing_bytes_refused(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes()[:-32]) + b"\x00" * 8
    signed = bytes(blob) + hashlib.sha256(bytes(blob)).digest()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(signed)
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


def test_unknown_artifact_rejected():
    with pytest.raises(CheckpointError):
        checkpoint_bytes({"not": "a model"})
