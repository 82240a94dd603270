"""Checkpoint round-trips, integrity verification, and atomic replacement."""

import json
import os

import numpy as np
import pytest

from brain2text import load_arrays, read_extra, save_arrays
from brain2text.checkpoint import (
    MANIFEST_NAME,
    CheckpointError,
    group_hashes,
    read_manifest,
)


def sample_arrays(rng):
    return {
        "fe.gru.W": rng.normal(size=(4, 6)).astype(np.float64),
        "fe.gru.b": rng.normal(size=(6,)).astype(np.float64),
        "decoder.tok.table": rng.normal(size=(5, 3)).astype(np.float32),
        "opt.m.fe.gru.W": np.zeros((4, 6)),
    }


def test_round_trip_is_bitwise(tmp_path, rng):
    arrays = sample_arrays(rng)
    save_arrays(tmp_path / "ckpt", arrays)
    back, manifest = load_arrays(tmp_path / "ckpt")
    assert set(back) == set(arrays)
    for name in arrays:
        assert back[name].dtype == arrays[name].dtype
        assert back[name].tobytes() == arrays[name].tobytes()
    assert manifest["format"] == 1


def test_tampered_tensor_is_detected(tmp_path, rng):
    arrays = sample_arrays(rng)
    save_arrays(tmp_path / "ckpt", arrays)
    manifest = read_manifest(tmp_path / "ckpt")
    victim = tmp_path / "ckpt" / manifest["groups"]["fe.gru.b"]["file"]
    blob = bytearray(victim.read_bytes())
    blob[0] ^= 0xFF
    victim.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="hash mismatch for group fe.gru.b"):
        load_arrays(tmp_path / "ckpt")


def test_missing_tensor_file_is_detected(tmp_path, rng):
    arrays = sample_arrays(rng)
    save_arrays(tmp_path / "ckpt", arrays)
    manifest = read_manifest(tmp_path / "ckpt")
    os.unlink(tmp_path / "ckpt" / manifest["groups"]["fe.gru.W"]["file"])
    with pytest.raises(CheckpointError, match="missing tensor file"):
        load_arrays(tmp_path / "ckpt")


def test_tampered_extra_is_detected(tmp_path, rng):
    save_arrays(tmp_path / "ckpt", sample_arrays(rng), extras={"note.json": '{"a": 1}'})
    (tmp_path / "ckpt" / "note.json").write_text('{"a": 2}')
    with pytest.raises(CheckpointError, match="hash mismatch for extra file"):
        load_arrays(tmp_path / "ckpt")


def test_extras_round_trip_text_and_bytes(tmp_path, rng):
    save_arrays(
        tmp_path / "ckpt",
        sample_arrays(rng),
        extras={"cfg.toml": "x = 1\n", "raw.bin": b"\x00\x01"},
    )
    assert read_extra(tmp_path / "ckpt", "cfg.toml") == b"x = 1\n"
    assert read_extra(tmp_path / "ckpt", "raw.bin") == b"\x00\x01"
    load_arrays(tmp_path / "ckpt")  # hashes cover extras


def test_save_replaces_previous_checkpoint_atomically(tmp_path, rng):
    arrays = sample_arrays(rng)
    save_arrays(tmp_path / "ckpt", arrays)
    arrays2 = {k: v + 1.0 for k, v in arrays.items()}
    save_arrays(tmp_path / "ckpt", arrays2)
    back, _ = load_arrays(tmp_path / "ckpt")
    assert np.allclose(back["fe.gru.b"], arrays["fe.gru.b"] + 1.0)
    leftovers = [p for p in tmp_path.iterdir() if "tmp" in p.name]
    assert leftovers == []


def test_non_checkpoint_directory_is_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="not a checkpoint directory"):
        load_arrays(tmp_path)


def test_unsupported_format_version_is_rejected(tmp_path, rng):
    save_arrays(tmp_path / "ckpt", sample_arrays(rng))
    p = tmp_path / "ckpt" / MANIFEST_NAME
    manifest = json.loads(p.read_text())
    manifest["format"] = 99
    p.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="unsupported checkpoint format"):
        load_arrays(tmp_path / "ckpt")


def test_group_hashes_are_content_addressed(rng):
    a = {"x": rng.normal(size=(3,))}
    b = {"x": a["x"].copy()}
    assert group_hashes(a) == group_hashes(b)
    b["x"][0] += 1e-9
    assert group_hashes(a) != group_hashes(b)


def test_meta_payload_round_trips(tmp_path, rng):
    save_arrays(tmp_path / "ckpt", sample_arrays(rng), meta={"stage": "align", "epoch": 3})
    manifest = read_manifest(tmp_path / "ckpt")
    assert manifest["meta"] == {"stage": "align", "epoch": 3}
