"""Checkpoint directories: raw little-endian tensors plus a hashed manifest.

A checkpoint is a directory with one ``.bin`` file per named array and a
``manifest.json`` listing every group's shape, dtype, file, and sha256.
Writes go to a temporary sibling directory first and are renamed into place,
so a crash never leaves a half-written checkpoint behind. Loads verify every
hash and refuse corrupted or incomplete directories.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import shutil
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class CheckpointError(RuntimeError):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _little_endian(a: np.ndarray) -> np.ndarray:
    dt = np.dtype(a.dtype).newbyteorder("<")
    return np.ascontiguousarray(a, dtype=dt)


def _safe_filename(name: str, used: set[str]) -> str:
    base = re.sub(r"[^A-Za-z0-9._-]", "_", name) or "group"
    candidate = base + ".bin"
    n = 2
    while candidate in used:
        candidate = f"{base}~{n}.bin"
        n += 1
    used.add(candidate)
    return candidate


def save_arrays(
    out_dir: str | Path,
    arrays: dict[str, np.ndarray],
    extras: dict[str, bytes | str] | None = None,
    meta: dict | None = None,
) -> Path:
    """Write arrays (and optional extra files) atomically; returns out_dir.

    ``extras`` maps a filename to its content; extra files are hashed into the
    manifest too so round trips stay verifiable end to end.
    """
    out_dir = Path(out_dir)
    tmp = out_dir.parent / (out_dir.name + f".tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    used: set[str] = {MANIFEST_NAME}
    groups: dict[str, dict] = {}
    for name in sorted(arrays):
        a = _little_endian(arrays[name])
        fname = _safe_filename(name, used)
        blob = a.tobytes()
        (tmp / fname).write_bytes(blob)
        groups[name] = {
            "shape": list(a.shape),
            "dtype": a.dtype.str,
            "file": fname,
            "sha256": _sha256(blob),
        }
    extra_entries: dict[str, dict] = {}
    for fname in sorted(extras or {}):
        content = extras[fname]
        blob = content.encode("utf-8") if isinstance(content, str) else content
        if fname in used:
            raise CheckpointError(f"extra file name collides with a tensor file: {fname}")
        used.add(fname)
        (tmp / fname).write_bytes(blob)
        extra_entries[fname] = {"sha256": _sha256(blob)}
    manifest = {
        "format": FORMAT_VERSION,
        "meta": meta or {},
        "groups": groups,
        "extras": extra_entries,
    }
    (tmp / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if out_dir.exists():
        shutil.rmtree(out_dir)
    os.replace(tmp, out_dir)
    return out_dir


def read_manifest(ckpt_dir: str | Path) -> dict:
    path = Path(ckpt_dir) / MANIFEST_NAME
    if not path.exists():
        raise CheckpointError(f"not a checkpoint directory (no {MANIFEST_NAME}): {ckpt_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format: {manifest.get('format')!r}")
    return manifest


def load_arrays(ckpt_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load and hash-verify all tensor groups; returns (arrays, manifest)."""
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest["groups"].items():
        path = ckpt_dir / entry["file"]
        if not path.exists():
            raise CheckpointError(f"missing tensor file for group {name}: {entry['file']}")
        blob = path.read_bytes()
        if _sha256(blob) != entry["sha256"]:
            raise CheckpointError(f"hash mismatch for group {name} ({entry['file']})")
        a = np.frombuffer(blob, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[name] = a.copy()
    for fname, entry in manifest.get("extras", {}).items():
        path = ckpt_dir / fname
        if not path.exists():
            raise CheckpointError(f"missing extra file: {fname}")
        if _sha256(path.read_bytes()) != entry["sha256"]:
            raise CheckpointError(f"hash mismatch for extra file: {fname}")
    return arrays, manifest


def read_extra(ckpt_dir: str | Path, fname: str) -> bytes:
    path = Path(ckpt_dir) / fname
    if not path.exists():
        raise CheckpointError(f"missing extra file: {fname}")
    return path.read_bytes()


def group_hashes(arrays: dict[str, np.ndarray]) -> dict[str, str]:
    """Content hash per group; the freeze contracts compare these."""
    return {name: _sha256(_little_endian(a).tobytes()) for name, a in sorted(arrays.items())}
