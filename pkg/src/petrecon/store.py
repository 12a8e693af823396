"""Binary tensor files and stage-scoped checkpoints.

Tensor file layout (little endian throughout):

    bytes 0..3   magic "DTMT"
    bytes 4..5   format version, u16 (currently 1)
    byte  6      dtype code, u8 (1 = float32)
    byte  7      rank, u8
    next 4*rank  dims, u32 each
    rest         payload, product(dims) float32 values

A checkpoint directory holds manifest.json (parameter names -> file/shape,
a stage tag, and the config hash) plus one tensor file per parameter.  All
writes go through a temp file and os.replace so readers never observe a
partial file.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"DTMT"
FORMAT_VERSION = 1
DTYPE_F32 = 1
_MAX_DIM = 2**32 - 1
_MAX_RANK = 8


class StoreError(RuntimeError):
    """Raised on malformed files; ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def _atomic_write(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str):
    _atomic_write(path, text.encode("utf-8"))


def save_tensor(arr, path: str):
    """Write a float32 tensor; bit-exact round trip including signed zeros
    and subnormals."""
    data = arr.data if hasattr(arr, "data") and isinstance(getattr(arr, "data"), np.ndarray) else arr
    data = np.asarray(data)
    if data.dtype != np.float32:
        data = data.astype(np.float32)
    if data.ndim < 1 or data.ndim > _MAX_RANK:
        raise StoreError("bad_rank", f"rank {data.ndim} unsupported")
    for d in data.shape:
        if d == 0:
            raise StoreError("empty_dim", "zero-length dimension")
        if d > _MAX_DIM:
            raise StoreError("dim_overflow", f"dimension {d} exceeds u32")
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, DTYPE_F32, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    payload = np.ascontiguousarray(data).astype("<f4", copy=False).tobytes()
    _atomic_write(path, header + payload)


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise StoreError("truncated", f"{len(blob)} bytes is below the header size")
    if blob[:4] != MAGIC:
        raise StoreError("bad_magic", f"got {blob[:4]!r}")
    version, dtype_code, rank = struct.unpack("<HBB", blob[4:8])
    if version != FORMAT_VERSION:
        raise StoreError("bad_version", f"version {version}")
    if dtype_code != DTYPE_F32:
        raise StoreError("bad_dtype", f"dtype code {dtype_code}")
    if rank < 1 or rank > _MAX_RANK:
        raise StoreError("bad_rank", f"rank {rank}")
    if len(blob) < 8 + 4 * rank:
        raise StoreError("truncated", "header ends inside the dims block")
    dims = struct.unpack(f"<{rank}I", blob[8:8 + 4 * rank])
    if any(d == 0 for d in dims):
        raise StoreError("empty_dim", "zero-length dimension")
    count = 1
    for d in dims:
        count *= d
    expected = 8 + 4 * rank + 4 * count
    if len(blob) != expected:
        raise StoreError("truncated", f"file is {len(blob)} bytes, expected {expected}")
    flat = np.frombuffer(blob, dtype="<f4", offset=8 + 4 * rank)
    return flat.astype(np.float32).reshape(dims).copy()


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    """sha256 of the canonical (sorted, compact) JSON encoding."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_checkpoint(dir_path: str, params: dict, stage: str, cfg_hash: str):
    """One tensor file per parameter plus a manifest tying them together."""
    os.makedirs(dir_path, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "stage": stage,
                "config_hash": cfg_hash, "params": {}}
    for i, name in enumerate(sorted(params)):
        arr = params[name]
        arr = arr.data if hasattr(arr, "data") and isinstance(getattr(arr, "data"), np.ndarray) else arr
        fname = f"p{i:04d}.dt"
        save_tensor(arr, os.path.join(dir_path, fname))
        manifest["params"][name] = {"file": fname, "shape": list(np.asarray(arr).shape)}
    atomic_write_text(os.path.join(dir_path, "manifest.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(dir_path: str, expect_stage: str | None = None,
                    expect_hash: str | None = None) -> tuple[dict, dict]:
    """Returns (params, manifest); rejects stage, hash, or shape mismatch."""
    man_path = os.path.join(dir_path, "manifest.json")
    if not os.path.exists(man_path):
        raise StoreError("missing_manifest", f"no manifest.json under {dir_path}")
    with open(man_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if expect_stage is not None and manifest.get("stage") != expect_stage:
        raise StoreError("stage_mismatch",
                         f"checkpoint stage '{manifest.get('stage')}', wanted '{expect_stage}'")
    if expect_hash is not None and manifest.get("config_hash") != expect_hash:
        raise StoreError("hash_mismatch", "checkpoint was produced by a different config")
    params = {}
    for name, entry in manifest["params"].items():
        arr = load_tensor(os.path.join(dir_path, entry["file"]))
        if list(arr.shape) != entry["shape"]:
            raise StoreError("shape_mismatch",
                             f"parameter '{name}' is {list(arr.shape)}, manifest says {entry['shape']}")
        params[name] = arr
    return params, manifest


def save_loss_csv(path: str, losses):
    lines = ["step,loss"] + [f"{i},{v:.10g}" for i, v in enumerate(losses)]
    atomic_write_text(path, "\n".join(lines) + "\n")
