"""Canonical checkpoint container.

A checkpoint is one file: a magic line, a canonical-JSON header (sorted
keys, compact separators), then the raw little-endian array blobs in
header order. Writing the same state twice produces identical bytes,
which the reproducibility guarantees depend on; zip-based containers
embed timestamps, so they are not used here.

Writes go to a temp file in the same directory followed by an atomic
rename, so a reader never sees a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

_MAGIC = b"LSECKPT1\n"
CHECKPOINT_SCHEMA_VERSION = 1


def fingerprint_of(obj) -> str:
    """SHA-256 over canonical JSON; the config identity embedded in
    artifacts and checked on load."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a checkpoint atomically.

    ``meta`` must be JSON-serializable; ``arrays`` maps names to numpy
    arrays (any dtype/shape). Array order in the file is sorted by name.
    """
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        # force little-endian on disk regardless of host
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dt.str,
                "shape": list(a.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
    }
    header_blob = json.dumps(header, sort_keys=True, separators=(",", ":"),
                             allow_nan=False).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(str(len(header_blob)).encode() + b"\n")
        f.write(header_blob)
        for b in blobs:
            f.write(b)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expected_kind: str | None = None,
                    expected_fingerprint: str | None = None,
                    force: bool = False) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint, returning (meta, arrays).

    When ``expected_fingerprint`` is given and the stored config
    fingerprint differs, loading fails unless ``force`` is set.
    """
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise InputError(f"{path} is not a checkpoint file")
        hlen = int(f.readline().strip())
        header = json.loads(f.read(hlen))
        if header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise ConfigError(
                f"checkpoint schema {header.get('schema_version')} unsupported"
            )
        if expected_kind is not None and header["kind"] != expected_kind:
            raise ConfigError(
                f"checkpoint kind {header['kind']!r}, expected {expected_kind!r}"
            )
        meta = header["meta"]
        stored_fp = meta.get("config_fingerprint")
        if expected_fingerprint is not None and stored_fp != expected_fingerprint:
            if not force:
                raise ConfigError(
                    f"config fingerprint mismatch: checkpoint has {stored_fp}, "
                    f"current config is {expected_fingerprint} (use force to override)"
                )
        base = f.tell()
        arrays = {}
        for ent in header["arrays"]:
            f.seek(base + ent["offset"])
            raw = f.read(ent["nbytes"])
            if len(raw) != ent["nbytes"]:
                raise InputError(f"{path} is truncated at array {ent['name']!r}")
            a = np.frombuffer(raw, dtype=np.dtype(ent["dtype"]))
            arrays[ent["name"]] = a.reshape(ent["shape"]).copy()
    return meta, arrays


# ---------------------------------------------------------------------------
# torch state-dict adapters


def state_dict_to_arrays(state_dict) -> dict[str, np.ndarray]:
    out = {}
    for k, v in state_dict.items():
        out[k] = v.detach().cpu().numpy()
    return out


def arrays_to_state_dict(arrays: dict[str, np.ndarray]):
    import torch

    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
