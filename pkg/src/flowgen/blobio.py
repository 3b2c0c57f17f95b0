"""Deterministic binary containers and atomic file writes.

Checkpoints and dataset snapshots are stored as a JSON header line followed
by raw little-endian array bytes. The same (manifest, arrays) input always
produces the same bytes, so file hashes can be compared across runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from typing import Mapping

import numpy as np

MAGIC = b"FLOWGEN-BLOB 1\n"

_DTYPE_LE = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
    "uint8": "|u1",
    "bool": "|b1",
}


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write-temp-then-rename so partially written files never appear."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_blobs(path, manifest: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    """Serialize named arrays plus a JSON manifest into one binary file."""
    entries = []
    payload = []
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        le = _DTYPE_LE.get(arr.dtype.name)
        if le is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for blob {name!r}")
        arr = arr.astype(le, copy=False)
        entries.append({"name": name, "dtype": le, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({"manifest": dict(manifest), "arrays": entries},
                        sort_keys=True, separators=(",", ":"))
    atomic_write_bytes(path, MAGIC + header.encode("utf-8") + b"\n" + b"".join(payload))


def load_blobs(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise ValueError(f"{path}: not a flowgen blob container")
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header["manifest"], arrays


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """Content hash over names, shapes, dtypes and raw bytes."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        digest.update(name.encode("utf-8"))
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()
