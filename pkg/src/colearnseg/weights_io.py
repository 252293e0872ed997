"""Binary weight files: magic, length-prefixed header fields, raw float32 data.

Layout:
    bytes 0..7   magic b"COLEARN1"
    u32 LE       variant suffix length (0 for the co-learn network)
    bytes        variant suffix, UTF-8: "", "MB", "MC", or "FS"
    u32 LE       manifest length
    bytes        manifest, UTF-8 JSON: {"entries": [{"id", "shape", "offset"}, ...]}
    bytes        tensor data, little-endian float32, at offsets relative to
                 the start of the data section

Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import DataError

MAGIC = b"COLEARN1"
VARIANT_SUFFIX = {"colearn": "", "mb": "MB", "mc": "MC", "fs": "FS"}
SUFFIX_VARIANT = {v: k for k, v in VARIANT_SUFFIX.items()}


def save_weights(path: str, arrays: dict, variant: str = "colearn") -> None:
    """Write ``arrays`` (id -> float32 ndarray) atomically to ``path``."""
    if variant not in VARIANT_SUFFIX:
        raise DataError(f"unknown variant {variant!r}")
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"id": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"entries": entries}).encode("utf-8")
    suffix = VARIANT_SUFFIX[variant].encode("utf-8")

    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(suffix)))
            fh.write(suffix)
            fh.write(struct.pack("<I", len(manifest)))
            fh.write(manifest)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_weights(path: str):
    """Read a weight file; returns (variant, dict of id -> float32 ndarray)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a weight file (bad magic {magic!r})")
        (suffix_len,) = struct.unpack("<I", fh.read(4))
        suffix = fh.read(suffix_len).decode("utf-8")
        if suffix not in SUFFIX_VARIANT:
            raise DataError(f"{path}: unknown variant suffix {suffix!r}")
        (manifest_len,) = struct.unpack("<I", fh.read(4))
        try:
            manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: corrupt manifest: {exc}") from exc
        data = fh.read()
    arrays = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        arrays[entry["id"]] = arr.reshape(shape).copy()
    return SUFFIX_VARIANT[suffix], arrays
