"""Binary PGM (P5) image files, 8-bit or 16-bit, written atomically.

16-bit samples are big-endian per the PGM specification.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import DataError


def write_pgm(path: str, image: np.ndarray) -> None:
    if image.ndim != 2:
        raise DataError(f"PGM images are 2D, got shape {image.shape}")
    if image.dtype == np.uint8:
        maxval = 255
        payload = image.tobytes()
    elif image.dtype == np.uint16:
        maxval = 65535
        payload = image.astype(">u2").tobytes()
    else:
        raise DataError(f"PGM supports uint8/uint16, got {image.dtype}")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval as whitespace-separated ASCII tokens
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval == 255:
        img = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    elif maxval == 65535:
        img = np.frombuffer(data, dtype=">u2", count=width * height, offset=pos)
        img = img.astype(np.uint16)
    else:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    return img.reshape(height, width).copy()
