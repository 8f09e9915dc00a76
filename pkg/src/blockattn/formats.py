"""Readers and writers for the plain file formats used by the CLI.

BTF1 tensor files::

    b"BTF1" | rank: u8 | rank x dim: u64 LE | prod(dims) x float64 LE

PGM files are binary P5 with 8-bit gray levels.  Config files are flat
``key=value`` text, one pair per line, ``#`` comments allowed.
"""

from __future__ import annotations

import csv
import io
import os
import struct

import numpy as np

BTF_MAGIC = b"BTF1"


class FormatError(ValueError):
    pass


def write_btf(path, array) -> None:
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    if a.ndim < 1 or a.ndim > 255:
        raise FormatError(f"cannot store rank-{a.ndim} array as BTF1")
    with open(path, "wb") as fh:
        fh.write(BTF_MAGIC)
        fh.write(struct.pack("<B", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes())


def read_btf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != BTF_MAGIC:
        raise FormatError(f"{path}: not a BTF1 file")
    if len(blob) < 5:
        raise FormatError(f"{path}: truncated header")
    rank = blob[4]
    header = 5 + 8 * rank
    if len(blob) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}Q", blob[5:header])
    count = int(np.prod(dims)) if rank else 1
    if len(blob) - header != 8 * count:
        raise FormatError(f"{path}: payload has {len(blob) - header} bytes, expected {8 * count}")
    return np.frombuffer(blob[header:], dtype="<f8").reshape(dims).astype(np.float64)


def write_csv_matrix(path, array) -> None:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise FormatError("CSV export supports rank-2 arrays only")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in a:
            writer.writerow([repr(float(v)) for v in row])


def read_csv_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: ragged or empty CSV matrix")
    return np.array(rows, dtype=np.float64)


def to_gray8(array, normalize: bool = True) -> np.ndarray:
    """Min-max normalise to 0..255 (constant maps go to 0), or clip if not normalising."""
    a = np.asarray(array, dtype=np.float64)
    if not normalize:
        return np.clip(np.rint(a), 0, 255).astype(np.uint8)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, array, normalize: bool = True) -> None:
    img = to_gray8(array, normalize=normalize)
    if img.ndim != 2:
        raise FormatError("PGM export needs a rank-2 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    data = blob[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_kv(path, mapping: dict) -> None:
    with open(path, "w") as fh:
        for key, value in mapping.items():
            fh.write(f"{key}={value}\n")


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(io.StringIO(text), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_kv(fh.read())


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
