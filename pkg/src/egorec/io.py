"""Binary matrix / graph formats and atomic file helpers.

``MMFT`` dense matrix layout (little-endian)::

    bytes 0..3   magic b"MMFT"
    u32          rows
    u32          cols
    u32          dtype code (0 = float32, 1 = float64)
    payload      rows * cols values, row-major

A sidecar ``<path>.tokens`` holds one row token per line.

``CSRG`` sparse graph layout (little-endian)::

    bytes 0..3   magic b"CSRG"
    u32 rows, u32 cols, u32 nnz
    u64[rows + 1] row_ptr
    u32[nnz]      col_idx
    f32[nnz]      values
    32 bytes      sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

MMFT_MAGIC = b"MMFT"
CSRG_MAGIC = b"CSRG"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


@contextmanager
def atomic_open(path, mode="w", **kwargs):
    """Write to a temp file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    with atomic_open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_jsonl(path, rows):
    with atomic_open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_matrix(path, matrix, tokens=None, dtype="float32"):
    """Write a 2-D array as ``MMFT``; ``dtype="float64"`` keeps values bit-exact."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {matrix.shape}")
    code = {"float32": 0, "float64": 1}[dtype]
    rows, cols = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype=DTYPE_CODES[code])
    with atomic_open(path, "wb") as fh:
        fh.write(MMFT_MAGIC + struct.pack("<III", rows, cols, code))
        fh.write(payload.tobytes())
    if tokens is not None:
        tokens = list(tokens)
        if len(tokens) != rows:
            raise FormatError(f"{len(tokens)} tokens for {rows} rows")
        with atomic_open(f"{path}.tokens", "w", encoding="utf-8") as fh:
            fh.writelines(f"{t}\n" for t in tokens)


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != MMFT_MAGIC:
            raise FormatError(f"{path}: not an MMFT file")
        rows, cols, code = struct.unpack("<III", header[4:])
        if code not in DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        dtype = DTYPE_CODES[code]
        payload = fh.read()
    if len(payload) != rows * cols * dtype.itemsize:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header says "
                          f"{rows}x{cols} {dtype.name}")
    data = np.frombuffer(payload, dtype=dtype)
    return data.reshape(rows, cols).astype(dtype.newbyteorder("="))


def read_tokens(path) -> list[str]:
    with open(f"{path}.tokens", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]


def write_graph(path, graph):
    """Serialize a :class:`~egorec.graphs.SparseGraph` as ``CSRG`` (values stored as f32)."""
    body = bytearray(CSRG_MAGIC + struct.pack("<III", graph.rows, graph.cols, graph.nnz))
    body += np.asarray(graph.row_ptr, dtype="<u8").tobytes()
    body += np.asarray(graph.col_idx, dtype="<u4").tobytes()
    body += np.asarray(graph.values, dtype="<f4").tobytes()
    digest = hashlib.sha256(body).digest()
    with atomic_open(path, "wb") as fh:
        fh.write(bytes(body) + digest)
    return digest.hex()


def read_graph(path):
    from .graphs import SparseGraph

    raw = Path(path).read_bytes()
    if raw[:4] != CSRG_MAGIC:
        raise FormatError(f"{path}: not a CSRG file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: content hash mismatch")
    rows, cols, nnz = struct.unpack("<III", body[4:16])
    off = 16
    row_ptr = np.frombuffer(body, dtype="<u8", count=rows + 1, offset=off).astype(np.int64)
    off += 8 * (rows + 1)
    col_idx = np.frombuffer(body, dtype="<u4", count=nnz, offset=off).astype(np.int64)
    off += 4 * nnz
    values = np.frombuffer(body, dtype="<f4", count=nnz, offset=off).astype(np.float64)
    return SparseGraph(rows, cols, row_ptr, col_idx, values)
