"""Dataset, checkpoint, and report serialization.

Two dataset containers are supported: a CSV with header columns
``x_1..x_d, y_1..y_m``, and a raw columnar binary ("LEVA") holding
little-endian float64 with a fixed 32-byte header.  Reports are JSON /
JSON-lines / CSV with canonical float formatting so identical runs
produce identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputFormatError
from .linear_gaussian import Dataset

LEVA_MAGIC = b"LEVA"
LEVA_VERSION = 1
# magic, version u32, n u64, d u32, m u32, 8 reserved bytes
_LEVA_HEADER = struct.Struct("<4sIQII8x")


def _as_path(path) -> Path:
    return Path(path)


# ---------------------------------------------------------------------------
# CSV datasets


def _split_header(fields: list[str]) -> tuple[int, int]:
    d = 0
    while d < len(fields) and fields[d] == f"x_{d + 1}":
        d += 1
    m = 0
    while d + m < len(fields) and fields[d + m] == f"y_{m + 1}":
        m += 1
    if d == 0 or m == 0 or d + m != len(fields):
        raise InputFormatError(
            "bad column count: header must name x_1..x_d then y_1..y_m "
            "(d >= 1, m >= 1); got " + ",".join(fields)
        )
    return d, m


def read_dataset_csv(path) -> Dataset:
    path = _as_path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise InputFormatError(f"{path}: empty file")
        d, m = _split_header([f.strip() for f in header.split(",")])
        try:
            body = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            raise InputFormatError(f"{path}: {exc}") from exc
    if body.size == 0:
        raise InputFormatError(f"{path}: no data rows")
    if body.shape[1] != d + m:
        raise InputFormatError(
            f"{path}: row column count {body.shape[1]} does not match the "
            f"header's {d + m}"
        )
    return Dataset(x=body[:, :d], y=body[:, d:])


def write_dataset_csv(data: Dataset, path) -> None:
    path = _as_path(path)
    cols = [f"x_{j + 1}" for j in range(data.d)] + [
        f"y_{k + 1}" for k in range(data.m)
    ]
    body = np.hstack([data.x, data.y])
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in body:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# LEVA columnar binary


def read_dataset_leva(path) -> Dataset:
    path = _as_path(path)
    raw = path.read_bytes()
    if len(raw) < _LEVA_HEADER.size:
        raise InputFormatError(f"{path}: truncated header")
    magic, version, n, d, m = _LEVA_HEADER.unpack_from(raw)
    if magic != LEVA_MAGIC:
        raise InputFormatError(f"{path}: bad magic {magic!r}")
    if version != LEVA_VERSION:
        raise InputFormatError(f"{path}: unsupported version {version}")
    want = n * (d + m) * 8
    payload = raw[_LEVA_HEADER.size :]
    if len(payload) != want:
        raise InputFormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {want}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    block = flat.reshape((n, d + m), order="F")
    return Dataset(x=block[:, :d], y=block[:, d:])


def write_dataset_leva(data: Dataset, path) -> None:
    path = _as_path(path)
    header = _LEVA_HEADER.pack(LEVA_MAGIC, LEVA_VERSION, data.n, data.d, data.m)
    block = np.hstack([data.x, data.y]).astype("<f8")
    path.write_bytes(header + np.asfortranarray(block).tobytes(order="F"))


def read_dataset(path) -> Dataset:
    """Sniff the on-disk format (LEVA magic vs. CSV) and load."""
    path = _as_path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == LEVA_MAGIC:
        return read_dataset_leva(path)
    return read_dataset_csv(path)


# ---------------------------------------------------------------------------
# Model checkpoints: one JSON header line, then a raw float64 blob.

_CHECKPOINT_KEYS = ("kind", "widths", "seed", "loss")


def write_checkpoint(path, header: dict, theta: np.ndarray) -> None:
    missing = [k for k in _CHECKPOINT_KEYS if k not in header]
    if missing:
        raise ValueError(f"checkpoint header missing keys: {missing}")
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise ValueError("theta blob must be a flat vector")
    line = json.dumps(header, sort_keys=True) + "\n"
    _as_path(path).write_bytes(line.encode("utf-8") + theta.astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    raw = _as_path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise InputFormatError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(raw[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"{path}: malformed checkpoint header") from exc
    if not isinstance(header, dict):
        raise InputFormatError(f"{path}: checkpoint header must be an object")
    missing = [k for k in _CHECKPOINT_KEYS if k not in header]
    if missing:
        raise InputFormatError(f"{path}: checkpoint header missing keys {missing}")
    blob = raw[cut + 1 :]
    if len(blob) % 8:
        raise InputFormatError(f"{path}: theta blob length {len(blob)} not float64")
    theta = np.frombuffer(blob, dtype="<f8").copy()
    return header, theta


# ---------------------------------------------------------------------------
# Reports


def dump_json(path, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2)
    _as_path(path).write_text(text + "\n", encoding="utf-8")


def dump_json_lines(path, records) -> None:
    with _as_path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_json_lines(path) -> list[dict]:
    out = []
    with _as_path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_columns_csv(path, columns: dict[str, np.ndarray]) -> None:
    """Write named equal-length columns of floats as CSV."""
    names = list(columns)
    arrays = [np.asarray(columns[k], dtype=np.float64).ravel() for k in names]
    lengths = {a.size for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"column lengths differ: {sorted(lengths)}")
    with _as_path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for row in zip(*arrays):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def jsonable(value):
    """Recursively convert numpy scalars/arrays for json.dumps."""
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value
