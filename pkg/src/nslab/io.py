"""Snapshot and table persistence.

Snapshots use the NSF1 layout: the magic bytes ``b"NSF1"``, three
little-endian ``u32`` (dimension, points per axis, component count), then
little-endian ``f64`` node values, row-major, one component after another.

CSV tables write floats with ``repr`` so every row parses back to the exact
same binary value.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

MAGIC = b"NSF1"
_HEADER = struct.Struct("<4sIII")


def write_snapshot(path: str | Path, d: int, n: int, components: Sequence[NDArray]) -> None:
    arrays = [np.ascontiguousarray(c, dtype="<f8") for c in components]
    for a in arrays:
        if a.shape != (n,) * d:
            raise ValueError(f"component shape {a.shape} does not match d={d}, n={n}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, d, n, len(arrays)))
        for a in arrays:
            fh.write(a.tobytes(order="C"))


def read_snapshot(path: str | Path) -> tuple[int, int, NDArray]:
    """Return ``(d, n, values)`` with ``values`` of shape ``(components, n, ..., n)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, d, n, ncomp = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    count = ncomp * n**d
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} values, found {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").astype(float).reshape((ncomp,) + (n,) * d)
    return d, n, values


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Mapping | Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, Mapping):
                row = [row[c] for c in columns]
            writer.writerow([format_value(v) for v in row])


def parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_csv(path: str | Path) -> tuple[list[str], list[list]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[parse_value(x) for x in r] for r in reader]
    return header, rows
