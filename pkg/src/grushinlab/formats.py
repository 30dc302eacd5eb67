"""On-disk formats: CSV tables, stable JSON, and the binary trajectory block.

Binary block layout (all little-endian):

    b"GRSH" | version u8 | ndim u8 | ndim × u64 dims | f64 dt | f64 t0 | row-major f64 data
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"GRSH"
VERSION = 1


class FormatError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(header, rows))
    return path


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Header and a float array of the rows (empty cells become NaN, booleans 0/1)."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    cells = {"": np.nan, "true": 1.0, "false": 0.0}
    data = np.array([[cells[c] if c in cells else float(c) for c in r] for r in body], dtype=float)
    return header, data.reshape(len(body), len(header))


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def json_text(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json_text(obj))
    return path


def read_json(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def pack_block(data: np.ndarray, dt: float = 0.0, t0: float = 0.0) -> bytes:
    a = np.ascontiguousarray(data, dtype="<f8")
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + struct.pack("<BB", VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + struct.pack("<dd", float(dt), float(t0)) + a.tobytes(order="C")


def unpack_block(buf: bytes) -> tuple[np.ndarray, float, float]:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic bytes")
    version, ndim = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported block version {version}")
    off = 6
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dt, t0 = struct.unpack_from("<dd", buf, off)
    off += 16
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - off != 8 * count:
        raise FormatError(f"payload has {len(buf) - off} bytes, expected {8 * count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
    return data.astype(float), float(dt), float(t0)


def write_block(path: str | Path, data: np.ndarray, dt: float = 0.0, t0: float = 0.0) -> Path:
    path = Path(path)
    path.write_bytes(pack_block(data, dt, t0))
    return path


def read_block(path: str | Path) -> tuple[np.ndarray, float, float]:
    return unpack_block(Path(path).read_bytes())
