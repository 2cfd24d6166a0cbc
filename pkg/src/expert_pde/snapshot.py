"""Binary field snapshots.

Layout, all little-endian::

    magic      8 bytes   b"EXPPDE\\x00\\x01"
    version    u32
    n_experts  u32
    d          u32
    kind       u32       0 = sector, 1 = full grid
    m          u64
    count      u64
    iterations u64
    h          f64
    dt         f64       NaN when unknown
    residual   f64       NaN when unknown
    tolerance  f64       NaN when unknown
    payload    count * f64, rank order
    crc32      u32       over header and payload
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pde_core import Field, FullGrid, SolveInfo
from .sector_grid import GridConfig, SectorGrid

MAGIC = b"EXPPDE\x00\x01"
VERSION = 1
HEADER = struct.Struct("<8sIIIIQQQdddd")
KINDS = {"sector": 0, "full": 1}


class SnapshotError(ValueError):
    pass


class UnsupportedVersionError(SnapshotError):
    pass


@dataclass(frozen=True)
class SnapshotMeta:
    n_experts: int
    d: int
    m: int
    h: float
    kind: str
    count: int
    iterations: int
    dt: float
    residual: float
    tolerance: float

    @property
    def config(self) -> GridConfig:
        return GridConfig(self.n_experts, self.m, self.h)


def grid_kind(grid) -> str:
    return "full" if isinstance(grid, FullGrid) else "sector"


def _header(field: Field) -> bytes:
    grid = field.grid
    info = field.info
    nan = math.nan
    return HEADER.pack(
        MAGIC,
        VERSION,
        grid.config.n_experts,
        grid.d,
        KINDS[grid_kind(grid)],
        grid.m,
        grid.count,
        info.iterations if info else 0,
        grid.h,
        info.dt if info else nan,
        info.residual if info else nan,
        info.tolerance if info else nan,
    )


def save_field(field: Field, path: str | os.PathLike) -> None:
    """Write ``field`` to ``path`` and fsync it before returning."""
    path = Path(path)
    header = _header(field)
    payload = np.ascontiguousarray(field.values, dtype="<f8").tobytes()
    crc = zlib.crc32(payload, zlib.crc32(header))
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(payload)
            fh.write(struct.pack("<I", crc))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write snapshot {path}: {exc.strerror}") from exc


def load_field(path: str | os.PathLike) -> tuple[Field, SnapshotMeta]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read snapshot {path}: {exc.strerror}") from exc
    if len(blob) < HEADER.size + 4:
        raise SnapshotError(f"{path}: file too short for a snapshot header")
    fields = HEADER.unpack_from(blob)
    magic, version, n_experts, d, kind_code, m, count, iterations, h, dt, res, tol = fields
    if magic != MAGIC:
        raise SnapshotError(f"{path}: not a field snapshot (bad magic)")
    if version > VERSION:
        raise UnsupportedVersionError(f"{path}: snapshot version {version}, this library reads up to {VERSION}")
    expected_len = HEADER.size + 8 * count + 4
    if len(blob) != expected_len:
        raise SnapshotError(f"{path}: length {len(blob)} bytes, header implies {expected_len} (truncated?)")
    (crc,) = struct.unpack_from("<I", blob, expected_len - 4)
    if zlib.crc32(blob[: expected_len - 4]) != crc:
        raise SnapshotError(f"{path}: checksum mismatch")
    kinds = {v: k for k, v in KINDS.items()}
    if kind_code not in kinds:
        raise SnapshotError(f"{path}: unknown grid kind {kind_code}")
    kind = kinds[kind_code]
    if d != n_experts - 1:
        raise SnapshotError(f"{path}: d={d} inconsistent with n_experts={n_experts}")
    config = GridConfig(n_experts, m, h)
    grid = SectorGrid(config) if kind == "sector" else FullGrid(config)
    if grid.count != count:
        raise SnapshotError(f"{path}: header count {count} != grid count {grid.count}")
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=HEADER.size).astype(np.float64)
    meta = SnapshotMeta(n_experts, d, m, h, kind, count, iterations, dt, res, tol)
    info = None if math.isnan(tol) else SolveInfo(iterations, res, dt, tol)
    return Field(grid, values, info), meta
