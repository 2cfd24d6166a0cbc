import math
import struct

import numpy as np
import pytest

from expert_pde.pde_core import Field, FullGrid, solve
from expert_pde.sector_grid import GridConfig, SectorGrid
from expert_pde.snapshot import (
    HEADER,
    MAGIC,
    VERSION,
    SnapshotError,
    UnsupportedVersionError,
    load_field,
    save_field,
)


@pytest.fixture(scope="module")
def solved():
    return solve(SectorGrid(GridConfig(4, 8, 0.2)))


def test_round_trip_is_bit_identical(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    back, meta = load_field(p)
    assert back.values.tobytes() == solved.values.tobytes()
    assert back.info == solved.info
    assert (meta.n_experts, meta.d, meta.m, meta.h, meta.kind) == (4, 3, 8, 0.2, "sector")
    assert meta.count == solved.grid.count
    assert not (tmp_path / "f.snap.tmp").exists()


def test_residual_metadata_survives(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    _, meta = load_field(p)
    assert meta.residual == solved.info.residual
    assert meta.tolerance == solved.info.tolerance
    assert meta.iterations == solved.info.iterations


def test_first_payload_value_is_origin(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    back, _ = load_field(p)
    assert back.grid.unrank(0) == (0, 0, 0)
    assert back.at((0, 0, 0)) == back.values[0] == solved.values[0]


def test_full_grid_round_trip(tmp_path):
    f = solve(FullGrid(GridConfig(3, 5, 0.2)))
    save_field(f, tmp_path / "g.snap")
    back, meta = load_field(tmp_path / "g.snap")
    assert meta.kind == "full" and isinstance(back.grid, FullGrid)
    assert back.values.tobytes() == f.values.tobytes()


def test_field_without_solver_info(tmp_path):
    g = SectorGrid(GridConfig(2, 4, 0.5))
    save_field(Field(g, np.arange(g.count, dtype=float)), tmp_path / "a.snap")
    back, meta = load_field(tmp_path / "a.snap")
    assert back.info is None and math.isnan(meta.dt)


def test_layout_is_little_endian_with_crc(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    blob = p.read_bytes()
    assert blob[:8] == MAGIC
    assert len(blob) == HEADER.size + 8 * solved.grid.count + 4
    first = struct.unpack_from("<d", blob, HEADER.size)[0]
    assert first == solved.values[0]


def test_truncated_file_is_rejected(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    p.write_bytes(p.read_bytes()[:-20])
    with pytest.raises(SnapshotError, match="truncated"):
        load_field(p)
    p.write_bytes(b"EXP")
    with pytest.raises(SnapshotError):
        load_field(p)


def test_corruption_is_detected(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    blob = bytearray(p.read_bytes())
    blob[HEADER.size + 17] ^= 0x40
    p.write_bytes(bytes(blob))
    with pytest.raises(SnapshotError, match="checksum"):
        load_field(p)


def _rewrite_header(path, **changes):
    import zlib

    blob = path.read_bytes()
    names = ["magic", "version", "n_experts", "d", "kind", "m", "count", "iterations", "h", "dt", "residual", "tolerance"]
    fields = dict(zip(names, HEADER.unpack_from(blob)))
    fields.update(changes)
    header = HEADER.pack(*[fields[k] for k in names])
    payload = blob[HEADER.size : -4]
    if "count" in changes:
        payload = payload[: 8 * changes["count"]].ljust(8 * changes["count"], b"\0")
    body = header + payload
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def test_future_version_is_rejected(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    _rewrite_header(p, version=VERSION + 1)
    with pytest.raises(UnsupportedVersionError):
        load_field(p)


def test_count_mismatch_is_rejected(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    _rewrite_header(p, count=solved.grid.count - 1)
    with pytest.raises(SnapshotError, match="count"):
        load_field(p)


def test_unknown_kind_and_bad_magic(solved, tmp_path):
    p = tmp_path / "f.snap"
    save_field(solved, p)
    _rewrite_header(p, kind=7)
    with pytest.raises(SnapshotError, match="kind"):
        load_field(p)
    save_field(solved, p)
    _rewrite_header(p, magic=b"NOTASNAP")
    with pytest.raises(SnapshotError, match="magic"):
        load_field(p)


def test_io_errors_carry_the_path(solved, tmp_path):
    missing = tmp_path / "nope" / "f.snap"
    with pytest.raises(OSError, match="nope"):
        save_field(solved, missing)
    with pytest.raises(OSError, match="nope"):
        load_field(missing)
