"""Positive ordered sector grid: enumeration, ranking and stencil resolution.

Nodes are non-increasing integer tuples ``m >= i_1 >= i_2 >= ... >= i_d >= 0``
(lattice units of the spacing ``h``).  They are numbered in ascending
lexicographic order with the combinatorial number system, so no per-node
key storage is needed.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

INDEX_LIMIT = np.iinfo(np.int64).max
MAX_EXPERTS = 12


class StencilBudgetError(MemoryError):
    """The precomputed stencil table does not fit the memory budget.

    Callers should fall back to on-the-fly stencil resolution.
    """

    def __init__(self, required: int, budget: int):
        super().__init__(
            f"stencil table needs {required} bytes, budget is {budget} bytes; "
            "use on-the-fly mode"
        )
        self.required = required
        self.budget = budget


@dataclass(frozen=True)
class GridConfig:
    """Discrete problem instance: ``n_experts``, nodes per axis ``m``, spacing ``h``.

    The box half-width is always derived as ``T = m * h``.
    """

    n_experts: int
    m: int
    h: float

    def __post_init__(self):
        if not 2 <= self.n_experts <= MAX_EXPERTS:
            raise ValueError(f"n_experts must be in [2, {MAX_EXPERTS}], got {self.n_experts}")
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"m must be an integer >= 2, got {self.m}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"h must be positive, got {self.h}")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "h", float(self.h))

    @property
    def d(self) -> int:
        return self.n_experts - 1

    @property
    def T(self) -> float:
        return self.m * self.h

    @classmethod
    def from_box(cls, n_experts: int, h: float, box: float) -> "GridConfig":
        """Build a config from a requested half-width, rounding ``box`` up to a multiple of ``h``."""
        ratio = box / h
        m = math.ceil(ratio - 1e-9)
        if abs(m - ratio) > 1e-9:
            warnings.warn(
                f"box {box} is not a multiple of h={h}; using T = {m} * {h} = {m * h:g}",
                stacklevel=2,
            )
        return cls(n_experts, m, h)


def grid_count(d: int, m: int) -> int:
    """Number of sector nodes, ``C(m + d, d)``.

    Raises OverflowError when the count does not fit a signed 64-bit index.
    """
    if d < 1 or m < 0:
        raise ValueError(f"need d >= 1 and m >= 0, got d={d}, m={m}")
    count = math.comb(m + d, d)
    if count > INDEX_LIMIT:
        raise OverflowError(f"sector with d={d}, m={m} has {count} nodes, beyond 64-bit indexing")
    return count


def sort_point(t: Sequence[int]) -> tuple[int, ...]:
    return tuple(sorted(t, reverse=True))


def lift(t: Sequence[int]) -> tuple[tuple[int, ...], int]:
    """Shift a sorted tuple with trailing ``-1`` entries back into the positive sector.

    Returns ``(lifted, flag)``; ``flag`` is 1 when the point moved, in which
    case the value there is ``w(lifted) - h``.
    """
    t = tuple(int(a) for a in t)
    if any(a < b for a, b in zip(t, t[1:])):
        raise ValueError(f"lift expects a non-increasing tuple, got {t}")
    if not t or t[-1] >= 0:
        return t, 0
    if t[-1] < -1:
        raise ValueError(f"lift only handles entries >= -1, got {t}")
    first = next(k for k, a in enumerate(t) if a < 0)
    out = [a + 1 for a in t]
    out[first] += 1
    return tuple(out), 1


def _binomial_table(d: int, m: int) -> np.ndarray:
    """``table[k, i] = C(i + d - 1 - k, d - k)`` for positions k = 0..d-1, i = 0..m+1."""
    table = np.zeros((d, m + 2), dtype=np.int64)
    for k in range(d):
        r = d - k
        for i in range(m + 2):
            table[k, i] = math.comb(i + r - 1, r)
    return table


@dataclass(frozen=True, eq=False)
class SectorGrid:
    """The sector ``D+_d ∩ [0, T]^d`` with its lexicographic rank bijection."""

    config: GridConfig
    count: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "count", grid_count(self.config.d, self.config.m))

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def h(self) -> float:
        return self.config.h

    @cached_property
    def _table(self) -> np.ndarray:
        return _binomial_table(self.d, self.m)

    @cached_property
    def index_dtype(self):
        return np.int32 if self.count < 2**31 else np.int64

    def rank(self, i: Sequence[int]) -> int:
        i = tuple(int(a) for a in i)
        if len(i) != self.d:
            raise ValueError(f"expected {self.d} coordinates, got {i}")
        if i[0] > self.m or i[-1] < 0 or any(a < b for a, b in zip(i, i[1:])):
            raise ValueError(f"{i} is not a node of the sector with m={self.m}")
        return sum(math.comb(a + self.d - 1 - k, self.d - k) for k, a in enumerate(i))

    def unrank(self, r: int) -> tuple[int, ...]:
        if not 0 <= r < self.count:
            raise IndexError(f"rank {r} outside [0, {self.count})")
        return tuple(int(a) for a in self.unrank_many(np.array([r]))[0])

    def rank_many(self, idx: np.ndarray) -> np.ndarray:
        """Vectorised rank of sorted, in-sector rows of ``idx`` (shape ``(N, d)``)."""
        idx = np.asarray(idx)
        out = np.zeros(idx.shape[0], dtype=np.int64)
        for k in range(self.d):
            out += self._table[k][idx[:, k]]
        return out.astype(self.index_dtype, copy=False)

    def unrank_many(self, ranks: np.ndarray) -> np.ndarray:
        rem = np.asarray(ranks, dtype=np.int64).copy()
        coords = np.empty((rem.shape[0], self.d), dtype=np.int32)
        for k in range(self.d):
            col = self._table[k][: self.m + 1]
            a = np.searchsorted(col, rem, side="right") - 1
            coords[:, k] = a
            rem -= col[a]
        return coords

    @cached_property
    def coords(self) -> np.ndarray:
        """All nodes in rank order, shape ``(count, d)``, int32 lattice units."""
        c = np.empty((self.count, self.d), dtype=np.int32)
        for lo in range(0, self.count, BUILD_CHUNK):
            hi = min(lo + BUILD_CHUNK, self.count)
            c[lo:hi] = self.unrank_many(np.arange(lo, hi, dtype=np.int64))
        c.flags.writeable = False
        return c

    @cached_property
    def interior(self) -> np.ndarray:
        """Ranks of interior nodes (``i_1 <= m - 1``), ascending.

        Lexicographic order puts every node with ``i_1 < m`` first, so this is
        a prefix of the rank range.
        """
        return np.arange(grid_count(self.d, self.m - 1), dtype=self.index_dtype)

    @property
    def n_interior(self) -> int:
        return grid_count(self.d, self.m - 1)

    @property
    def points(self) -> np.ndarray:
        """Real coordinates of all nodes (computed on each access)."""
        return self.coords * self.h

    def resolve_neighbors(self, i: Sequence[int], v: Sequence[int]) -> "StencilEntry":
        i = tuple(int(a) for a in i)
        v = tuple(int(a) for a in v)
        if len(v) != self.d or not any(v) or any(a not in (0, 1) for a in v):
            raise ValueError(f"direction must be a nonzero binary {self.d}-vector, got {v}")
        self.rank(i)
        if i[0] >= self.m:
            raise ValueError(f"{i} is a boundary node; stencils exist for interior nodes only")
        plus = sort_point(a + b for a, b in zip(i, v))
        minus, flag = lift(sort_point(a - b for a, b in zip(i, v)))
        return StencilEntry(self.rank(plus), self.rank(minus), flag)


@dataclass(frozen=True)
class StencilEntry:
    plus_rank: int
    minus_rank: int
    correction: int


def directions(d: int) -> np.ndarray:
    """Nonzero binary d-vectors, ordered by their integer value read most-significant-first."""
    return np.array(list(itertools.product((0, 1), repeat=d))[1:], dtype=np.int32)


def resolve_direction(grid: SectorGrid, v: np.ndarray, ranks: np.ndarray | None = None):
    """Vectorised stencil resolution of one direction for the given interior ranks.

    Returns ``(plus, minus, correction)`` arrays aligned with ``ranks``.
    """
    if ranks is None:
        ranks = slice(0, grid.n_interior)
    c = grid.coords[ranks]
    v = np.asarray(v, dtype=np.int32)
    plus_pts = -np.sort(-(c + v), axis=1)
    minus_pts = -np.sort(-(c - v), axis=1)
    neg = minus_pts < 0
    flag = neg[:, -1]
    # first negative position; only meaningful where flag is set
    first = np.argmax(neg, axis=1)
    minus_pts[flag] += 1
    rows = np.nonzero(flag)[0]
    minus_pts[rows, first[rows]] += 1
    return grid.rank_many(plus_pts), grid.rank_many(minus_pts), flag.astype(np.uint8)


@dataclass(frozen=True, eq=False)
class StencilTable:
    """Precomputed neighbours for every (interior node, direction) pair.

    ``plus`` and ``minus`` have shape ``(n_dirs, n_interior)`` so each
    direction is contiguous.  Corrections are sparse (only nodes with a zero
    coordinate can be lifted), so they are kept as sorted lists of flagged
    interior ranks per direction.
    """

    grid: SectorGrid
    dirs: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    flagged: list[np.ndarray]

    def correction(self, k: int) -> np.ndarray:
        out = np.zeros(self.plus.shape[1], dtype=np.uint8)
        out[self.flagged[k]] = 1
        return out

    def entry(self, r: int, k: int) -> StencilEntry:
        f = self.flagged[k]
        j = np.searchsorted(f, r)
        flag = int(j < len(f) and f[j] == r)
        return StencilEntry(int(self.plus[k, r]), int(self.minus[k, r]), flag)

    @property
    def nbytes(self) -> int:
        return self.plus.nbytes + self.minus.nbytes + sum(f.nbytes for f in self.flagged)


def flagged_count(d: int, m: int) -> int:
    """Number of (interior node, direction) pairs whose minus neighbour is lifted.

    A node with ``j`` positive coordinates is lifted along ``v`` iff ``v`` has a
    one among its ``d - j`` trailing zero coordinates.
    """
    return sum(math.comb(m + j - 2, j) * (2**d - 2**j) for j in range(d + 1))


def stencil_table_bytes(grid: SectorGrid) -> int:
    n_dirs = 2**grid.d - 1
    item = np.dtype(grid.index_dtype).itemsize
    return item * (2 * grid.n_interior * n_dirs + flagged_count(grid.d, grid.m))


BUILD_CHUNK = 1 << 14


def build_stencils(grid: SectorGrid, memory_budget: int | None = None) -> StencilTable:
    """Resolve every interior stencil up front, in bounded-size chunks.

    Raises StencilBudgetError if the table would exceed ``memory_budget`` bytes.
    """
    need = stencil_table_bytes(grid)
    if memory_budget is not None and need > memory_budget:
        raise StencilBudgetError(need, memory_budget)
    dirs = directions(grid.d)
    n_int = grid.n_interior
    plus = np.empty((len(dirs), n_int), dtype=grid.index_dtype)
    minus = np.empty_like(plus)
    flagged = []
    for k, v in enumerate(dirs):
        parts = []
        for lo in range(0, n_int, BUILD_CHUNK):
            hi = min(lo + BUILD_CHUNK, n_int)
            plus[k, lo:hi], minus[k, lo:hi], corr = resolve_direction(grid, v, slice(lo, hi))
            parts.append(np.flatnonzero(corr).astype(grid.index_dtype) + lo)
        flagged.append(np.concatenate(parts) if parts else np.empty(0, dtype=grid.index_dtype))
    return StencilTable(grid, dirs, plus, minus, flagged)
