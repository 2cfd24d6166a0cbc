"""Discrete operator and fixed-point solver for the expert-advice PDE.

The scheme solves, on a lattice of spacing ``h``,

    w(x) - 1/2 * max_{v in {0,1}^d} D2_h w(x, v) = max(x_1, ..., x_d, 0)

with the centred second difference ``D2_h w(x, v) = (w(x+hv) - 2w(x) + w(x-hv)) / h^2``
and Dirichlet data ``w = payoff`` on the outer boundary.  Two grids are
supported: the symmetry-reduced sector (:class:`SectorGrid`) and, for
``d <= 3``, the plain box ``[-T, T]^d`` (:class:`FullGrid`) used for
cross-checking.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Union

import numpy as np

from .sector_grid import (
    GridConfig,
    SectorGrid,
    StencilBudgetError,
    StencilTable,
    BUILD_CHUNK,
    build_stencils,
    directions,
    resolve_direction,
    stencil_table_bytes,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "EXPERT_PDE_WORKERS"
MAX_ITERATION_CAP = 10**8
FULL_GRID_MAX_DIM = 3

Payoff = Callable[[np.ndarray], np.ndarray]


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, iterations: int, residual: float, tolerance: float):
        super().__init__(
            f"no convergence after {iterations} iterations: residual {residual:.3e} > {tolerance:.3e}"
        )
        self.iterations = iterations
        self.residual = residual
        self.tolerance = tolerance


class NonFiniteError(SolverError, ArithmeticError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite value in iterate at iteration {iteration}")
        self.iteration = iteration


def payoff(x: np.ndarray) -> np.ndarray:
    """Reduced max-regret payoff ``max(x_1, ..., x_d, 0)``; works on the last axis."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x.max(axis=-1), 0.0)


def monotone_dt(h: float) -> float:
    """Largest relaxation step keeping the Jacobi update monotone."""
    return h * h / (1.0 + h * h)


@dataclass(frozen=True)
class FullGrid:
    """Box ``[-T, T]^d`` plus a width-one Dirichlet layer, nodes in C order.

    Node index ``j`` along an axis sits at lattice coordinate ``j - (m + 1)``.
    """

    config: GridConfig

    def __post_init__(self):
        if self.config.d > FULL_GRID_MAX_DIM:
            raise ValueError(f"full grid supports d <= {FULL_GRID_MAX_DIM}, got d={self.config.d}")

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def h(self) -> float:
        return self.config.h

    @property
    def side(self) -> int:
        return 2 * self.m + 3

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    @property
    def count(self) -> int:
        return self.side**self.d

    @cached_property
    def coords(self) -> np.ndarray:
        grids = np.indices(self.shape, dtype=np.int32).reshape(self.d, -1).T
        return grids - (self.m + 1)

    @cached_property
    def points(self) -> np.ndarray:
        return self.coords * self.h

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return np.abs(self.coords).max(axis=1) <= self.m

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    @property
    def n_interior(self) -> int:
        return (2 * self.m + 1) ** self.d

    def rank(self, i) -> int:
        i = np.asarray(i, dtype=np.int64)
        if i.shape != (self.d,) or np.abs(i).max() > self.m + 1:
            raise ValueError(f"{tuple(i)} is not a node of the full grid")
        return int(np.ravel_multi_index(tuple(i + self.m + 1), self.shape))

    def rank_many(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64) + self.m + 1
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def unrank(self, r: int) -> tuple[int, ...]:
        return tuple(int(a) - self.m - 1 for a in np.unravel_index(r, self.shape))


Grid = Union[SectorGrid, FullGrid]


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    dt: float
    tolerance: float


@dataclass
class Field:
    """One value of ``w`` per grid node, in rank order."""

    grid: Grid
    values: np.ndarray
    info: SolveInfo | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.count,):
            raise ValueError(f"field has {self.values.shape} values, grid has {self.grid.count} nodes")

    def at(self, i) -> float:
        return float(self.values[self.grid.rank(i)])


@dataclass(frozen=True)
class SolveOptions:
    """Knobs of the fixed-point iteration; ``None`` means "derive from h"."""

    dt: float | None = None
    residual_tolerance: float | None = None
    max_iterations: int | None = None
    residual_check_interval: int = 100
    checkpoint_interval: int | None = None
    allow_nonmonotone: bool = False
    workers: int | None = None
    memory_budget: int | None = None
    stencil_mode: str = "auto"

    def resolved(self, h: float) -> "SolveOptions":
        dt = monotone_dt(h) if self.dt is None else float(self.dt)
        if not 0.0 < dt <= 1.0:
            raise ValueError(f"dt must be in (0, 1], got {dt}")
        if dt > monotone_dt(h) * (1 + 1e-12) and not self.allow_nonmonotone:
            raise ValueError(
                f"dt={dt} exceeds the monotone limit {monotone_dt(h):.6g}; pass allow_nonmonotone"
            )
        tol = h * h / 100.0 if self.residual_tolerance is None else float(self.residual_tolerance)
        if tol <= 0:
            raise ValueError("residual_tolerance must be positive")
        if self.residual_check_interval < 1:
            raise ValueError("residual_check_interval must be >= 1")
        if self.stencil_mode not in ("auto", "table", "on-the-fly"):
            raise ValueError(f"unknown stencil mode {self.stencil_mode!r}")
        return replace(self, dt=dt, residual_tolerance=tol, workers=resolve_workers(self.workers))


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return workers


def default_max_iterations(dt: float, initial_residual: float, tol: float) -> int:
    decades = max(math.log(initial_residual) - math.log(tol), 1.0)
    return int(min(MAX_ITERATION_CAP, 4 * math.ceil(min(decades / dt, MAX_ITERATION_CAP))))


def _chunks(n: int, parts: int) -> list[tuple[int, int]]:
    bounds = np.linspace(0, n, min(parts, max(n, 1)) + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


class SectorOperator:
    """``F(D2_h w) = 1/2 max(0, max_v D2_h w(., v))`` on the interior of a sector grid.

    With a :class:`StencilTable` neighbours are looked up; without one they
    are re-resolved from coordinates on every call (slow, constant memory).
    Both paths perform the same floating-point operations in the same order.
    """

    def __init__(self, grid: SectorGrid, table: StencilTable | None):
        self.grid = grid
        self.table = table
        self.dirs = directions(grid.d)
        self.n_out = grid.n_interior

    def _neighbors(self, k: int, lo: int, hi: int):
        if self.table is not None:
            flagged = self.table.flagged[k]
            a, b = np.searchsorted(flagged, (lo, hi))
            return self.table.plus[k, lo:hi], self.table.minus[k, lo:hi], flagged[a:b] - lo
        plus, minus, corr = resolve_direction(self.grid, self.dirs[k], slice(lo, hi))
        return plus, minus, np.flatnonzero(corr)

    def neighbor_sums(self, w: np.ndarray, k: int, lo: int, hi: int, out: np.ndarray, tmp: np.ndarray):
        """``w[plus] + w[minus] - correction * h`` for interior ranks ``lo:hi``, into ``out``."""
        # take() widens int32 indices to intp and on-the-fly resolution
        # allocates per row, so both are chunked to bound temporaries
        for a in range(lo, hi, BUILD_CHUNK):
            b = min(a + BUILD_CHUNK, hi)
            o, t = out[a - lo : b - lo], tmp[a - lo : b - lo]
            plus, minus, flagged = self._neighbors(k, a, b)
            # mode="raise" would buffer the output; indices are valid by construction
            np.take(w, plus, out=o, mode="clip")
            np.take(w, minus, out=t, mode="clip")
            o += t
            o[flagged] -= self.grid.h
        return out

    def center(self, w: np.ndarray, lo: int, hi: int) -> np.ndarray:
        return w[lo:hi]


class FullOperator:
    """Same operator on the box grid, using array slicing instead of index tables.

    Work is split along the first axis; ``lo:hi`` are interior rows.
    """

    def __init__(self, grid: FullGrid):
        self.grid = grid
        self.dirs = directions(grid.d)
        self.n_rows = 2 * grid.m + 1
        self.row = self.n_rows ** (grid.d - 1)
        self.n_out = grid.n_interior

    def _view(self, w: np.ndarray, shift, lo: int, hi: int) -> np.ndarray:
        W = w.reshape(self.grid.shape)
        first = slice(1 + lo + shift[0], 1 + hi + shift[0])
        rest = tuple(slice(1 + s, 1 + self.n_rows + s) for s in shift[1:])
        return W[(first,) + rest]

    def neighbor_sums(self, w, k, lo, hi, out, tmp):
        v = self.dirs[k]
        shape = (hi - lo,) + (self.n_rows,) * (self.grid.d - 1)
        np.add(self._view(w, v, lo, hi), self._view(w, -v, lo, hi), out=out.reshape(shape))
        return out

    def center(self, w: np.ndarray, lo: int, hi: int) -> np.ndarray:
        return self._view(w, (0,) * self.grid.d, lo, hi).reshape(-1)


def make_operator(grid: Grid, options: SolveOptions | None = None):
    if isinstance(grid, FullGrid):
        return FullOperator(grid)
    options = options or SolveOptions()
    mode = options.stencil_mode
    if mode == "on-the-fly":
        return SectorOperator(grid, None)
    try:
        table = build_stencils(grid, options.memory_budget)
    except StencilBudgetError:
        if mode == "table":
            raise
        log.warning("stencil table exceeds memory budget; resolving stencils on the fly")
        return SectorOperator(grid, None)
    return SectorOperator(grid, table)


class _Sweeper:
    """Evaluates the operator on every interior node, optionally split across threads.

    Each part owns two scratch buffers and results go straight into the
    caller's output array; only per-chunk index temporaries are allocated.
    """

    def __init__(self, grid: Grid, op, workers: int):
        self.grid = grid
        self.op = op
        if isinstance(op, FullOperator):
            self.parts = [((a, b), (a * op.row, b * op.row)) for a, b in _chunks(op.n_rows, workers)]
        else:
            self.parts = [((a, b), (a, b)) for a, b in _chunks(op.n_out, workers)]
        self.scratch = [(np.empty(b - a), np.empty(b - a)) for _, (a, b) in self.parts]
        self.pool = ThreadPoolExecutor(workers) if workers > 1 and len(self.parts) > 1 else None

    def _run(self, w, out, part, scratch):
        (lo, hi), (a, b) = part
        cur, tmp = scratch
        op = self.op
        best = op.neighbor_sums(w, 0, lo, hi, out[a:b], tmp)
        for k in range(1, len(op.dirs)):
            np.maximum(best, op.neighbor_sums(w, k, lo, hi, cur, tmp), out=best)
        np.multiply(op.center(w, lo, hi), 2.0, out=tmp)
        best -= tmp
        best /= self.grid.h * self.grid.h
        np.maximum(best, 0.0, out=best)
        best *= 0.5

    def __call__(self, w: np.ndarray, out: np.ndarray) -> np.ndarray:
        if self.pool is None:
            for part, tmp in zip(self.parts, self.scratch):
                self._run(w, out, part, tmp)
        else:
            list(self.pool.map(lambda pt: self._run(w, out, *pt), zip(self.parts, self.scratch)))
        return out

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def interior_ranks(grid: Grid) -> np.ndarray:
    return grid.interior


def boundary_ranks(grid: Grid) -> np.ndarray:
    if isinstance(grid, FullGrid):
        return np.flatnonzero(~grid.interior_mask)
    return np.arange(grid.n_interior, grid.count)


def _node_index(grid: Grid, which: str):
    """Interior or boundary nodes: a slice on the sector grid, a rank array otherwise."""
    if isinstance(grid, SectorGrid):
        return slice(0, grid.n_interior) if which == "interior" else slice(grid.n_interior, grid.count)
    return interior_ranks(grid) if which == "interior" else boundary_ranks(grid)


def payoff_at(grid: Grid, ranks, payoff_fn: Payoff = payoff) -> np.ndarray:
    """``payoff_fn`` at the given nodes (rank array or slice), evaluated in chunks."""
    if isinstance(ranks, slice):
        ranks = range(*ranks.indices(grid.count))
    out = np.empty(len(ranks))
    for lo in range(0, len(ranks), BUILD_CHUNK):
        hi = min(lo + BUILD_CHUNK, len(ranks))
        out[lo:hi] = payoff_fn(grid.coords[ranks[lo:hi]] * grid.h)
    return out


def operator_values(field: Field, options: SolveOptions | None = None) -> np.ndarray:
    """``F(D2_h w)`` at every interior node, in the order of :func:`interior_ranks`."""
    op = make_operator(field.grid, options)
    return _Sweeper(field.grid, op, 1)(field.values, np.empty(field.grid.n_interior))


def _hessian_neighbors(grid: Grid, r: int, v) -> tuple[int, int, int]:
    v = np.asarray(v, dtype=np.int64)
    if v.shape != (grid.d,) or not v.any() or ((v != 0) & (v != 1)).any():
        raise ValueError(f"direction must be a nonzero binary {grid.d}-vector, got {tuple(v)}")
    if isinstance(grid, FullGrid):
        if not grid.interior_mask[r]:
            raise ValueError(f"rank {r} is a boundary node")
        i = np.asarray(grid.unrank(r))
        return grid.rank(i + v), grid.rank(i - v), 0
    if r >= grid.n_interior:
        raise ValueError(f"rank {r} is a boundary node")
    e = grid.resolve_neighbors(grid.unrank(r), v)
    return e.plus_rank, e.minus_rank, e.correction


def discrete_hessian(field: Field, r: int, v) -> float:
    """Second difference of ``w`` at node ``r`` along binary direction ``v``.

    On the sector grid the minus neighbour is resolved through sorting and
    lifting, with a ``-h`` correction when it was lifted.
    """
    p, q, c = _hessian_neighbors(field.grid, r, v)
    w = field.values
    h = field.grid.h
    return float(((w[p] + w[q]) - c * h - 2.0 * w[r]) / (h * h))


def apply_operator(field: Field, r: int) -> float:
    best = max(discrete_hessian(field, r, v) for v in directions(field.grid.d))
    return 0.5 * max(0.0, best)


def residual(field: Field, payoff_fn: Payoff = payoff, options: SolveOptions | None = None) -> float:
    """Sup over interior nodes of ``|w - F(D2_h w) - payoff|``."""
    grid = field.grid
    ranks = interior_ranks(grid)
    Fw = operator_values(field, options)
    g = payoff_at(grid, ranks, payoff_fn)
    return float(np.max(np.abs(field.values[ranks] - Fw - g)))


def solve(
    grid: Grid,
    options: SolveOptions | None = None,
    *,
    payoff_fn: Payoff = payoff,
    boundary_offset: float = 0.0,
    initial: np.ndarray | None = None,
    start_iteration: int = 0,
    checkpoint: Callable[[Field], None] | None = None,
) -> Field:
    """Run ``w <- (1 - dt) w + dt (F(D2_h w) + g)`` until the residual is below tolerance.

    Boundary nodes hold ``payoff + boundary_offset`` and are never written.
    The iterate starts at the payoff unless ``initial`` is given (resuming a
    checkpoint, in which case its boundary values are kept as they are).
    """
    opts = (options or SolveOptions()).resolved(grid.h)
    dt, tol = opts.dt, opts.residual_tolerance
    op = make_operator(grid, opts)
    sweep = _Sweeper(grid, op, opts.workers)

    inner = _node_index(grid, "interior")
    g_int = payoff_at(grid, inner, payoff_fn)
    if initial is None:
        w = np.empty(grid.count)
        w[inner] = g_int
        bnd = _node_index(grid, "boundary")
        w[bnd] = payoff_at(grid, bnd, payoff_fn)
        w[bnd] += boundary_offset
    else:
        w = np.array(initial, dtype=np.float64)
        if w.shape != (grid.count,):
            raise ValueError("initial iterate does not match the grid")

    step = np.empty(grid.n_interior)
    max_iter = opts.max_iterations
    it = start_iteration
    res = math.inf
    try:
        while True:
            sweep(w, step)
            w_int = w[inner]
            step += g_int
            step -= w_int
            if (it - start_iteration) % opts.residual_check_interval == 0 or (
                max_iter is not None and it >= max_iter
            ):
                res = max(float(step.max()), -float(step.min())) if len(step) else 0.0
                if not math.isfinite(res):
                    raise NonFiniteError(it)
                log.debug("iteration %d residual %.3e", it, res)
                if res <= tol:
                    break
                if max_iter is None:
                    max_iter = default_max_iterations(dt, res, tol) + it
                if it >= max_iter:
                    raise ConvergenceError(it, res, tol)
            step *= dt
            w[inner] += step
            it += 1
            if checkpoint is not None and opts.checkpoint_interval and it % opts.checkpoint_interval == 0:
                checkpoint(Field(grid, w.copy(), SolveInfo(it, res, dt, tol)))
    finally:
        sweep.close()
    return Field(grid, w, SolveInfo(it, res, dt, tol))


def solve_sector(config: GridConfig, options: SolveOptions | None = None, **kwargs) -> Field:
    return solve(SectorGrid(config), options, **kwargs)


def solve_full(config: GridConfig, options: SolveOptions | None = None, **kwargs) -> Field:
    return solve(FullGrid(config), options, **kwargs)


def full_to_sector(full: Field, sector: SectorGrid) -> np.ndarray:
    """Values of a full-grid field at the nodes of a sector grid with the same (d, m, h)."""
    return full.values[full.grid.rank_many(sector.coords)]


def memory_estimate(grid: Grid, stencil_mode: str = "table") -> dict[str, int]:
    """Bytes held at the peak of a solve, by component.

    Counts the iterate, cached node coordinates and binomial ranking table,
    the stencil table (or the per-chunk resolution temporaries without one),
    the interior payoff and step vectors and the two sweep scratch buffers.
    """
    n, ni, d = grid.count, grid.n_interior, grid.d
    parts = {
        "values": 8 * n,
        "coords": 4 * d * n,
        "stencils": 0,
        "payoff": 8 * ni,
        "step": 8 * ni,
        "scratch": 16 * ni,
    }
    if isinstance(grid, FullGrid):
        # interior mask and interior rank list
        parts["interior"] = n + 8 * ni
    else:
        rows = min(BUILD_CHUNK, ni)
        parts["ranking"] = 8 * d * (grid.m + 2)
        # take() widens one chunk of int32 indices to intp for each neighbour
        parts["gather"] = 16 * rows
        if stencil_mode == "table":
            parts["stencils"] = stencil_table_bytes(grid)
        else:
            # sort/lift/rank temporaries for one chunk, measured per row
            parts["resolve"] = (10 * d + 26) * rows
    parts["total"] = sum(parts.values())
    return parts
