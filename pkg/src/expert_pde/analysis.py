"""Experiments on solved fields: strategy optimality, convergence, localization, audits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .closed_form import exact_reduced
from .pde_core import (
    Field,
    FullGrid,
    SolveOptions,
    payoff,
    residual,
    solve_sector,
)
from .sector_grid import GridConfig, SectorGrid, directions, resolve_direction, sort_point, lift

log = logging.getLogger(__name__)

# region bounds are compared against lattice multiples of h
_EPS = 1e-9


@dataclass(frozen=True)
class StrategyId:
    bits: tuple[int, ...]
    id: int

    @property
    def label(self) -> str:
        return "".join(map(str, self.bits))


def _from_bits(bits: Sequence[int]) -> StrategyId:
    bits = tuple(int(b) for b in bits)
    return StrategyId(bits, int("".join(map(str, bits)), 2))


def canonical_strategy(v_reduced: Sequence[int], n: int) -> StrategyId:
    """Map a reduced direction to its canonical strategy number.

    The reduced direction ``v`` stands for the full vector ``(v, 0)``.  Since
    ``v`` and ``1 - v`` are the same adversary move, the representative with
    a leading zero is returned.
    """
    v = [int(b) for b in v_reduced]
    if len(v) != n - 1:
        raise ValueError(f"expected {n - 1} bits, got {len(v)}")
    if any(b not in (0, 1) for b in v):
        raise ValueError(f"not a binary vector: {v}")
    if not any(v):
        raise ValueError("the zero direction is degenerate and has no strategy id")
    full = v + [0]
    if full[0] == 1:
        full = [1 - b for b in full]
    return _from_bits(full)


def comb_strategy(n: int) -> StrategyId:
    if n < 2:
        raise ValueError("need at least two experts")
    return _from_bits([k % 2 for k in range(n)])


@dataclass
class StrategyRow:
    strategy: StrategyId
    direction: tuple[int, ...]
    min_score: float
    mean_score: float
    max_score: float
    is_comb: bool


@dataclass
class StrategyReport:
    n_experts: int
    h: float
    m: int
    region_bound: float
    rows: list[StrategyRow]
    nodes_evaluated: int
    nodes_skipped: int
    warnings: list[str] = dc_field(default_factory=list)

    def row(self, strategy_id: int) -> StrategyRow:
        for r in self.rows:
            if r.strategy.id == strategy_id:
                return r
        raise KeyError(strategy_id)

    def ranked(self) -> list[StrategyRow]:
        """Rows by decreasing min score (ties broken by id)."""
        return sorted(self.rows, key=lambda r: (-r.min_score, r.strategy.id))

    def table(self) -> list[dict]:
        return [
            {
                "strategy_id": r.strategy.id,
                "bits": r.strategy.label,
                "min": r.min_score,
                "mean": r.mean_score,
                "max": r.max_score,
                "is_comb": r.is_comb,
                "nodes_evaluated": self.nodes_evaluated,
                "nodes_skipped": self.nodes_skipped,
            }
            for r in self.rows
        ]


def _neighbors(grid, ranks: np.ndarray, v: np.ndarray):
    if isinstance(grid, FullGrid):
        c = grid.coords[ranks]
        return grid.rank_many(c + v), grid.rank_many(c - v), np.zeros(len(ranks), dtype=np.uint8)
    return resolve_direction(grid, v, ranks)


def hessians_at(field: Field, ranks: np.ndarray, dirs: np.ndarray | None = None) -> np.ndarray:
    """Second differences at interior ``ranks`` for each direction; shape ``(n_dirs, len(ranks))``."""
    grid = field.grid
    w = field.values
    h = grid.h
    dirs = directions(grid.d) if dirs is None else dirs
    out = np.empty((len(dirs), len(ranks)))
    for k, v in enumerate(dirs):
        p, q, c = _neighbors(grid, ranks, v)
        out[k] = ((w[p] + w[q]) - c * h - 2.0 * w[ranks]) / (h * h)
    return out


def region_ranks(grid, region_bound: float, *, sector_only: bool = True) -> np.ndarray:
    """Interior nodes whose coordinates all lie in ``[0, region_bound]`` (sector nodes for full grids)."""
    c = grid.coords
    lim = region_bound / grid.h + _EPS
    if isinstance(grid, FullGrid):
        keep = grid.interior_mask & (np.abs(c).max(axis=1) <= lim)
        if sector_only:
            keep &= (c[:, -1] >= 0) & np.all(c[:, :-1] >= c[:, 1:], axis=1)
        return np.flatnonzero(keep)
    ranks = np.arange(grid.n_interior)
    return ranks[c[: grid.n_interior, 0] <= lim]


def _tolerance(field: Field) -> float:
    if field.info is not None:
        return field.info.tolerance
    return field.grid.h**2 / 100.0


def optimality_report(field: Field, region_bound: float = 1.0, *, check_residual: bool = True) -> StrategyReport:
    """Min/mean/max optimality score of every adversary strategy over the region.

    The score of direction ``v`` at node ``x`` is its second difference divided
    by the largest one over all directions.  Nodes where ``2 (w - g)`` is not
    above ten residual tolerances are skipped (the ratio is 0/0 there).
    """
    grid = field.grid
    n = grid.d + 1
    if region_bound > grid.config.T - grid.h + _EPS:
        raise ValueError(f"region bound {region_bound} exceeds T - h = {grid.config.T - grid.h:g}")
    ranks = region_ranks(grid, region_bound)
    if len(ranks) == 0:
        raise ValueError("evaluation region contains no interior nodes")
    tol = _tolerance(field)
    warns = []
    if check_residual:
        res = residual(field)
        if res > tol * (1 + 1e-9):
            warns.append(f"field not converged: residual {res:.3e} > tolerance {tol:.3e}")
    dirs = directions(grid.d)
    H = hessians_at(field, ranks, dirs)
    gap = 2.0 * (field.values[ranks] - payoff(grid.coords[ranks] * grid.h))
    best = H.max(axis=0)
    ok = (gap > 10.0 * tol) & (best > 0)
    scores = H[:, ok] / best[ok]
    comb = comb_strategy(n)
    rows = []
    for k, v in enumerate(dirs):
        sid = canonical_strategy(v, n)
        s = scores[k]
        rows.append(
            StrategyRow(
                sid,
                tuple(int(a) for a in v),
                float(s.min()) if s.size else math.nan,
                float(s.mean()) if s.size else math.nan,
                float(s.max()) if s.size else math.nan,
                sid == comb,
            )
        )
    rows.sort(key=lambda r: r.strategy.id)
    if not ok.any():
        warns.append("every node in the region was skipped")
    return StrategyReport(n, grid.h, grid.m, region_bound, rows, int(ok.sum()), int((~ok).sum()), warns)


def player_strategy(field: Field, x: Sequence[int]) -> np.ndarray:
    """Player's mixed strategy at lattice node ``x``: forward differences of ``w``.

    Components ``1..n-1`` are ``(w(x + h e_i) - w(x)) / h``; the last one is
    one minus their sum, from ``grad u . 1 = 1``.
    """
    grid = field.grid
    h = grid.h
    x = tuple(int(a) for a in x)
    w0 = field.at(x)
    comps = []
    for i in range(grid.d):
        y = list(x)
        y[i] += 1
        if isinstance(grid, SectorGrid):
            y, flag = lift(sort_point(y))
            val = field.at(y) - flag * h
        else:
            val = field.at(y)
        comps.append((val - w0) / h)
    comps.append(1.0 - math.fsum(comps))
    return np.array(comps)


@dataclass
class ConvergenceRow:
    h: float
    sup_error: float
    fitted_slope: float
    reference: str = "exact"


def fit_slope(hs: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


def _shared(coarse: SectorGrid, fine: SectorGrid) -> tuple[np.ndarray, np.ndarray]:
    ratio = coarse.h / fine.h
    k = round(ratio)
    if abs(ratio - k) > 1e-9:
        raise ValueError(f"h={coarse.h} is not a multiple of the reference spacing {fine.h}")
    c = coarse.coords.astype(np.int64) * k
    keep = c[:, 0] <= fine.m
    return np.flatnonzero(keep), fine.rank_many(c[keep])


def convergence_study(
    n: int,
    resolutions: Sequence[tuple[int, float]],
    region_bound: float = 1.0,
    *,
    reference: Field | None = None,
    options: SolveOptions | None = None,
) -> list[ConvergenceRow]:
    """Sup error on the region for each ``(m, h)``, with a fitted log-log slope.

    Uses the closed form for ``n <= 4``; otherwise ``reference`` (a finer
    solve) must be supplied and errors are taken on shared nodes.
    """
    if len(resolutions) < 2:
        raise ValueError("need at least two resolutions")
    if n > 4 and reference is None:
        raise ValueError("n > 4 has no closed form; pass a reference field")
    res = sorted(resolutions, key=lambda mh: -mh[1])
    hs, errs = [], []
    for m, h in res:
        f = solve_sector(GridConfig(n, m, h), options)
        ranks = region_ranks(f.grid, region_bound)
        if reference is None:
            target = exact_reduced(n, f.grid.coords[ranks] * f.grid.h)
            err = np.abs(f.values[ranks] - target).max()
        else:
            mine, theirs = _shared(f.grid, reference.grid)
            mine_set = np.isin(mine, ranks)
            err = np.abs(f.values[mine[mine_set]] - reference.values[theirs[mine_set]]).max()
        hs.append(h)
        errs.append(float(err))
        log.info("n=%d h=%g sup error %.3e", n, h, err)
    slope = fit_slope(hs, errs)
    label = "exact" if reference is None else f"reference h={reference.grid.h:g}"
    return [ConvergenceRow(h, e, slope, label) for h, e in zip(hs, errs)]


def localization_study(
    n: int,
    T_values: Sequence[float],
    delta: float,
    h: float = 0.05,
    region_bound: float = 1.0,
    options: SolveOptions | None = None,
) -> list[tuple[float, float]]:
    """Interior effect of raising the Dirichlet data by ``delta`` for each box size.

    Returns ``(T, sup |w_delta - w|)`` over nodes with coordinates ``<= region_bound``.
    """
    if n > 3:
        raise ValueError("localization study is limited to n <= 3")
    if delta <= 0:
        raise ValueError("delta must be positive")
    # the signal at large T is far below h^2/100
    options = options or SolveOptions(residual_tolerance=1e-10 * max(delta, 1.0))
    out = []
    for T in T_values:
        cfg = GridConfig.from_box(n, h, T)
        base = solve_sector(cfg, options)
        bumped = solve_sector(cfg, options, boundary_offset=delta)
        ranks = region_ranks(base.grid, region_bound)
        diff = float(np.abs(bumped.values[ranks] - base.values[ranks]).max())
        out.append((cfg.T, diff))
    diffs = [d for _, d in out]
    if any(b >= a for a, b in zip(diffs, diffs[1:])):
        log.warning("localization differences are not decreasing in T: %s", diffs)
    return out


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float


@dataclass
class PropertyReport:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def property_report(field: Field, region_bound: float = 1.0, tolerance: float | None = None) -> PropertyReport:
    """Audit a solved field against the discrete solution's known properties.

    * residual: sup |w - F - g| on interior nodes, must be <= tol
    * lower_bound: min (w - g) over all nodes, must be >= -tol
    * lipschitz: largest one-step change along a binary direction, <= h + 2 tol
    * convexity: smallest second difference on the region, >= -4 tol / h^2
    """
    grid = field.grid
    h = grid.h
    tol = _tolerance(field) if tolerance is None else tolerance
    w = field.values
    checks = []

    res = residual(field)
    checks.append(Check("residual", res <= tol, res, tol))

    low = float(np.min(w - payoff(grid.points)))
    checks.append(Check("lower_bound", low >= -tol, low, -tol))

    interior = grid.interior
    lip = 0.0
    for v in directions(grid.d):
        p, q, c = _neighbors(grid, interior, v)
        wi = w[interior]
        lip = max(lip, float(np.abs(w[p] - wi).max()), float(np.abs(w[q] - c * h - wi).max()))
    checks.append(Check("lipschitz", lip <= h + 2 * tol, lip, h + 2 * tol))

    ranks = region_ranks(grid, region_bound, sector_only=False)
    conv = float(hessians_at(field, ranks).min()) if len(ranks) else math.inf
    checks.append(Check("convexity", conv >= -4 * tol / h**2, conv, -4 * tol / h**2))
    return PropertyReport(checks)
