"""Command-line harness: solve, verify, optimality, convergence, localization, grid-info."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    convergence_study,
    localization_study,
    optimality_report,
    property_report,
    region_ranks,
)
from .closed_form import exact_reduced
from .pde_core import FullGrid, SolveOptions, SolverError, memory_estimate, solve
from .sector_grid import GridConfig, SectorGrid, grid_count
from .snapshot import SnapshotError, load_field, save_field

log = logging.getLogger("expert_pde")

OPTIMALITY_COLUMNS = ["strategy_id", "bits", "min", "mean", "max", "is_comb", "nodes_evaluated", "nodes_skipped"]


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _config(args) -> GridConfig:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cfg = GridConfig.from_box(args.experts, args.resolution, args.box)
    for w in caught:
        log.warning("%s", w.message)
    return cfg


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _manifest(args, outputs: list[Path], started: datetime, config: dict) -> None:
    first = outputs[0]
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "configuration": config,
        "outputs": [str(p) for p in outputs],
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "library_version": __version__,
    }
    _write_json(first.with_name(first.name + ".manifest.json"), manifest)


def _options(args) -> SolveOptions:
    return SolveOptions(
        dt=args.dt,
        residual_tolerance=args.tolerance,
        max_iterations=args.max_iterations,
        residual_check_interval=args.check_interval,
        checkpoint_interval=args.checkpoint_interval,
        allow_nonmonotone=args.allow_nonmonotone,
        workers=args.workers,
        memory_budget=args.memory_budget,
        stencil_mode=args.stencil_mode,
    )


def cmd_grid_info(args) -> dict:
    cfg = _config(args)
    sector = SectorGrid(cfg)
    est = memory_estimate(sector, "table")
    # box interior plus its one-node Dirichlet layer
    full_count = (2 * cfg.m + 3) ** cfg.d
    info = {
        "n_experts": cfg.n_experts,
        "d": cfg.d,
        "m": cfg.m,
        "h": cfg.h,
        "T": cfg.T,
        "sector_nodes": sector.count,
        "sector_interior_nodes": grid_count(cfg.d, cfg.m - 1),
        "full_grid_nodes": full_count,
        "directions": 2**cfg.d - 1,
        "stencil_table_bytes": est["stencils"],
        "memory_estimate_bytes": est["total"],
        "memory_estimate_on_the_fly_bytes": memory_estimate(sector, "on-the-fly")["total"],
    }
    for key, value in info.items():
        print(f"{key:34s} {value:,}" if isinstance(value, int) else f"{key:34s} {value:g}")
    if not args.output:
        return {}
    out = Path(args.output)
    _write_json(out, info)
    return {"config": {"n_experts": cfg.n_experts, "m": cfg.m, "h": cfg.h}, "outputs": [out]}


def cmd_solve(args) -> dict:
    opts = _options(args)
    initial = None
    start = 0
    if args.resume:
        prev, meta = load_field(args.resume)
        cfg = meta.config
        grid = prev.grid
        initial, start = prev.values, meta.iterations
        log.info("resuming %s at iteration %d", args.resume, start)
    else:
        if args.experts is None or args.resolution is None:
            raise UsageError("solve needs --experts and --resolution (or --resume)")
        cfg = _config(args)
        grid = FullGrid(cfg) if args.grid_kind == "full" else SectorGrid(cfg)
    out = Path(args.output)
    ckpt = out.with_name(out.name + ".ckpt")
    field = solve(
        grid,
        opts,
        initial=initial,
        start_iteration=start,
        checkpoint=(lambda f: save_field(f, ckpt)) if args.checkpoint_interval else None,
    )
    save_field(field, out)
    summary = {
        "output": str(out),
        "grid_kind": "full" if isinstance(grid, FullGrid) else "sector",
        "nodes": grid.count,
        "iterations": field.info.iterations,
        "residual": field.info.residual,
        "tolerance": field.info.tolerance,
        "dt": field.info.dt,
    }
    print(json.dumps(summary, sort_keys=True))
    return {"config": {"n_experts": cfg.n_experts, "m": cfg.m, "h": cfg.h}, "outputs": [out], **summary}


def cmd_verify(args) -> dict:
    field, meta = load_field(args.field)
    grid = field.grid
    audit = property_report(field, args.region_bound)
    result = {
        "n_experts": meta.n_experts,
        "h": meta.h,
        "m": meta.m,
        "grid_kind": meta.kind,
        "checks": {c.name: {"passed": bool(c.passed), "value": c.value, "threshold": c.threshold} for c in audit.checks},
    }
    if meta.n_experts <= 4:
        ranks = region_ranks(grid, args.region_bound)
        err = np.abs(field.values[ranks] - exact_reduced(meta.n_experts, grid.coords[ranks] * grid.h))
        result["sup_error"] = float(err.max())
        result["sup_error_over_h2"] = float(err.max() / meta.h**2)
    result["passed"] = bool(audit.passed)
    out = Path(args.output)
    _write_json(out, result)
    print(json.dumps(result, sort_keys=True))
    return {"config": {"field": args.field, "region_bound": args.region_bound}, "outputs": [out]}


def cmd_optimality(args) -> dict:
    field, meta = load_field(args.field)
    report = optimality_report(field, args.region_bound)
    for w in report.warnings:
        log.warning("%s", w)
    rows = {r["strategy_id"]: r for r in report.table()}
    ordered = [rows[r.strategy.id] for r in report.ranked()]
    out = Path(args.output)
    _write_csv(out, OPTIMALITY_COLUMNS, ordered)
    for r in ordered:
        print(f"{r['strategy_id']:4d} {r['bits']} min={r['min']:.12f} mean={r['mean']:.6f}" + (" COMB" if r["is_comb"] else ""))
    return {"config": {"field": args.field, "region_bound": args.region_bound}, "outputs": [out]}


def cmd_convergence(args) -> dict:
    resolutions = [(round(args.box / h), h) for h in args.resolutions]
    rows = convergence_study(args.experts, resolutions, args.region_bound, options=_options(args))
    out = Path(args.output)
    _write_csv(
        out,
        ["h", "sup_error", "fitted_slope", "reference"],
        [{"h": r.h, "sup_error": r.sup_error, "fitted_slope": r.fitted_slope, "reference": r.reference} for r in rows],
    )
    for r in rows:
        print(f"h={r.h:<8g} error={r.sup_error:.4e}")
    print(f"fitted slope {rows[0].fitted_slope:.3f}")
    return {"config": {"n_experts": args.experts, "resolutions": args.resolutions, "box": args.box}, "outputs": [out]}


def cmd_localization(args) -> dict:
    rows = localization_study(args.experts, args.boxes, args.delta, args.resolution, args.region_bound)
    out = Path(args.output)
    _write_csv(out, ["T", "interior_sup_difference"], [{"T": T, "interior_sup_difference": d} for T, d in rows])
    for T, d in rows:
        print(f"T={T:<6g} difference={d:.4e}")
    return {"config": {"n_experts": args.experts, "boxes": args.boxes, "delta": args.delta}, "outputs": [out]}


def _add_solver_flags(p):
    p.add_argument("--dt", type=float, help="relaxation step (default h^2/(1+h^2))")
    p.add_argument("--tolerance", type=float, help="residual tolerance (default h^2/100)")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--check-interval", type=int, default=100, help="iterations between residual checks")
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--allow-nonmonotone", action="store_true", help="permit dt above the monotone limit")
    p.add_argument("--workers", type=int, help="threads per sweep (env EXPERT_PDE_WORKERS)")
    p.add_argument("--memory-budget", type=int, help="bytes allowed for the stencil table")
    p.add_argument("--stencil-mode", choices=["auto", "table", "on-the-fly"], default="auto")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expert-pde", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grid-info", help="node counts and memory estimates")
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--resolution", type=float, required=True)
    p.add_argument("--box", type=float, default=5.0)
    p.add_argument("--output", help="also write the numbers as JSON")
    p.set_defaults(func=cmd_grid_info)

    p = sub.add_parser("solve", help="solve and write a field snapshot")
    p.add_argument("--experts", type=int)
    p.add_argument("--resolution", type=float)
    p.add_argument("--box", type=float, default=5.0)
    p.add_argument("--grid-kind", choices=["sector", "full"], default="sector")
    p.add_argument("--resume", help="continue from a snapshot's iterate")
    p.add_argument("--output", required=True)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="closed-form comparison (n <= 4) and property audit")
    p.add_argument("field")
    p.add_argument("--region-bound", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("optimality", help="strategy optimality scores as CSV")
    p.add_argument("field")
    p.add_argument("--region-bound", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_optimality)

    p = sub.add_parser("convergence", help="error against the closed form over resolutions")
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--resolutions", type=_floats, required=True, help="e.g. 0.1,0.05,0.025")
    p.add_argument("--box", type=float, default=5.0)
    p.add_argument("--region-bound", type=float, default=1.0)
    p.add_argument("--output", required=True)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("localization", help="interior effect of boundary perturbations")
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--boxes", type=_floats, required=True, help="e.g. 2,4,8")
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--resolution", type=float, default=0.05)
    p.add_argument("--region-bound", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_localization)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    started = datetime.now(timezone.utc)
    try:
        result = args.func(args)
    except (UsageError, SnapshotError, SolverError, ValueError, MemoryError, OSError) as exc:
        log.error("%s", exc)
        return 2
    if "outputs" in result:
        _manifest(args, result["outputs"], started, result.get("config", {}))
    return 0


def main() -> None:
    sys.exit(run_command())
