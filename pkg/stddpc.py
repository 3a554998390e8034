"""
ST-DDPC Experiment Runner
═════════════════════════
Command-line entry point for the whole pipeline:

    python stddpc.py collect    --config example_config.json --out out/dataset.csv
    python stddpc.py build-sets --config example_config.json --dataset out/dataset.csv --out out/family.json
    python stddpc.py run        --config example_config.json --dataset out/dataset.csv \\
                                --family out/family.json --controller stddpc --out out/
    python stddpc.py plotdata   --family out/family.json --logs out/stddpc_log.csv --out out/plots/
    python stddpc.py check      --config example_config.json --dataset out/dataset.csv --family out/family.json

Exit codes: 0 success, 1 invalid input (config, data, family file), 2 run failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dd_config import ExperimentConfig, load_config
from dd_control import (
    CONTROLLER_DDPC, CONTROLLER_STDDPC, ClosedLoopLog, OutsideRegionError,
    load_closed_loop_log, run_closed_loop, run_ddpc, save_closed_loop_log, save_summary,
)
from dd_geometry import NestedFamily, project_hull_2d
from dd_hankel import (
    DataArchive, excitation_rank, make_archive, span_residual,
)
from dd_plant import collect_dataset, generate_excitation, load_dataset, save_dataset, simulate
from dd_reach import build_family, load_family, save_family, verify_family

log = logging.getLogger("stddpc")

LOG_FORMAT = "%(asctime)s [stddpc] %(levelname)s: %(message)s"
AUDIT_WINDOWS = 20
AUDIT_TOL = 1e-8


# ── Shared Loading ─────────────────────────────────────────────

def _archive(cfg: ExperimentConfig, dataset_path) -> DataArchive:
    return make_archive(load_dataset(dataset_path), cfg.T_ini, cfg.N)


def _write_json(data: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


# ── Subcommands ────────────────────────────────────────────────

def cmd_collect(cfg: ExperimentConfig, out_path) -> int:
    ds = cfg.dataset
    x0 = np.zeros(cfg.plant.n) if ds.x0 is None else ds.x0
    excitation = generate_excitation(cfg.boxes, ds.length, ds.seed, ds.amplitude)
    traj = collect_dataset(cfg.plant, x0, excitation)
    L = cfg.N + cfg.T_ini
    rank, ok = excitation_rank(traj.inputs, L)
    print(f"PE at order L={L}: rank {rank}/{cfg.plant.m * L} -> {'pass' if ok else 'FAIL'}")
    make_archive(traj, cfg.T_ini, cfg.N)
    path = save_dataset(traj, out_path)
    print(f"✓ Dataset: {len(traj)} samples -> {path}")
    return 0


def cmd_build_sets(cfg: ExperimentConfig, dataset_path, out_path) -> int:
    archive = _archive(cfg, dataset_path)
    family = build_family(archive, cfg.boxes, cfg.reach, plant=cfg.plant,
                          settings=cfg.tolerances.qp_settings())
    for l, lvl in enumerate(family.levels):
        print(f"  level {l}: {lvl.n_vertices} vertices")
    nested = family.check_nested(cfg.tolerances.membership)
    print(f"{'✓' if not nested else '✗'} nestedness certificate "
          f"({len(nested)} violations)")
    path = save_family(family, out_path)
    print(f"✓ Family with n*={family.n_star} -> {path}")
    return 0


def cmd_run(cfg: ExperimentConfig, dataset_path, family_path, out_dir, controller: str) -> int:
    archive = _archive(cfg, dataset_path)
    out_dir = Path(out_dir)
    settings = cfg.tolerances.qp_settings()
    if controller == CONTROLLER_DDPC:
        result = run_ddpc(cfg.plant, archive, cfg.x0, cfg.weights, cfg.boxes,
                          steps=cfg.ddpc_steps, eps_conv=cfg.tolerances.convergence,
                          settings=settings)
        exit_code = 0
    else:
        if family_path is None:
            raise ValueError("--family is required for the stddpc controller")
        family = load_family(family_path)
        _check_family_matches(cfg, family)
        try:
            result = run_closed_loop(cfg.plant, archive, family, cfg.x0, cfg.weights, cfg.boxes,
                                     eps_conv=cfg.tolerances.convergence,
                                     hold_steps=cfg.hold_steps, settings=settings,
                                     tol=cfg.tolerances.membership)
        except OutsideRegionError as e:
            log.error(str(e))
            result = ClosedLoopLog(CONTROLLER_STDDPC, reason="outside region of attraction")
        exit_code = 0 if result.converged else 2

    save_closed_loop_log(result, out_dir / f"{controller}_log.csv")
    save_summary(result, out_dir / f"{controller}_summary.json")
    print(json.dumps(result.summary(), indent=2))
    return exit_code


def _projection_dims(family: NestedFamily) -> list[int]:
    """Coordinates of y_{-1} and y_{-2} (first output channel) in ξ."""
    off = family.m * family.T_ini
    if family.T_ini < 2:
        return [0, off]
    return [off + (family.T_ini - 1) * family.p, off + (family.T_ini - 2) * family.p]


def _series_header(family: NestedFamily) -> str:
    return ",".join(["t"] + [f"u_{i}" for i in range(family.m)]
                    + [f"y_{i}" for i in range(family.p)] + ["level", "w"])


def cmd_plotdata(family_path, log_paths: Sequence[str], out_dir) -> int:
    family = load_family(family_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = _projection_dims(family)
    index = {"dims": dims, "levels": [], "logs": []}

    for l, lvl in enumerate(family.levels):
        poly = project_hull_2d(lvl, dims)
        path = out_dir / f"level_{l}_projection.csv"
        np.savetxt(path, poly, delimiter=",", header="a,b", comments="", fmt="%.17g")
        index["levels"].append({"level": l, "file": path.name, "n_points": len(poly)})

    T = family.T_ini
    for lp in log_paths:
        out = load_closed_loop_log(lp)
        stem = Path(lp).stem
        series = out_dir / f"{stem}_series.csv"
        np.savetxt(series,
                   np.column_stack([[r.t for r in out.rows], out.inputs(), out.outputs(),
                                    out.levels(), out.windows()]) if out.rows
                   else np.zeros((0, 3 + family.m + family.p)),
                   delimiter=",", header=_series_header(family), comments="", fmt="%.17g")
        # ξ(t+1) becomes available once T_ini samples are logged
        points = []
        for k in range(T - 1, out.steps):
            rows = out.rows[k - T + 1:k + 1]
            xi = np.concatenate([np.concatenate([r.u for r in rows]),
                                 np.concatenate([r.y for r in rows])])
            points.append(np.concatenate([[rows[-1].t + 1], xi, [rows[-1].level]]))
        pts_path = out_dir / f"{stem}_points.csv"
        np.savetxt(pts_path, np.array(points) if points else np.zeros((0, family.dim + 2)), delimiter=",",
                   header="t," + ",".join(f"xi_{i}" for i in range(family.dim)) + ",level",
                   comments="", fmt="%.17g")
        index["logs"].append({"log": str(lp), "series": series.name, "points": pts_path.name})

    _write_json(index, out_dir / "index.json")
    print(f"✓ Plot data for {len(family.levels)} levels and {len(log_paths)} log(s) -> {out_dir}")
    return 0


def _check_family_matches(cfg: ExperimentConfig, family: NestedFamily):
    if family.T_ini != cfg.T_ini or family.N != cfg.N:
        raise ValueError(f"family (T_ini={family.T_ini}, N={family.N}) does not match the "
                         f"config (T_ini={cfg.T_ini}, N={cfg.N})")


def _span_audit(cfg: ExperimentConfig, archive: DataArchive, seed: int) -> list[str]:
    """Fresh plant windows must lie in the archive span; perturbed ones must not."""
    rng = np.random.default_rng(seed)
    problems = []
    for i in range(AUDIT_WINDOWS):
        x0 = rng.uniform(-1.0, 1.0, cfg.plant.n)
        u = rng.uniform(cfg.boxes.u_lo, cfg.boxes.u_hi, size=(archive.L, cfg.plant.m))
        w = simulate(cfg.plant, x0, u).stacked()
        scale = max(1.0, float(np.linalg.norm(w)))
        if span_residual(archive, w) > AUDIT_TOL * scale:
            problems.append(f"fresh window {i} is not in the archive span")
        w[-1] += 1.0
        if span_residual(archive, w) <= AUDIT_TOL * scale:
            problems.append(f"perturbed window {i} passes the span test")
    return problems


def cmd_check(cfg: ExperimentConfig, dataset_path, family_path, out_path=None) -> int:
    archive = _archive(cfg, dataset_path)
    report = {"ok": True, "problems": []}
    family = load_family(family_path, validate=False)
    try:
        _check_family_matches(cfg, family)
        family.validate()
    except ValueError as e:
        report["problems"].append(str(e))
    else:
        verification = verify_family(family, archive, cfg.verify_samples, cfg.verify_seed,
                                     cfg.tolerances.qp_settings())
        report["verification"] = verification.to_dict()
        report["problems"] += verification.failures
    report["problems"] += _span_audit(cfg, archive, cfg.verify_seed)
    report["ok"] = not report["problems"]
    if out_path is not None:
        _write_json(report, out_path)
    print(json.dumps(report, indent=2))
    return 0 if report["ok"] else 2


# ── Entry Point ────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="stddpc", description="Set-theoretic data-driven predictive control")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common], help="record the offline dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="out/dataset.csv")

    p = sub.add_parser("build-sets", parents=[common], help="build the nested reachable sets")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="out/family.json")

    p = sub.add_parser("run", parents=[common], help="closed-loop run of a controller")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--family", default=None)
    p.add_argument("--controller", choices=[CONTROLLER_STDDPC, CONTROLLER_DDPC], default=CONTROLLER_STDDPC)
    p.add_argument("--out", default="out")

    p = sub.add_parser("plotdata", parents=[common], help="emit projection and time-series data")
    p.add_argument("--family", required=True)
    p.add_argument("--logs", nargs="*", default=[])
    p.add_argument("--out", default="out/plots")

    p = sub.add_parser("check", parents=[common], help="verify dataset and family artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--family", required=True)
    p.add_argument("--out", default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format=LOG_FORMAT, level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        if args.command == "plotdata":
            return cmd_plotdata(args.family, args.logs, args.out)
        cfg = load_config(args.config, seed=args.seed)
        if args.command == "collect":
            return cmd_collect(cfg, args.out)
        if args.command == "build-sets":
            return cmd_build_sets(cfg, args.dataset, args.out)
        if args.command == "run":
            return cmd_run(cfg, args.dataset, args.family, args.out, args.controller)
        return cmd_check(cfg, args.dataset, args.family, args.out)
    except ValueError as e:
        log.error(str(e))
        return 1
    except (RuntimeError, OSError) as e:
        log.error(str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
