"""
Sample-Based Reachable Sets (dd_reach.py)
═════════════════════════════════════════
Grows the nested family Ξ⁰ ⊆ Ξ¹ ⊆ … ⊆ Ξ^{n*} from closed-loop safety-filter
rollouts on the plant:

    Ξ⁰ = {0}
    Ξ^l = conv( V(Ξ^{l-1}) ∪ {ξ_k of every backup whose ξ_N ∈ Ξ^{l-1}} )

Every rollout starts from the origin history and runs the filter against
Ξ^{l-1}; a rollout that aborts is restarted from the origin until the level's
N_i filter steps are used up. Each level gets its own seeded rollouts, so
families are reproducible.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dd_filter import (
    EXCITATION_HELD, EXCITATION_UNIFORM, Excitation, FilterFailure, FilterProblem,
    check_backup, filter_step, run_rollout,
)
from dd_geometry import (
    PRUNE_TOL, FamilyError, NestedFamily, VRepSet, family_from_dict, family_to_dict, hull_union,
)
from dd_hankel import DataArchive, ExtendedState, span_residual
from dd_plant import ConstraintBoxes, PlantLoop, PlantSpec
from dd_qp import DEFAULT_SETTINGS, QpSettings

log = logging.getLogger(__name__)

VERTEX_CAP = 2000
SPAN_TOL = 1e-7


@dataclass(frozen=True)
class ReachConfig:
    """Set-building knobs."""
    n_star: int = 5
    N_i: int = 50
    N: int = 6
    T_ini: int = 2
    seed: int = 0
    prune: bool = True
    excitation: str = EXCITATION_UNIFORM
    hold_max: int = 1
    vertex_cap: int = VERTEX_CAP

    def __post_init__(self):
        if self.n_star < 1:
            raise ValueError(f"n_star must be at least 1, got {self.n_star}")
        if self.N_i < 1:
            raise ValueError(f"N_i must be at least 1, got {self.N_i}")
        if self.T_ini < 1:
            raise ValueError(f"T_ini must be at least 1, got {self.T_ini}")
        if self.N <= 2 * self.T_ini:
            raise ValueError(f"prediction horizon N={self.N} must exceed 2·T_ini={2 * self.T_ini}")
        if self.excitation not in (EXCITATION_UNIFORM, EXCITATION_HELD):
            raise ValueError(f"unknown excitation kind {self.excitation!r}")
        if self.hold_max < 1:
            raise ValueError(f"hold_max must be at least 1, got {self.hold_max}")
        if self.vertex_cap < 1:
            raise ValueError(f"vertex_cap must be at least 1, got {self.vertex_cap}")


# ── Family Construction ────────────────────────────────────────

def _cap_vertices(grown: VRepSet, previous: VRepSet, cap: int, level: int) -> VRepSet:
    """At most `cap` vertices, always including every vertex of the previous level.

    New vertices are dropped newest first. The previous level's vertices are
    put back even when pruning had absorbed them, so Ξ^{l-1} ⊆ Ξ^l survives
    the truncation.
    """
    if grown.n_vertices <= cap:
        return grown
    prev = previous.vertices
    fresh = [v for v in grown.vertices
             if np.min(np.max(np.abs(prev - v), axis=1)) > PRUNE_TOL]
    room = max(cap - len(prev), 0)
    kept = min(room, len(fresh))
    log.warning(f"Level {level}: {grown.n_vertices} vertices exceed the cap of {cap}; "
                f"keeping the {len(prev)} of level {level - 1} and {kept} new ones")
    if len(prev) > cap:
        log.warning(f"Level {level}: level {level - 1} alone has {len(prev)} vertices, "
                    f"above the cap")
    return VRepSet(np.vstack([prev] + fresh[:kept]))


def grow_level(archive: DataArchive, boxes: ConstraintBoxes, target: VRepSet,
               cfg: ReachConfig, level: int, plant: PlantSpec,
               settings: QpSettings = DEFAULT_SETTINGS) -> tuple[VRepSet, int]:
    """Ξ^level from origin-started plant rollouts into `target`; returns the set and the backup count."""
    rng = np.random.default_rng([cfg.seed, level])
    points = []
    n_backups = 0
    budget = cfg.N_i
    while budget > 0:
        xi = ExtendedState.at_rest(archive.m, archive.p, archive.T_ini)
        exc = Excitation(boxes, rng, cfg.excitation, cfg.hold_max)
        rollout = run_rollout(archive, xi, target, budget, PlantLoop(plant, np.zeros(plant.n)),
                              exc, boxes, t0=cfg.N_i - budget, settings=settings)
        for backup in rollout.backups:
            points.append(backup.xi_matrix())
        n_backups += len(rollout.backups)
        budget -= max(len(rollout.records) + int(rollout.aborted), 1)
        if rollout.aborted:
            log.info(f"Level {level}: rollout restarted from the origin with "
                     f"{max(budget, 0)} steps left")

    if not points:
        log.warning(f"Level {level}: no backups collected; level repeats the previous one")
        return target, 0
    grown = hull_union(target, np.vstack(points), prune=cfg.prune)
    return _cap_vertices(grown, target, cfg.vertex_cap, level), n_backups


def build_family(archive: DataArchive, boxes: ConstraintBoxes, cfg: ReachConfig,
                 plant: PlantSpec, settings: QpSettings = DEFAULT_SETTINGS) -> NestedFamily:
    """Ξ⁰ = {0}, then n* levels grown from seeded rollouts on `plant`."""
    if cfg.N != archive.N or cfg.T_ini != archive.T_ini:
        raise ValueError(f"reach config (N={cfg.N}, T_ini={cfg.T_ini}) does not match "
                         f"the archive (N={archive.N}, T_ini={archive.T_ini})")
    levels = [VRepSet.singleton(np.zeros(archive.xi_dim))]
    counts = [1]
    for l in range(1, cfg.n_star + 1):
        vset, n_backups = grow_level(archive, boxes, levels[-1], cfg, l, plant, settings)
        levels.append(vset)
        counts.append(vset.n_vertices)
        log.info(f"Level {l}: {vset.n_vertices} vertices from {n_backups} backups")

    meta = {
        "n_star": cfg.n_star, "N_i": cfg.N_i, "seed": cfg.seed, "prune": cfg.prune,
        "excitation": cfg.excitation, "hold_max": cfg.hold_max,
        "vertex_counts": counts,
    }
    family = NestedFamily(levels, archive.T_ini, archive.m, archive.p, archive.N, boxes, meta)
    family.validate()
    return family


# ── Verification ───────────────────────────────────────────────

@dataclass
class LevelReport:
    level: int
    checked: int = 0
    passed: int = 0


@dataclass
class VerificationReport:
    levels: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def checked(self) -> int:
        return sum(r.checked for r in self.levels)

    @property
    def passed(self) -> int:
        return sum(r.passed for r in self.levels)

    @property
    def pass_rate(self) -> float:
        return 1.0 if self.checked == 0 else self.passed / self.checked

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checked": self.checked,
            "passed": self.passed,
            "pass_rate": self.pass_rate,
            "levels": [{"level": r.level, "checked": r.checked, "passed": r.passed}
                       for r in self.levels],
            "failures": self.failures,
        }


def verify_family(family: NestedFamily, archive: DataArchive, samples: int, seed: int,
                  settings: QpSettings = DEFAULT_SETTINGS) -> VerificationReport:
    """Spot-check the reachability property: sampled vertices of Ξ^l reach Ξ^{l-1} in N steps."""
    if family.T_ini != archive.T_ini or family.N != archive.N:
        raise ValueError(f"family (T_ini={family.T_ini}, N={family.N}) does not match "
                         f"the archive (T_ini={archive.T_ini}, N={archive.N})")
    rng = np.random.default_rng(seed)
    report = VerificationReport()
    u_zero = np.zeros(archive.m)
    for l in range(1, family.n_star + 1):
        lvl = family[l]
        picks = rng.choice(lvl.n_vertices, size=min(samples, lvl.n_vertices), replace=False)
        entry = LevelReport(l)
        for i in np.sort(picks):
            entry.checked += 1
            xi = ExtendedState.from_vector(lvl.vertices[i], archive.m, archive.p, archive.T_ini)
            try:
                _, backup = filter_step(
                    FilterProblem(archive, xi, family[l - 1], u_zero, family.boxes), settings)
            except FilterFailure as e:
                report.failures.append(f"level {l} vertex {i}: {e}")
                continue
            problems = check_backup(backup, family[l - 1], family.boxes, archive.T_ini)
            residual = span_residual(archive, backup.trajectory.stacked())
            if residual > SPAN_TOL * max(1.0, np.linalg.norm(backup.trajectory.stacked())):
                problems.append(f"backup leaves the archive span (residual {residual:.2e})")
            if problems:
                report.failures += [f"level {l} vertex {i}: {p}" for p in problems]
            else:
                entry.passed += 1
        report.levels.append(entry)
        log.debug(f"verify level {l}: {entry.passed}/{entry.checked}")
    return report


# ── Persistence ────────────────────────────────────────────────

def save_family(family: NestedFamily, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(family_to_dict(family), indent=2), encoding="utf-8")
    return path


def load_family(path, validate: bool = True) -> NestedFamily:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FamilyError(f"{path}: not a valid family file ({e})") from None
    return family_from_dict(data, validate=validate)
