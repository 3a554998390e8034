"""
Set-Theoretic DDPC (dd_control.py)
══════════════════════════════════
ST-DDPC steers the extended state down the nested family one level at a
time. With ξ(t) ∈ Ξ^l and a sliding window w ∈ {1 … N-1} it solves

    min  Σ_{k=0}^{N-1} ‖ȳ_k‖²_{Q_y} + ‖ū_k‖²_{Q_u}
    s.t. data-driven model, past pinning, boxes,
         ξ_k ∈ Ξ^l      k = 1 … w-1
         ξ_k ∈ Ξ^{l-1}  k = w … N

applies ū_0, and updates (l, w). The DDPC baseline is the same problem with
no set constraints.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from dd_filter import PredictionProgram
from dd_geometry import MEMBERSHIP_TOL, NestedFamily, smallest_level
from dd_hankel import DataArchive, ExtendedState, window_to_trajectory
from dd_plant import ConstraintBoxes, PlantLoop, PlantSpec
from dd_qp import DEFAULT_SETTINGS, QpSettings, QpSolution, solve

log = logging.getLogger(__name__)

EPS_CONV = 1e-2
PSD_TOL = 1e-12
NO_LEVEL = -1

STATUS_BACKUP = "backup"
STATUS_HOLD = "hold"

CONTROLLER_STDDPC = "stddpc"
CONTROLLER_DDPC = "ddpc"


class OutsideRegionError(RuntimeError):
    """Extended state lies in no level of the family."""


class ControllerInfeasible(RuntimeError):
    """ST-DDPC QP failed and no backup plan is left."""

    def __init__(self, message: str, solution: Optional[QpSolution] = None):
        super().__init__(message)
        self.solution = solution


# ── Data Classes ───────────────────────────────────────────────

@dataclass(frozen=True)
class ControllerWeights:
    Q_y: np.ndarray
    Q_u: np.ndarray

    def __post_init__(self):
        for name in ("Q_y", "Q_u"):
            Q = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if Q.shape[0] != Q.shape[1]:
                raise ValueError(f"{name} must be square, got {Q.shape}")
            if not np.allclose(Q, Q.T, atol=PSD_TOL):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(Q)) < -PSD_TOL:
                raise ValueError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, Q)

    @classmethod
    def scalar(cls, q_y: float, q_u: float, m: int = 1, p: int = 1) -> "ControllerWeights":
        return cls(q_y * np.eye(p), q_u * np.eye(m))


@dataclass(frozen=True)
class ControllerState:
    """Current level, sliding window and history; `plan` holds ū_1 … of the last optimal solve."""
    level: int
    w: int
    history: ExtendedState
    plan: tuple = ()

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"level must be non-negative, got {self.level}")
        if self.w < 1:
            raise ValueError(f"window must be at least 1, got {self.w}")


@dataclass
class StepDiagnostics:
    status: str
    objective: float
    solve_ms: float
    used_backup: bool = False


@dataclass
class LogRow:
    t: int
    u: np.ndarray
    y: np.ndarray
    level: int
    w: int
    status: str
    objective: float
    solve_ms: float


@dataclass
class ClosedLoopLog:
    controller: str
    rows: list = field(default_factory=list)
    initial_level: int = NO_LEVEL
    converged: bool = False
    reason: str = ""
    final_state: Optional[ExtendedState] = None

    def append(self, row: LogRow):
        if self.rows and row.t != self.rows[-1].t + 1:
            raise ValueError(f"log time stamps must be contiguous: {self.rows[-1].t} then {row.t}")
        self.rows.append(row)

    @property
    def steps(self) -> int:
        return len(self.rows)

    def inputs(self) -> np.ndarray:
        return np.array([r.u for r in self.rows]).reshape(len(self.rows), -1)

    def outputs(self) -> np.ndarray:
        return np.array([r.y for r in self.rows]).reshape(len(self.rows), -1)

    def levels(self) -> list[int]:
        return [r.level for r in self.rows]

    def windows(self) -> list[int]:
        return [r.w for r in self.rows]

    @property
    def any_infeasible(self) -> bool:
        return any(r.status not in ("optimal", STATUS_HOLD) for r in self.rows) or \
            "infeasible" in self.reason

    def summary(self) -> dict:
        levels = [l for l in self.levels() if l != NO_LEVEL]
        if self.initial_level != NO_LEVEL:
            levels.append(self.initial_level)
        return {
            "controller": self.controller,
            "converged": self.converged,
            "steps": self.steps,
            "max_abs_u": float(np.max(np.abs(self.inputs()))) if self.rows else 0.0,
            "max_abs_y": float(np.max(np.abs(self.outputs()))) if self.rows else 0.0,
            "min_level_reached": min(levels) if levels else None,
            "any_infeasible": self.any_infeasible,
            "reason": self.reason,
        }


# ── QP Assembly ────────────────────────────────────────────────

def _add_stage_cost(prog: PredictionProgram, weights: ControllerWeights):
    archive = prog.archive
    if weights.Q_u.shape != (archive.m, archive.m) or weights.Q_y.shape != (archive.p, archive.p):
        raise ValueError(f"weights must be Q_y {archive.p}x{archive.p} and Q_u {archive.m}x{archive.m}")
    steps = range(archive.N)
    prog.add_tracking_cost(np.concatenate([archive.u_index(k) for k in steps]),
                           np.kron(np.eye(archive.N), weights.Q_u))
    prog.add_tracking_cost(np.concatenate([archive.y_index(k) for k in steps]),
                           np.kron(np.eye(archive.N), weights.Q_y))


def _stddpc_program(archive: DataArchive, family: NestedFamily, state: ControllerState,
                    weights: ControllerWeights, boxes: ConstraintBoxes,
                    relaxed: bool = False) -> PredictionProgram:
    """ST-DDPC blocks; `relaxed` keeps ξ_1 … ξ_{N-1} in Ξ^l and only ξ_N in Ξ^{l-1}."""
    l = state.level
    w = archive.N if relaxed else state.w
    if l == 0:
        raise ValueError("level 0 is the equilibrium; hold u = 0 instead of solving")
    if l > family.n_star:
        raise ValueError(f"level {l} exceeds the family's n* = {family.n_star}")
    if state.w > archive.N - 1:
        raise ValueError(f"window {state.w} exceeds N-1 = {archive.N - 1}")
    if family.T_ini != archive.T_ini or family.N != archive.N:
        raise ValueError("family and archive disagree on T_ini or N")
    prog = PredictionProgram(archive)
    prog.pin_history(state.history)
    for k in range(1, w):
        prog.constrain_member(k, family[l])
    for k in range(w, archive.N + 1):
        prog.constrain_member(k, family[l - 1])
    prog.constrain_boxes(boxes)
    _add_stage_cost(prog, weights)
    return prog


def assemble_stddpc_qp(archive: DataArchive, family: NestedFamily, state: ControllerState,
                       weights: ControllerWeights, boxes: ConstraintBoxes):
    return _stddpc_program(archive, family, state, weights, boxes).build()[0]


def _ddpc_program(archive: DataArchive, history: ExtendedState, weights: ControllerWeights,
                  boxes: ConstraintBoxes) -> PredictionProgram:
    prog = PredictionProgram(archive)
    prog.pin_history(history)
    prog.constrain_boxes(boxes)
    _add_stage_cost(prog, weights)
    return prog


def _solve_program(prog: PredictionProgram, settings: QpSettings):
    """(solution, planned inputs ū_0 … ū_{N-1} or None, objective, solve time in ms)."""
    qp, const = prog.build()
    started = time.perf_counter()
    sol = solve(qp, settings)
    solve_ms = (time.perf_counter() - started) * 1000.0
    if not sol.ok:
        return sol, None, float("nan"), solve_ms
    traj = window_to_trajectory(prog.archive, prog.window(sol.z))
    return sol, traj.inputs[prog.archive.T_ini:].copy(), sol.objective + const, solve_ms


# ── Controller Steps ───────────────────────────────────────────

def update_window(w: int, N: int, level_before: int, level_after: int) -> int:
    """Sliding window: decrement, reset to N-1 on reaching 0 or on a level decrease."""
    w -= 1
    if w == 0 or level_after < level_before:
        w = N - 1
    return w


def stddpc_step(archive: DataArchive, family: NestedFamily, state: ControllerState,
                weights: ControllerWeights, boxes: ConstraintBoxes, medium,
                settings: QpSettings = DEFAULT_SETTINGS,
                tol: float = MEMBERSHIP_TOL) -> tuple[np.ndarray, ControllerState, StepDiagnostics]:
    """One ST-DDPC iteration: solve, apply ū_0 to `medium`, measure, update (l, w)."""
    prog = _stddpc_program(archive, family, state, weights, boxes)
    sol, planned, objective, solve_ms = _solve_program(prog, settings)
    if planned is not None:
        u = planned[0]
        plan = tuple(planned[1:])
        diag = StepDiagnostics(sol.status, objective, solve_ms)
    elif state.plan:
        log.warning(f"ST-DDPC QP {sol.status} at level {state.level}, w={state.w}; "
                    "applying the previous plan")
        u = state.plan[0]
        plan = state.plan[1:]
        diag = StepDiagnostics(sol.status, float("nan"), solve_ms, used_backup=True)
    else:
        # no plan yet: ask only for Ξ^{l-1} at the terminal window
        relaxed = _stddpc_program(archive, family, state, weights, boxes, relaxed=True)
        _, planned, objective, extra_ms = _solve_program(relaxed, settings)
        if planned is None:
            raise ControllerInfeasible(f"ST-DDPC QP {sol.status} with no backup plan "
                                       f"(level {state.level}, w={state.w})", sol)
        log.warning(f"ST-DDPC QP {sol.status} at level {state.level}, w={state.w}; "
                    "applying the relaxed-window solution")
        u = planned[0]
        plan = tuple(planned[1:])
        diag = StepDiagnostics(sol.status, objective, solve_ms + extra_ms, used_backup=True)

    y = np.atleast_1d(medium.step(u))
    history = state.history.shifted(u, y)
    level = smallest_level(family, history.vector, tol)
    if level is None:
        raise OutsideRegionError("extended state left every level of the family")
    w = update_window(state.w, archive.N, state.level, level)
    log.debug(f"stddpc: u={u} y={y} level {state.level}->{level} w {state.w}->{w} "
              f"status={diag.status} ({solve_ms:.1f} ms)")
    return u, ControllerState(level, w, history, plan), diag


def ddpc_baseline_step(archive: DataArchive, history: ExtendedState, weights: ControllerWeights,
                       boxes: ConstraintBoxes, settings: QpSettings = DEFAULT_SETTINGS):
    """(ū_0 or None when infeasible, diagnostics)."""
    sol, planned, objective, solve_ms = _solve_program(
        _ddpc_program(archive, history, weights, boxes), settings)
    diag = StepDiagnostics(sol.status, objective, solve_ms)
    if planned is None:
        log.warning(f"DDPC baseline QP {sol.status}")
        return None, diag
    return planned[0], diag


# ── Closed Loop ────────────────────────────────────────────────

def warm_up(plant: PlantSpec, x0, T_ini: int) -> tuple[ExtendedState, PlantLoop]:
    """Hold u = 0 for T_ini steps from x0; the measured window is ξ(0).

    For an x0 that is an equilibrium under zero input (such as [4, 0] on the reference plant)
    the plant is back at x0 when the loop begins.
    """
    loop = PlantLoop(plant, x0)
    u_zero = np.zeros(plant.m)
    ys = [loop.step(u_zero) for _ in range(T_ini)]
    return ExtendedState(np.zeros((T_ini, plant.m)), np.array(ys).reshape(T_ini, plant.p)), loop


def _converged(xi: ExtendedState, eps: float) -> bool:
    return float(np.max(np.abs(xi.vector))) <= eps


def _hold(log_: ClosedLoopLog, medium, history: ExtendedState, steps: int, t: int, m: int):
    for _ in range(steps):
        u = np.zeros(m)
        y = np.atleast_1d(medium.step(u))
        history = history.shifted(u, y)
        log_.append(LogRow(t, u, y, 0, NO_LEVEL, STATUS_HOLD, 0.0, 0.0))
        t += 1
    return history


def run_closed_loop(plant: PlantSpec, archive: DataArchive, family: NestedFamily, x0,
                    weights: ControllerWeights, boxes: ConstraintBoxes,
                    max_steps: Optional[int] = None, eps_conv: float = EPS_CONV,
                    hold_steps: int = 0, settings: QpSettings = DEFAULT_SETTINGS,
                    tol: float = MEMBERSHIP_TOL) -> ClosedLoopLog:
    """ST-DDPC closed loop on the plant from x0, for at most l₀·N steps."""
    history, loop = warm_up(plant, x0, archive.T_ini)
    level = smallest_level(family, history.vector, tol)
    if level is None:
        raise OutsideRegionError(f"initial extended state {history.vector.tolist()} is outside "
                                 "the region of attraction")
    out = ClosedLoopLog(CONTROLLER_STDDPC, initial_level=level)
    budget = level * archive.N if max_steps is None else max_steps
    state = ControllerState(level, archive.N - 1, history)
    log.info(f"ST-DDPC start: ξ(0) in level {level}, step budget {budget}")

    t = 0
    while t < budget and not _converged(state.history, eps_conv) and state.level > 0:
        try:
            u, state_next, diag = stddpc_step(archive, family, state, weights, boxes, loop,
                                              settings, tol)
        except ControllerInfeasible as e:
            log.warning(f"ST-DDPC stopped at t={t}: {e}")
            out.reason = "infeasible"
            break
        status = STATUS_BACKUP if diag.used_backup else diag.status
        out.append(LogRow(t, np.atleast_1d(u), state_next.history.y_past[-1].copy(),
                          state_next.level, state_next.w, status, diag.objective, diag.solve_ms))
        state = state_next
        t += 1

    out.converged = _converged(state.history, eps_conv) or state.level == 0
    if out.converged:
        out.reason = out.reason or "converged"
        state = ControllerState(state.level, state.w,
                                _hold(out, loop, state.history, hold_steps, t, archive.m))
    elif not out.reason:
        out.reason = f"step budget of {budget} exhausted"
    out.final_state = state.history
    log.info(f"ST-DDPC finished after {out.steps} steps: {out.reason}")
    return out


def run_ddpc(plant: PlantSpec, archive: DataArchive, x0, weights: ControllerWeights,
             boxes: ConstraintBoxes, steps: int = 8, eps_conv: float = EPS_CONV,
             settings: QpSettings = DEFAULT_SETTINGS) -> ClosedLoopLog:
    """DDPC baseline for a fixed number of steps; stops at the first infeasible QP."""
    history, loop = warm_up(plant, x0, archive.T_ini)
    out = ClosedLoopLog(CONTROLLER_DDPC)
    for t in range(steps):
        if _converged(history, eps_conv):
            break
        u, diag = ddpc_baseline_step(archive, history, weights, boxes, settings)
        if u is None:
            out.reason = f"infeasible at t={t}"
            break
        y = np.atleast_1d(loop.step(u))
        history = history.shifted(u, y)
        out.append(LogRow(t, np.atleast_1d(u), y, NO_LEVEL, NO_LEVEL, diag.status,
                          diag.objective, diag.solve_ms))
    out.converged = _converged(history, eps_conv)
    if not out.reason:
        out.reason = "converged" if out.converged else f"not converged within {steps} steps"
    out.final_state = history
    log.info(f"DDPC finished after {out.steps} steps: {out.reason}")
    return out


# ── Log Files ──────────────────────────────────────────────────

LOG_COLUMNS = ["t", "u", "y", "level", "w", "status", "objective", "solve_ms"]


def _fmt(v) -> str:
    return " ".join(f"{x:.17g}" for x in np.atleast_1d(v))


def save_closed_loop_log(out: ClosedLoopLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in out.rows:
            writer.writerow([r.t, _fmt(r.u), _fmt(r.y), r.level, r.w, r.status,
                             f"{r.objective:.17g}", f"{r.solve_ms:.3f}"])
    return path


def load_closed_loop_log(path) -> ClosedLoopLog:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != LOG_COLUMNS:
            raise ValueError(f"{path}:1: expected columns {LOG_COLUMNS}, got {reader.fieldnames}")
        out = ClosedLoopLog(path.stem)
        for lineno, rec in enumerate(reader, start=2):
            try:
                out.append(LogRow(
                    int(rec["t"]),
                    np.array([float(v) for v in rec["u"].split()]),
                    np.array([float(v) for v in rec["y"].split()]),
                    int(rec["level"]), int(rec["w"]), rec["status"],
                    float(rec["objective"]), float(rec["solve_ms"]),
                ))
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return out


def save_summary(out: ClosedLoopLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out.summary(), indent=2), encoding="utf-8")
    return path
