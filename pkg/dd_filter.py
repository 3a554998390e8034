"""
Data-Driven Safety Filter (dd_filter.py)
════════════════════════════════════════
The filter QP minimally changes a proposed (random or learning) input u_l so
that the predicted input-output trajectory respects the boxes and its last
extended state lands in a target set:

    min  ‖ū_0 − u_l‖²_R
    s.t. [ū; ȳ] = [H_L(u); H_L(y)] α        (data-driven model)
         ξ_0 = measured history               (past pinning)
         ξ_N ∈ target                         (terminal window)
         ū_k ∈ U, ȳ_k ∈ Y, k = 0 … N-1

Its optimal trajectory is the backup; rolled out in closed loop, the backups
are the samples from which dd_reach grows the nested sets.

PredictionProgram assembles these blocks and is shared with dd_control.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
from scipy import sparse

from dd_geometry import MEMBERSHIP_TOL, VRepSet, membership
from dd_hankel import DataArchive, ExtendedState, extended_trajectory, window_to_trajectory
from dd_plant import BOX_MARGIN, ConstraintBoxes, Trajectory
from dd_qp import DEFAULT_SETTINGS, QpSettings, QpSolution, QuadraticProgram, solve

log = logging.getLogger(__name__)

# ── Constants ──────────────────────────────────────────────────
MAX_CONSECUTIVE_FAILURES = 3
TERMINAL_TOL = 1e-6
UNMODIFIED_TOL = 1e-10

EXCITATION_UNIFORM = "uniform"
EXCITATION_HELD = "held"


class FilterFailure(RuntimeError):
    """Safety-filter QP did not return an optimal solution."""

    def __init__(self, message: str, solution: Optional[QpSolution] = None):
        super().__init__(message)
        self.solution = solution


# ══════════════════════════════════════════════════════════════
#  Prediction QP assembly
# ══════════════════════════════════════════════════════════════

class PredictionProgram:
    """Builder for QPs over one prediction window of the archive.

    Variable layout: [γ (span coordinates) | w = [ū; ȳ] | λ blocks …].
    The window is w = Qγ with Q the orthonormal span of the stacked Hankel
    matrix, so the data-driven model costs `rank` variables instead of one
    per archive column and leaves no null space to the solver.
    """

    def __init__(self, archive: DataArchive):
        self.archive = archive
        Q = archive.span
        self.n_gamma = Q.shape[1]
        self.n_w = Q.shape[0]
        self.w0 = self.n_gamma
        self.n_vars = self.n_gamma + self.n_w
        self.lambda_blocks: dict[int, slice] = {}
        self._eq: list[tuple[int, sparse.coo_matrix, np.ndarray]] = []
        self._in: list[tuple[int, sparse.coo_matrix, np.ndarray]] = []
        self._eq_rows = 0
        self._in_rows = 0
        self._beq = np.zeros(0)
        self._hin = np.zeros(0)
        self._cost: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        # [Q, -I] (γ; w) = 0
        self._add_eq([(0, sparse.csr_matrix(Q)),
                      (self.w0, -sparse.identity(self.n_w, format="csr"))],
                     np.zeros(self.n_w))

    # -- low-level row bookkeeping --

    def _pieces(self, pieces, rhs, kind: str):
        rows = len(rhs)
        base = self._eq_rows if kind == "eq" else self._in_rows
        store = self._eq if kind == "eq" else self._in
        for offset, M in pieces:
            M = sparse.coo_matrix(M)
            if M.shape[0] != rows:
                raise ValueError(f"constraint block has {M.shape[0]} rows, rhs has {rows}")
            store.append((offset, M, base))
        if kind == "eq":
            self._eq_rows += rows
            self._beq = np.concatenate([self._beq, rhs])
        else:
            self._in_rows += rows
            self._hin = np.concatenate([self._hin, rhs])

    def _add_eq(self, pieces, rhs):
        self._pieces(pieces, np.asarray(rhs, dtype=float).reshape(-1), "eq")

    def _add_in(self, pieces, rhs):
        self._pieces(pieces, np.asarray(rhs, dtype=float).reshape(-1), "in")

    def _selector(self, idx: np.ndarray) -> sparse.csr_matrix:
        """Rows picking entries `idx` out of w."""
        r = np.arange(len(idx))
        return sparse.csr_matrix((np.ones(len(idx)), (r, idx)), shape=(len(idx), self.n_w))

    # -- domain blocks --

    def pin_history(self, xi: ExtendedState):
        """ξ_0 equals the measured extended state."""
        self._add_eq([(self.w0, self._selector(self.archive.xi_index(0)))], xi.vector)

    def pin_input(self, k: int, u):
        """ū_k equals u."""
        self._add_eq([(self.w0, self._selector(self.archive.u_index(k)))], np.atleast_1d(u))

    def constrain_boxes(self, boxes: ConstraintBoxes, steps=None):
        """ū_k, ȳ_k inside the boxes (tightened by BOX_MARGIN) for k in `steps`."""
        tight = boxes.tightened(BOX_MARGIN)
        steps = range(self.archive.N) if steps is None else steps
        for k in steps:
            for idx, lo, hi in ((self.archive.u_index(k), tight.u_lo, tight.u_hi),
                                (self.archive.y_index(k), tight.y_lo, tight.y_hi)):
                S = self._selector(idx)
                self._add_in([(self.w0, S)], hi)
                self._add_in([(self.w0, -S)], -lo)

    def constrain_member(self, k: int, vset: VRepSet):
        """ξ_k = Vᵀλ with λ ≥ 0, Σλ = 1; one λ block per call."""
        if vset.dim != self.archive.xi_dim:
            raise ValueError(f"set dimension {vset.dim} does not match ξ dimension {self.archive.xi_dim}")
        kv = vset.n_vertices
        lam0 = self.n_vars
        self.n_vars += kv
        self.lambda_blocks[k] = slice(lam0, lam0 + kv)
        S = self._selector(self.archive.xi_index(k))
        self._add_eq([(self.w0, S), (lam0, -sparse.csr_matrix(vset.vertices.T))],
                     np.zeros(self.archive.xi_dim))
        self._add_eq([(lam0, sparse.csr_matrix(np.ones((1, kv))))], np.ones(1))
        self._add_in([(lam0, -sparse.identity(kv, format="csr"))], np.zeros(kv))

    def add_tracking_cost(self, idx: np.ndarray, W: np.ndarray, ref=None):
        """(w[idx] − ref)ᵀ W (w[idx] − ref)."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        ref = np.zeros(len(idx)) if ref is None else np.asarray(ref, dtype=float).reshape(-1)
        self._cost.append((np.asarray(idx), W, ref))

    # -- assembly --

    def _stack(self, store, rows: int) -> sparse.csc_matrix:
        if not store:
            return sparse.csc_matrix((rows, self.n_vars))
        r, c, v = [], [], []
        for offset, M, base in store:
            r.append(M.row + base)
            c.append(M.col + offset)
            v.append(M.data)
        return sparse.csc_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                                 shape=(rows, self.n_vars))

    def build(self) -> tuple[QuadraticProgram, float]:
        """The QP and the constant dropped from its objective."""
        q = np.zeros(self.n_vars)
        const = 0.0
        r, c, v = [np.zeros(0, dtype=int)], [np.zeros(0, dtype=int)], [np.zeros(0)]
        for idx, W, ref in self._cost:
            gidx = self.w0 + idx
            r.append(np.repeat(gidx, len(gidx)))
            c.append(np.tile(gidx, len(gidx)))
            v.append(2.0 * W.reshape(-1))
            q[gidx] += -2.0 * (W @ ref)
            const += float(ref @ W @ ref)
        # duplicate entries are summed
        P = sparse.csc_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                              shape=(self.n_vars, self.n_vars))
        qp = QuadraticProgram(
            P, q,
            self._stack(self._eq, self._eq_rows), self._beq,
            self._stack(self._in, self._in_rows), self._hin,
        )
        return qp, const

    def window(self, z: np.ndarray) -> np.ndarray:
        return z[self.w0:self.w0 + self.n_w]


# ══════════════════════════════════════════════════════════════
#  Safety filter
# ══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class FilterProblem:
    archive: DataArchive
    xi_now: ExtendedState
    target: VRepSet
    u_learning: np.ndarray
    boxes: ConstraintBoxes
    R: Optional[np.ndarray] = None

    def __post_init__(self):
        d = self.archive.xi_dim
        if self.xi_now.vector.shape[0] != d:
            raise ValueError(f"xi_now has length {self.xi_now.vector.shape[0]}, expected {d}")
        if self.target.dim != d:
            raise ValueError(f"target set has dimension {self.target.dim}, expected {d}")
        u_l = np.atleast_1d(np.asarray(self.u_learning, dtype=float))
        if u_l.shape != (self.archive.m,):
            raise ValueError(f"u_learning has length {u_l.shape[0]}, expected {self.archive.m}")
        object.__setattr__(self, "u_learning", u_l)
        R = np.eye(self.archive.m) if self.R is None else np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (self.archive.m, self.archive.m):
            raise ValueError(f"R must be {self.archive.m}x{self.archive.m}, got {R.shape}")
        object.__setattr__(self, "R", R)


@dataclass
class BackupTrajectory:
    """Optimal filter trajectory over indices -T_ini … N-1 and its windows ξ_0 … ξ_N."""
    trajectory: Trajectory
    extended_states: list
    objective: float = 0.0

    @property
    def inputs(self) -> np.ndarray:
        return self.trajectory.inputs

    @property
    def outputs(self) -> np.ndarray:
        return self.trajectory.outputs

    def xi_matrix(self) -> np.ndarray:
        """ξ_0 … ξ_N as rows."""
        return np.array([xi.vector for xi in self.extended_states])


def _filter_program(prob: FilterProblem) -> PredictionProgram:
    prog = PredictionProgram(prob.archive)
    prog.pin_history(prob.xi_now)
    prog.constrain_member(prob.archive.N, prob.target)
    prog.constrain_boxes(prob.boxes)
    prog.add_tracking_cost(prob.archive.u_index(0), prob.R, prob.u_learning)
    return prog


def assemble_filter_qp(prob: FilterProblem) -> QuadraticProgram:
    return _filter_program(prob).build()[0]


def _backup_from(prog: PredictionProgram, prob: FilterProblem, sol: QpSolution,
                 objective: float) -> BackupTrajectory:
    traj = window_to_trajectory(prob.archive, prog.window(sol.z))
    return BackupTrajectory(traj, extended_trajectory(traj, prob.archive.T_ini), objective)


def filter_step(prob: FilterProblem, settings: QpSettings = DEFAULT_SETTINGS
                ) -> tuple[np.ndarray, BackupTrajectory]:
    """Safe input ū_0 and the backup trajectory behind it.

    The safe input is always the first input of the returned backup. When the
    filter leaves u_l unmodified (objective below UNMODIFIED_TOL) the program
    is re-solved with ū_0 = u_l pinned, so the backup starts with u_l itself.
    """
    prog = _filter_program(prob)
    qp, const = prog.build()
    sol = solve(qp, settings)
    if not sol.ok:
        raise FilterFailure(f"safety filter QP {sol.status}", sol)
    backup = _backup_from(prog, prob, sol, max(sol.objective + const, 0.0))

    if backup.objective < UNMODIFIED_TOL:
        pinned = _filter_program(prob)
        pinned.pin_input(0, prob.u_learning)
        sol_pinned = solve(pinned.build()[0], settings)
        if sol_pinned.ok:
            backup = _backup_from(pinned, prob, sol_pinned, 0.0)
            backup.trajectory.inputs[prob.archive.T_ini] = prob.u_learning
            backup.extended_states = extended_trajectory(backup.trajectory, prob.archive.T_ini)
        else:
            log.debug(f"pinned re-solve ended with status {sol_pinned.status}; "
                      "applying the filter's own first input")
    return backup.inputs[prob.archive.T_ini].copy(), backup


# ══════════════════════════════════════════════════════════════
#  Closed-loop sampling
# ══════════════════════════════════════════════════════════════

class Medium(Protocol):
    """Anything that takes u_t and returns the measured y_t."""

    def step(self, u) -> np.ndarray: ...


class Excitation:
    """Proposed inputs u_l: fresh uniform draws, or draws held for a few steps."""

    def __init__(self, boxes: ConstraintBoxes, rng: np.random.Generator,
                 kind: str = EXCITATION_UNIFORM, hold_max: int = 1):
        if kind not in (EXCITATION_UNIFORM, EXCITATION_HELD):
            raise ValueError(f"unknown excitation kind {kind!r}")
        self.boxes = boxes
        self.rng = rng
        self.kind = kind
        self.hold_max = max(int(hold_max), 1)
        self._value = None
        self._left = 0

    def draw(self) -> np.ndarray:
        if self.kind == EXCITATION_UNIFORM or self._left == 0:
            self._value = self.rng.uniform(self.boxes.u_lo, self.boxes.u_hi)
            self._left = int(self.rng.integers(1, self.hold_max + 1)) if self.kind == EXCITATION_HELD else 1
        self._left -= 1
        return np.array(self._value, dtype=float)


@dataclass
class RolloutRecord:
    t: int
    u_l: np.ndarray
    u_safe: np.ndarray
    y: np.ndarray
    objective: float
    qp_status: str


@dataclass
class Rollout:
    backups: list = field(default_factory=list)
    records: list = field(default_factory=list)
    aborted: bool = False


def run_rollout(archive: DataArchive, start_state: ExtendedState, target: VRepSet,
                steps: int, medium: Medium, excitation: Excitation,
                boxes: ConstraintBoxes, R=None, t0: int = 0,
                settings: QpSettings = DEFAULT_SETTINGS) -> Rollout:
    """Closed loop of `steps` filter calls; falls back on the previous backup when a solve fails."""
    out = Rollout()
    xi = start_state
    plan: list[np.ndarray] = []   # remaining inputs of the last backup
    failures = 0
    for s in range(steps):
        u_l = excitation.draw()
        try:
            u_safe, backup = filter_step(FilterProblem(archive, xi, target, u_l, boxes, R), settings)
            status, objective = "optimal", backup.objective
            out.backups.append(backup)
            plan = [u for u in backup.inputs[archive.T_ini + 1:]]
            failures = 0
        except FilterFailure as e:
            failures += 1
            status = e.solution.status if e.solution is not None else "failed"
            objective = float("nan")
            if failures >= MAX_CONSECUTIVE_FAILURES or not plan:
                log.warning(f"Rollout aborted at step {t0 + s} after {failures} failed filter solve(s)")
                out.aborted = True
                break
            log.warning(f"Filter solve failed at step {t0 + s} ({status}); applying backup input")
            u_safe = plan.pop(0)
        y = medium.step(u_safe)
        out.records.append(RolloutRecord(t0 + s, u_l, np.atleast_1d(u_safe), np.atleast_1d(y),
                                         objective, status))
        xi = xi.shifted(u_safe, y)
    return out


def sample_backups(archive: DataArchive, start_state: ExtendedState, target: VRepSet,
                   steps: int, seed: int, medium: Medium, boxes: ConstraintBoxes,
                   R=None, excitation: str = EXCITATION_UNIFORM, hold_max: int = 1) -> list:
    """Backups of a seeded closed-loop rollout."""
    if not membership(target, start_state.vector, MEMBERSHIP_TOL):
        log.warning("Rollout start state is not inside the target set; the first solve may fail")
    exc = Excitation(boxes, np.random.default_rng(seed), excitation, hold_max)
    return run_rollout(archive, start_state, target, steps, medium, exc, boxes, R).backups


def check_backup(backup: BackupTrajectory, target: VRepSet, boxes: ConstraintBoxes,
                 T_ini: int, slack: float = 1e-9) -> list[str]:
    """Safety invariants of a backup, re-checked outside the solver."""
    problems = []
    for k in range(T_ini, len(backup.trajectory)):
        if not boxes.contains(backup.inputs[k], backup.outputs[k], slack):
            problems.append(f"step {k - T_ini} leaves the constraint boxes")
    if not membership(target, backup.extended_states[-1].vector, TERMINAL_TOL):
        problems.append("terminal extended state is outside the target set")
    return problems


def save_rollout_log(records: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "u_l", "u_safe", "y", "objective", "qp_status"])
        for r in records:
            writer.writerow([r.t, _fmt(r.u_l), _fmt(r.u_safe), _fmt(r.y),
                             f"{r.objective:.17g}", r.qp_status])
    return path


def _fmt(v) -> str:
    return " ".join(f"{x:.17g}" for x in np.atleast_1d(v))
