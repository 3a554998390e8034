"""
Ground-Truth Plant (dd_plant.py)
════════════════════════════════
Discrete-time LTI simulator used to record the offline dataset, to play the
"real system" in closed loop, and as an oracle in tests.

    x_{t+1} = A x_t + B u_t
    y_t     = C x_t + D u_t

Only inputs and outputs leave this module; the controller side never sees
A, B, C, D.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CSV_FLOAT = "{:.17g}"
BOX_MARGIN = 1e-8   # solver-side tightening; exceeds the QP feasibility tolerance


# ── Data Classes ───────────────────────────────────────────────

def _matrix(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got {M.ndim} dimensions")
    return M


@dataclass(frozen=True)
class PlantSpec:
    """State-space matrices of the true system."""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A, B, C, D = (_matrix(getattr(self, k), k) for k in "ABCD")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {B.shape}")
        if C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got {C.shape}")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(f"D must be {(C.shape[0], B.shape[1])}, got {D.shape}")
        for k, M in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, k, M)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def scaled(self, factor: float) -> "PlantSpec":
        """Same plant with A multiplied by `factor` (0.5 gives the stable sanity-check plant)."""
        return PlantSpec(self.A * factor, self.B, self.C, self.D)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


@dataclass(frozen=True)
class ConstraintBoxes:
    """Axis-aligned input and output boxes (closed)."""
    u_lo: np.ndarray
    u_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray

    def __post_init__(self):
        for k in ("u_lo", "u_hi", "y_lo", "y_hi"):
            object.__setattr__(self, k, np.atleast_1d(np.asarray(getattr(self, k), dtype=float)))
        if self.u_lo.shape != self.u_hi.shape or self.y_lo.shape != self.y_hi.shape:
            raise ValueError("box bounds must have matching shapes")
        if not (np.all(self.u_lo < self.u_hi) and np.all(self.y_lo < self.y_hi)):
            raise ValueError("box lower bounds must be strictly below upper bounds")
        if not (np.all(self.u_lo < 0) and np.all(self.u_hi > 0)
                and np.all(self.y_lo < 0) and np.all(self.y_hi > 0)):
            raise ValueError("the origin must lie strictly inside the input and output boxes")

    @classmethod
    def symmetric(cls, u_max, y_max) -> "ConstraintBoxes":
        u_max, y_max = np.atleast_1d(u_max), np.atleast_1d(y_max)
        return cls(-u_max, u_max, -y_max, y_max)

    @property
    def m(self) -> int:
        return self.u_lo.shape[0]

    @property
    def p(self) -> int:
        return self.y_lo.shape[0]

    def contains(self, u, y, slack: float = 0.0) -> bool:
        u, y = np.atleast_1d(u), np.atleast_1d(y)
        return bool(np.all(u >= self.u_lo - slack) and np.all(u <= self.u_hi + slack)
                    and np.all(y >= self.y_lo - slack) and np.all(y <= self.y_hi + slack))

    def tightened(self, margin: float) -> "ConstraintBoxes":
        """Boxes shrunk by `margin` on every side, for solver-side constraints."""
        return ConstraintBoxes(self.u_lo + margin, self.u_hi - margin,
                               self.y_lo + margin, self.y_hi - margin)

    def window_bounds(self, T_ini: int) -> tuple[np.ndarray, np.ndarray]:
        """Bounds on a flattened extended state [u_1..u_T, y_1..y_T]."""
        lo = np.concatenate([np.tile(self.u_lo, T_ini), np.tile(self.y_lo, T_ini)])
        hi = np.concatenate([np.tile(self.u_hi, T_ini), np.tile(self.y_hi, T_ini)])
        return lo, hi


@dataclass(frozen=True)
class Trajectory:
    """Paired input/output samples; row t holds the sample at time start_index + t."""
    inputs: np.ndarray
    outputs: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        u = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.outputs, dtype=float)
        # scalar channels may be given as flat sequences
        u = u.reshape(-1, 1) if u.ndim == 1 else u
        y = y.reshape(-1, 1) if y.ndim == 1 else y
        if len(u) != len(y):
            raise ValueError(f"inputs ({len(u)}) and outputs ({len(y)}) must have equal length")
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def p(self) -> int:
        return self.outputs.shape[1]

    def stacked(self) -> np.ndarray:
        """[u_0; …; u_{T-1}; y_0; …; y_{T-1}] as one vector."""
        return np.concatenate([self.inputs.reshape(-1), self.outputs.reshape(-1)])

    def window(self, start: int, length: int) -> "Trajectory":
        return Trajectory(self.inputs[start:start + length], self.outputs[start:start + length],
                          self.start_index + start)

    def extend(self, u, y) -> "Trajectory":
        return Trajectory(np.vstack([self.inputs, np.atleast_1d(u)]),
                          np.vstack([self.outputs, np.atleast_1d(y)]), self.start_index)


# ── Simulation ─────────────────────────────────────────────────

def simulate(spec: PlantSpec, x0, inputs) -> Trajectory:
    """Open-loop response of the plant from x0 to an input sequence."""
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.shape != (spec.n,):
        raise ValueError(f"x0 has length {x.shape[0]}, plant order is {spec.n}")
    u = np.asarray(inputs, dtype=float)
    u = u.reshape(len(u), -1) if u.size else np.zeros((0, spec.m))
    if u.shape[1] != spec.m:
        raise ValueError(f"inputs have {u.shape[1]} channels, plant has {spec.m}")
    y = np.zeros((len(u), spec.p))
    for t, u_t in enumerate(u):
        y[t] = spec.C @ x + spec.D @ u_t
        x = spec.A @ x + spec.B @ u_t
    return Trajectory(u, y)


def generate_excitation(boxes: ConstraintBoxes, length: int, seed: int,
                        amplitude: float = 1.0) -> np.ndarray:
    """Uniform i.i.d. input samples inside the input box (scaled by `amplitude`)."""
    if length <= 0:
        raise ValueError(f"excitation length must be positive, got {length}")
    rng = np.random.default_rng(seed)
    return amplitude * rng.uniform(boxes.u_lo, boxes.u_hi, size=(length, boxes.m))


def collect_dataset(spec: PlantSpec, x0, excitation) -> Trajectory:
    """The single open-loop experiment that feeds the Hankel matrices."""
    traj = simulate(spec, x0, excitation)
    log.info(f"Collected dataset: N0={len(traj)} samples (m={traj.m}, p={traj.p})")
    return traj


class PlantLoop:
    """Stateful plant used as the real system in closed loop."""

    def __init__(self, spec: PlantSpec, x0):
        self.spec = spec
        self.x = np.asarray(x0, dtype=float).reshape(-1).copy()
        if self.x.shape != (spec.n,):
            raise ValueError(f"x0 has length {self.x.shape[0]}, plant order is {spec.n}")
        self.t = 0

    def step(self, u) -> np.ndarray:
        """Apply u at the current time, return the measured y_t, advance the state."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        y = self.spec.C @ self.x + self.spec.D @ u
        self.x = self.spec.A @ self.x + self.spec.B @ u
        self.t += 1
        return y


# ── Dataset CSV ────────────────────────────────────────────────

def save_dataset(traj: Trajectory, path) -> Path:
    """Write `t,u_0..u_{m-1},y_0..y_{p-1}` rows at full double precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["t"] + [f"u_{i}" for i in range(traj.m)] + [f"y_{i}" for i in range(traj.p)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for k in range(len(traj)):
            row = [str(traj.start_index + k)]
            row += [CSV_FLOAT.format(v) for v in traj.inputs[k]]
            row += [CSV_FLOAT.format(v) for v in traj.outputs[k]]
            writer.writerow(row)
    return path


def load_dataset(path) -> Trajectory:
    """Read a dataset CSV; errors name the offending line."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header = rows[0]
    if not header or header[0] != "t":
        raise ValueError(f"{path}:1: header must start with 't', got {header[:1]}")
    m = sum(1 for h in header if h.startswith("u_"))
    p = sum(1 for h in header if h.startswith("y_"))
    if m == 0 or p == 0 or len(header) != 1 + m + p:
        raise ValueError(f"{path}:1: malformed header {header}")
    times, u, y = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            times.append(int(row[0]))
            values = [float(v) for v in row[1:]]
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
        u.append(values[:m])
        y.append(values[m:])
    if any(b - a != 1 for a, b in zip(times, times[1:])):
        raise ValueError(f"{path}: time stamps are not contiguous")
    return Trajectory(np.array(u).reshape(-1, m), np.array(y).reshape(-1, p),
                      times[0] if times else 0)
