"""
Hankel Representation (dd_hankel.py)
════════════════════════════════════
Trajectory bookkeeping for the implicit data-driven model:

  • block Hankel matrices H_L(·) and the persistent-excitation rank test
  • DataArchive: the recorded trajectory plus the stacked [H_L(u); H_L(y)]
  • extended states ξ (last T_ini inputs, then last T_ini outputs)
  • extended trajectories (sliding windows ξ_0 … ξ_N over a prediction)
  • an orthonormal span of that matrix for the prediction QPs

Vectors over a prediction window are laid out as
    [ū_{-T_ini}; …; ū_{N-1}; ȳ_{-T_ini}; …; ȳ_{N-1}]
which is the row order of the stacked Hankel matrix.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import orth

from dd_plant import Trajectory

log = logging.getLogger(__name__)

RANK_TOL = 1e-9   # singular values below RANK_TOL · σ_max count as zero


class ExcitationError(ValueError):
    """Recorded input is not persistently exciting enough."""


# ── Hankel Matrices ────────────────────────────────────────────

@dataclass(frozen=True)
class HankelMatrix:
    """Block Hankel matrix of depth L over d-dimensional samples."""
    entries: np.ndarray
    block_dim: int
    depth: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def _samples(samples) -> np.ndarray:
    X = np.asarray(samples, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def build_hankel(samples, L: int) -> HankelMatrix:
    """Column j stacks samples j … j+L-1."""
    X = _samples(samples)
    N0, d = X.shape
    if L < 1:
        raise ValueError(f"Hankel depth must be positive, got {L}")
    if N0 < L:
        raise ValueError(f"need at least L={L} samples to build a Hankel matrix, got {N0}")
    cols = N0 - L + 1
    H = np.empty((d * L, cols))
    for i in range(L):
        H[i * d:(i + 1) * d, :] = X[i:i + cols].T
    return HankelMatrix(H, d, L)


def numerical_rank(M: np.ndarray, tol: float = RANK_TOL) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def excitation_rank(inputs, L: int) -> tuple[int, bool]:
    """Rank of H_L(inputs) and whether it reaches m·L."""
    X = _samples(inputs)
    H = build_hankel(X, L)
    rank = numerical_rank(H.entries)
    return rank, rank == X.shape[1] * L


def pe_order_check(inputs, L: int) -> bool:
    """Persistently exciting of order L: rank H_L(u) = m·L."""
    return excitation_rank(inputs, L)[1]


# ── Data Archive ───────────────────────────────────────────────

@dataclass(frozen=True)
class DataArchive:
    """Offline dataset and its stacked past/future Hankel representation."""
    dataset: Trajectory
    T_ini: int
    N: int
    L: int
    stacked: np.ndarray
    basis: np.ndarray
    rank: int

    @property
    def m(self) -> int:
        return self.dataset.m

    @property
    def p(self) -> int:
        return self.dataset.p

    @property
    def n_cols(self) -> int:
        return self.stacked.shape[1]

    @property
    def xi_dim(self) -> int:
        return (self.m + self.p) * self.T_ini

    @property
    def order_estimate(self) -> int:
        """Implied state dimension n̂ = rank − m·L."""
        return self.rank - self.m * self.L

    @cached_property
    def span(self) -> np.ndarray:
        """Orthonormal basis of the column space, (m+p)·L × rank."""
        return orth(self.basis, rcond=RANK_TOL)[:, :self.rank]

    @property
    def Hu(self) -> np.ndarray:
        return self.stacked[:self.m * self.L]

    @property
    def Hy(self) -> np.ndarray:
        return self.stacked[self.m * self.L:]

    def u_index(self, k: int) -> np.ndarray:
        """Positions of ū_k (k = -T_ini … N-1) in a stacked window vector."""
        j = k + self.T_ini
        return np.arange(j * self.m, (j + 1) * self.m)

    def y_index(self, k: int) -> np.ndarray:
        j = k + self.T_ini
        off = self.m * self.L
        return np.arange(off + j * self.p, off + (j + 1) * self.p)

    def xi_index(self, k: int) -> np.ndarray:
        """Positions of ξ_k = window [k-T_ini, k-1] in a stacked window vector."""
        u = np.concatenate([self.u_index(j) for j in range(k - self.T_ini, k)])
        y = np.concatenate([self.y_index(j) for j in range(k - self.T_ini, k)])
        return np.concatenate([u, y])


def normalize_columns(M: np.ndarray) -> np.ndarray:
    """Scale every nonzero column to unit norm; the column span is unchanged.

    Data from an open-loop unstable plant grows geometrically along the
    record, so raw Hankel columns differ by many orders of magnitude.
    """
    norms = np.linalg.norm(M, axis=0)
    norms[norms == 0.0] = 1.0
    return M / norms


def min_dataset_length(m: int, p: int, L: int) -> int:
    """Shortest dataset whose stacked Hankel matrix has at least as many columns as rows."""
    return (m + p + 1) * L - 1


def make_archive(dataset: Trajectory, T_ini: int, N: int) -> DataArchive:
    """Validate the dataset and build [H_L(u); H_L(y)] with L = N + T_ini."""
    if T_ini < 1:
        raise ValueError(f"T_ini must be at least 1, got {T_ini}")
    if N <= 2 * T_ini:
        raise ValueError(f"prediction horizon N={N} must exceed 2·T_ini={2 * T_ini}")
    L = N + T_ini
    m, p, N0 = dataset.m, dataset.p, len(dataset)
    need = min_dataset_length(m, p, L)
    if N0 < need:
        raise ValueError(f"dataset too short: N0={N0}, need at least {need} samples for L={L}")

    u_rank, u_ok = excitation_rank(dataset.inputs, L)
    if not u_ok:
        raise ExcitationError(
            f"persistent excitation failed: rank H_L(u) = {u_rank}, expected m·L = {m * L}")

    Hu = build_hankel(dataset.inputs, L).entries
    Hy = build_hankel(dataset.outputs, L).entries
    stacked = np.vstack([Hu, Hy])
    basis = normalize_columns(stacked)
    rank = numerical_rank(basis)
    n_hat = rank - m * L
    if n_hat > p * T_ini:
        raise ExcitationError(
            f"stacked Hankel rank {rank} implies order {n_hat} > p·T_ini = {p * T_ini}; "
            "increase T_ini or check the data")
    # the lemma wants input PE of order L + n; n̂ stands in for n
    if n_hat > 0 and N0 - (L + n_hat) + 1 >= m * (L + n_hat):
        rank_ext, ok_ext = excitation_rank(dataset.inputs, L + n_hat)
        if not ok_ext:
            raise ExcitationError(
                f"persistent excitation failed at order L+n̂ = {L + n_hat} (rank {rank_ext})")

    log.info(f"Archive built: L={L}, stacked {stacked.shape[0]}x{stacked.shape[1]}, "
             f"rank {rank} (n̂={n_hat})")
    return DataArchive(dataset, T_ini, N, L, stacked, basis, rank)


def span_residual(archive: DataArchive, candidate) -> float:
    """min_α ‖stacked·α − candidate‖₂."""
    c = np.asarray(candidate, dtype=float).reshape(-1)
    if c.shape[0] != archive.stacked.shape[0]:
        raise ValueError(f"candidate has length {c.shape[0]}, expected {archive.stacked.shape[0]}")
    beta = np.linalg.lstsq(archive.basis, c, rcond=None)[0]
    return float(np.linalg.norm(archive.basis @ beta - c))


# ── Extended States ────────────────────────────────────────────

@dataclass(frozen=True)
class ExtendedState:
    """Last T_ini inputs and outputs; flattened inputs first."""
    u_past: np.ndarray
    y_past: np.ndarray

    @property
    def T_ini(self) -> int:
        return self.u_past.shape[0]

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.u_past.reshape(-1), self.y_past.reshape(-1)])

    @classmethod
    def from_vector(cls, vec, m: int, p: int, T_ini: int) -> "ExtendedState":
        v = np.asarray(vec, dtype=float).reshape(-1)
        if v.shape[0] != (m + p) * T_ini:
            raise ValueError(f"extended state has length {v.shape[0]}, expected {(m + p) * T_ini}")
        return cls(v[:m * T_ini].reshape(T_ini, m), v[m * T_ini:].reshape(T_ini, p))

    @classmethod
    def at_rest(cls, m: int, p: int, T_ini: int) -> "ExtendedState":
        return cls(np.zeros((T_ini, m)), np.zeros((T_ini, p)))

    def shifted(self, u, y) -> "ExtendedState":
        """ξ(t+1) after applying u and measuring y."""
        return ExtendedState(np.vstack([self.u_past[1:], np.atleast_1d(u)]),
                             np.vstack([self.y_past[1:], np.atleast_1d(y)]))


def extended_state(history: Trajectory, t: int, T_ini: int) -> ExtendedState:
    """ξ(t) from the samples with time stamps t-T_ini … t-1."""
    end = t - history.start_index
    begin = end - T_ini
    if begin < 0 or end > len(history):
        raise ValueError(f"need T_ini={T_ini} samples before t={t}; history covers "
                         f"[{history.start_index}, {history.start_index + len(history) - 1}]")
    return ExtendedState(history.inputs[begin:end].copy(), history.outputs[begin:end].copy())


def extended_trajectory(traj: Trajectory, T_ini: int) -> list[ExtendedState]:
    """ξ_0 … ξ_N of a trajectory spanning indices -T_ini … N-1."""
    N = len(traj) - T_ini
    if N < 0:
        raise ValueError(f"trajectory of length {len(traj)} is shorter than T_ini={T_ini}")
    return [ExtendedState(traj.inputs[k:k + T_ini].copy(), traj.outputs[k:k + T_ini].copy())
            for k in range(N + 1)]


def window_to_trajectory(archive: DataArchive, window) -> Trajectory:
    """Split a stacked window vector into a Trajectory indexed from -T_ini."""
    w = np.asarray(window, dtype=float).reshape(-1)
    u = w[:archive.m * archive.L].reshape(archive.L, archive.m)
    y = w[archive.m * archive.L:].reshape(archive.L, archive.p)
    return Trajectory(u, y, start_index=-archive.T_ini)
