"""
Vertex-Represented Sets (dd_geometry.py)
════════════════════════════════════════
Convex sets stored as vertex matrices (one vertex per row). Membership is an
LP feasibility question; facets are never enumerated.

  • VRepSet       conv(vertices) in ξ-space
  • NestedFamily  Ξ⁰ ⊆ Ξ¹ ⊆ … ⊆ Ξ^{n*}, Ξ⁰ = {0}
  • membership / hull_union / prune_redundant / smallest_level
  • project_hull_2d for plotting projections
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from dd_plant import ConstraintBoxes
from dd_qp import solve_lp

log = logging.getLogger(__name__)

# ── Constants ──────────────────────────────────────────────────
MEMBERSHIP_TOL = 1e-7
PRUNE_TOL = 1e-9
WITNESS_TOL = 1e-9
BOX_SLACK = 1e-9
FAMILY_FORMAT_VERSION = 1


class FamilyError(ValueError):
    """Malformed nested family, or one violating its invariants."""


# ── Data Classes ───────────────────────────────────────────────

@dataclass(frozen=True)
class VRepSet:
    """conv(vertices); vertices is k × d with k ≥ 1."""
    vertices: np.ndarray

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float, ndmin=2)
        if V.ndim != 2 or V.shape[0] < 1:
            raise ValueError("a V-representation needs at least one vertex")
        V.setflags(write=False)
        object.__setattr__(self, "vertices", V)

    @classmethod
    def singleton(cls, point) -> "VRepSet":
        return cls(np.asarray(point, dtype=float).reshape(1, -1))

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def is_singleton(self) -> bool:
        return self.n_vertices == 1

    def __contains__(self, point) -> bool:
        return membership(self, point)


@dataclass(frozen=True)
class NestedFamily:
    """Ordered levels Ξ⁰ … Ξ^{n*} plus the data they were built for."""
    levels: tuple
    T_ini: int
    m: int
    p: int
    N: int
    boxes: ConstraintBoxes
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise FamilyError("a nested family needs at least Ξ⁰")
        d = (self.m + self.p) * self.T_ini
        for l, lvl in enumerate(self.levels):
            if lvl.dim != d:
                raise FamilyError(f"level {l} has dimension {lvl.dim}, expected {d}")

    @property
    def n_star(self) -> int:
        return len(self.levels) - 1

    @property
    def dim(self) -> int:
        return (self.m + self.p) * self.T_ini

    def __getitem__(self, l: int) -> VRepSet:
        return self.levels[l]

    def check_boxes(self) -> list[str]:
        """Vertices leaving the input-output boxes, as messages."""
        lo, hi = self.boxes.window_bounds(self.T_ini)
        problems = []
        for l, lvl in enumerate(self.levels):
            bad = np.flatnonzero(np.any((lvl.vertices < lo - BOX_SLACK)
                                        | (lvl.vertices > hi + BOX_SLACK), axis=1))
            problems += [f"level {l} vertex {i} outside the constraint boxes" for i in bad]
        return problems

    def check_nested(self, tol: float = MEMBERSHIP_TOL) -> list[str]:
        """Vertices of Ξ^{l-1} that fail membership in Ξ^l, as messages."""
        problems = []
        for l in range(1, len(self.levels)):
            outer = self.levels[l]
            for i, v in enumerate(self.levels[l - 1].vertices):
                if not membership(outer, v, tol):
                    problems.append(f"level {l - 1} vertex {i} not in level {l}")
        return problems

    def validate(self):
        problems = self.check_boxes() + self.check_nested()
        if not np.allclose(self.levels[0].vertices, 0.0, atol=MEMBERSHIP_TOL):
            problems.insert(0, "level 0 must be the equilibrium {0}")
        if problems:
            raise FamilyError("; ".join(problems[:5]) + (" …" if len(problems) > 5 else ""))


# ── Membership ─────────────────────────────────────────────────

def convex_weights(vset: VRepSet, point, tol: float = MEMBERSHIP_TOL) -> Optional[np.ndarray]:
    """λ ≥ 0, Σλ = 1 with ‖Vᵀλ − point‖_∞ ≤ tol, or None.

    The LP minimizes the ∞-norm gap t between Vᵀλ and the point, so it is
    always feasible; the point is a member when the returned λ, checked
    directly, lands within `tol`.
    """
    x = np.asarray(point, dtype=float).reshape(-1)
    if x.shape[0] != vset.dim:
        raise ValueError(f"point has dimension {x.shape[0]}, set has {vset.dim}")
    V = vset.vertices
    if vset.is_singleton:
        return np.ones(1) if np.max(np.abs(V[0] - x)) <= tol else None
    # cheap rejection along the coordinate axes
    if np.any(x < V.min(axis=0) - tol) or np.any(x > V.max(axis=0) + tol):
        return None

    k, d = vset.n_vertices, vset.dim
    Vt = sparse.csc_matrix(V.T)
    gap = sparse.csc_matrix(-np.ones((d, 1)))
    sol = solve_lp(
        np.concatenate([np.zeros(k), [1.0]]),
        Aeq=sparse.hstack([sparse.csc_matrix(np.ones((1, k))), sparse.csc_matrix((1, 1))],
                          format="csc"),
        beq=np.ones(1),
        Gin=sparse.vstack([sparse.hstack([Vt, gap]), sparse.hstack([-Vt, gap])], format="csc"),
        hin=np.concatenate([x, -x]),
        lb=np.zeros(k + 1),
    )
    if not sol.ok:
        log.warning(f"membership LP ended with status {sol.status}; treating as outside")
        return None
    lam = sol.z[:k]
    if np.min(lam) < -WITNESS_TOL or abs(lam.sum() - 1.0) > WITNESS_TOL:
        return None
    lam = np.maximum(lam, 0.0)
    lam /= lam.sum()
    if np.max(np.abs(V.T @ lam - x)) > tol + WITNESS_TOL:
        return None
    return lam


def membership(vset: VRepSet, point, tol: float = MEMBERSHIP_TOL) -> bool:
    return convex_weights(vset, point, tol) is not None


# ── Hull Accumulation ──────────────────────────────────────────

def _dedupe(V: np.ndarray, tol: float) -> np.ndarray:
    keep = [0]
    for i in range(1, len(V)):
        if np.min(np.max(np.abs(V[keep] - V[i]), axis=1)) > tol:
            keep.append(i)
    return V[keep]


def prune_redundant(vset: VRepSet, tol: float = PRUNE_TOL) -> VRepSet:
    """Drop every vertex lying in the hull of the remaining ones."""
    V = _dedupe(vset.vertices, tol)
    keep = np.ones(len(V), dtype=bool)
    # interior candidates first: points closest to the centroid
    order = np.argsort(np.linalg.norm(V - V.mean(axis=0), axis=1))
    for i in order:
        if keep.sum() == 1:
            break
        keep[i] = False
        if not membership(VRepSet(V[keep]), V[i], tol):
            keep[i] = True
    return VRepSet(V[keep])


def hull_union(base: VRepSet, new_points, prune: bool = True) -> VRepSet:
    """conv(base ∪ new_points), pruned to its vertices."""
    P = np.atleast_2d(np.asarray(new_points, dtype=float))
    if P.size == 0:
        return base
    if P.shape[1] != base.dim:
        raise ValueError(f"new points have dimension {P.shape[1]}, set has {base.dim}")
    fresh = [x for x in P if not membership(base, x, PRUNE_TOL)] if prune else list(P)
    if not fresh:
        return base
    merged = VRepSet(np.vstack([base.vertices, np.array(fresh)]))
    return prune_redundant(merged) if prune else merged


# ── Family Queries ─────────────────────────────────────────────

def smallest_level(family: NestedFamily, point, tol: float = MEMBERSHIP_TOL) -> Optional[int]:
    """min{l : point ∈ Ξ^l}, or None outside every level."""
    x = np.asarray(point, dtype=float).reshape(-1)
    if x.shape[0] != family.dim:
        raise ValueError(f"point has dimension {x.shape[0]}, family has {family.dim}")
    for l, lvl in enumerate(family.levels):
        if membership(lvl, x, tol):
            return l
    return None


# ── 2-D Projections ────────────────────────────────────────────

def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def project_hull_2d(vset: VRepSet, dims: Sequence[int]) -> np.ndarray:
    """Counter-clockwise hull of the vertices projected onto two coordinates.

    Monotone chain; collinear points are dropped, so degenerate hulls come
    back as one or two vertices.
    """
    i, j = int(dims[0]), int(dims[1])
    if not (0 <= i < vset.dim and 0 <= j < vset.dim):
        raise ValueError(f"projection coordinates {dims} out of range for dimension {vset.dim}")
    pts = sorted({(float(a), float(b)) for a, b in vset.vertices[:, [i, j]]})
    if len(pts) <= 2:
        return np.array(pts).reshape(-1, 2)

    lower, upper = [], []
    for pt in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], pt) <= 0:
            lower.pop()
        lower.append(pt)
    for pt in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], pt) <= 0:
            upper.pop()
        upper.append(pt)
    hull = lower[:-1] + upper[:-1]
    return np.array(hull).reshape(-1, 2)


# ── JSON Form ──────────────────────────────────────────────────

def family_to_dict(family: NestedFamily) -> dict:
    return {
        "version": FAMILY_FORMAT_VERSION,
        "T_ini": family.T_ini,
        "m": family.m,
        "p": family.p,
        "N": family.N,
        "u_box": [family.boxes.u_lo.tolist(), family.boxes.u_hi.tolist()],
        "y_box": [family.boxes.y_lo.tolist(), family.boxes.y_hi.tolist()],
        "levels": [{"index": l, "vertices": lvl.vertices.tolist()}
                   for l, lvl in enumerate(family.levels)],
        "meta": family.meta,
    }


def family_from_dict(data: dict, validate: bool = True) -> NestedFamily:
    if not isinstance(data, dict):
        raise FamilyError("family document must be a JSON object")
    version = data.get("version")
    if version != FAMILY_FORMAT_VERSION:
        raise FamilyError(f"unsupported family format version {version!r} "
                          f"(this build reads version {FAMILY_FORMAT_VERSION})")
    try:
        boxes = ConstraintBoxes(data["u_box"][0], data["u_box"][1],
                                data["y_box"][0], data["y_box"][1])
        entries = sorted(data["levels"], key=lambda e: e["index"])
        if [e["index"] for e in entries] != list(range(len(entries))):
            raise FamilyError("level indices must run 0 … n* without gaps")
        levels = [VRepSet(np.array(e["vertices"], dtype=float)) for e in entries]
        family = NestedFamily(levels, int(data["T_ini"]), int(data["m"]), int(data["p"]),
                              int(data["N"]), boxes, meta=dict(data.get("meta", {})))
    except FamilyError:
        raise
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise FamilyError(f"malformed family document: {e}") from None
    if validate:
        family.validate()
    return family
