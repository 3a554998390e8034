"""
Convex QP / LP Front End (dd_qp.py)
═══════════════════════════════════
Shared solver layer for the safety filter, the ST-DDPC controller and the
membership LPs of dd_geometry.

    min  ½ zᵀPz + qᵀz   s.t.  Aeq·z = beq,  Gin·z ≤ hin

QPs go to OSQP, LPs to HiGHS (scipy.optimize.linprog). For QPs the returned
status is decided here from the KKT residuals, so `optimal` always means the
residual contract of QpSettings holds. LP status follows the HiGHS optimality
proof; the residuals ride along for diagnosis.

Usage:
    from dd_qp import QuadraticProgram, solve
    sol = solve(QuadraticProgram(P, q, Aeq, beq, Gin, hin))
    if sol.ok:
        z = sol.z
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import osqp
from scipy import sparse
from scipy.optimize import linprog
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)

# ── Constants ──────────────────────────────────────────────────
STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"

RIDGE = 1e-9              # added to P before factorization
SYM_TOL = 1e-12
PSD_TOL = 1e-10
ACTIVE_TOL = 1e-9         # slack below which an inequality counts as active
REFINE_STEPS = 3
RETRY_ITER_FACTOR = 5     # iteration budget of the steadier OSQP attempt
LP_FEAS_TOL = 1e-9


@dataclass(frozen=True)
class QpSettings:
    """Residual contract and iteration budget of a solve."""
    eps_eq: float = 1e-8
    eps_in: float = 1e-8
    eps_stat: float = 1e-6
    max_iter: int = 20000


DEFAULT_SETTINGS = QpSettings()


# ── Data Classes ───────────────────────────────────────────────

def _as_csc(M, rows: int, cols: int, name: str) -> sparse.csc_matrix:
    if M is None:
        return sparse.csc_matrix((rows, cols))
    M = sparse.csc_matrix(M, dtype=float)
    if M.shape != (rows, cols):
        raise ValueError(f"{name} has shape {M.shape}, expected {(rows, cols)}")
    return M


def _as_vec(v, n: int, name: str) -> np.ndarray:
    if v is None:
        return np.zeros(n)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (n,):
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


@dataclass(frozen=True, init=False)
class QuadraticProgram:
    """A convex QP in standard form. Matrices are stored as CSC."""
    P: sparse.csc_matrix
    q: np.ndarray
    Aeq: sparse.csc_matrix
    beq: np.ndarray
    Gin: sparse.csc_matrix
    hin: np.ndarray

    def __init__(self, P, q, Aeq=None, beq=None, Gin=None, hin=None):
        q = np.asarray(q, dtype=float).reshape(-1)
        nz = q.shape[0]
        n_eq = 0 if Aeq is None else np.shape(Aeq)[0]
        n_in = 0 if Gin is None else np.shape(Gin)[0]
        P = _as_csc(P, nz, nz, "P")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "Aeq", _as_csc(Aeq, n_eq, nz, "Aeq"))
        object.__setattr__(self, "beq", _as_vec(beq, n_eq, "beq"))
        object.__setattr__(self, "Gin", _as_csc(Gin, n_in, nz, "Gin"))
        object.__setattr__(self, "hin", _as_vec(hin, n_in, "hin"))
        _check_psd(P)

    @property
    def n_vars(self) -> int:
        return self.q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.beq.shape[0]

    @property
    def n_in(self) -> int:
        return self.hin.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


@dataclass
class QpSolution:
    """Solver output. Residuals are measured on the un-ridged problem."""
    z: np.ndarray
    status: str
    objective: float = float("nan")
    primal_residual: float = float("inf")
    dual_residual: float = float("inf")
    iterations: int = 0
    backend: str = ""
    duals_eq: Optional[np.ndarray] = field(default=None, repr=False)
    duals_in: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OPTIMAL


def _check_psd(P: sparse.csc_matrix):
    if P.nnz == 0:
        return
    asym = abs(P - P.T)
    if asym.nnz and asym.max() > SYM_TOL:
        raise ValueError(f"P is not symmetric (max asymmetry {asym.max():.3e})")
    # Zero rows/columns do not change definiteness; test the support only
    support = np.unique(P.nonzero()[0])
    block = P[support][:, support].toarray()
    block = 0.5 * (block + block.T)
    lam_min = float(np.linalg.eigvalsh(block).min())
    if lam_min < -PSD_TOL:
        raise ValueError(f"P is not positive semidefinite (min eigenvalue {lam_min:.3e})")


# ── Residuals ──────────────────────────────────────────────────

def _residuals(qp: QuadraticProgram, z, nu, mu):
    """(eq, in, stationarity) residuals in the ∞-norm."""
    r_eq = float(np.max(np.abs(qp.Aeq @ z - qp.beq), initial=0.0))
    r_in = float(np.max(qp.Gin @ z - qp.hin, initial=0.0))
    grad = qp.P @ z + qp.q + qp.Aeq.T @ nu + qp.Gin.T @ mu
    r_stat = float(np.max(np.abs(grad), initial=0.0))
    return r_eq, max(r_in, 0.0), r_stat


def _within(settings: QpSettings, r_eq, r_in, r_stat) -> bool:
    return r_eq <= settings.eps_eq and r_in <= settings.eps_in and r_stat <= settings.eps_stat


def _refine(qp: QuadraticProgram, z, active: np.ndarray):
    """Solve the KKT system of the equality + active-inequality problem.

    The ridged KKT matrix is factorized once; a few rounds of iterative
    refinement against the un-ridged system remove the ridge bias.
    """
    nz = qp.n_vars
    Aact = sparse.vstack([qp.Aeq, qp.Gin[active]], format="csc")
    bact = np.concatenate([qp.beq, qp.hin[active]])
    nc = Aact.shape[0]
    K_true = sparse.bmat([[qp.P, Aact.T], [Aact, None]], format="csc")
    K_reg = K_true + sparse.block_diag(
        [RIDGE * sparse.identity(nz), -RIDGE * sparse.identity(nc)], format="csc")
    try:
        lu = splu(K_reg)
    except RuntimeError:
        return None
    rhs = np.concatenate([-qp.q, bact])
    sol = lu.solve(rhs)
    for _ in range(REFINE_STEPS):
        sol = sol + lu.solve(rhs - K_true @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    z_new = sol[:nz]
    nu = sol[nz:nz + qp.n_eq]
    mu = np.zeros(qp.n_in)
    mu[active] = sol[nz + qp.n_eq:]
    return z_new, nu, mu


# ── QP ─────────────────────────────────────────────────────────

def _osqp_attempts(settings: QpSettings) -> tuple[dict, ...]:
    """OSQP option sets tried in order; the second one is slower but steadier."""
    polish_key = "polishing" if _osqp_new_api() else "polish"
    first = {"eps_abs": 1e-9, "eps_rel": 1e-9, "max_iter": settings.max_iter, polish_key: True}
    steady = dict(first, max_iter=RETRY_ITER_FACTOR * settings.max_iter, rho=0.01, scaling=25,
                  eps_prim_inf=1e-12, eps_dual_inf=1e-12)
    return first, steady


def _run_osqp(qp: QuadraticProgram, options: dict):
    nz = qp.n_vars
    A = sparse.vstack([qp.Aeq, qp.Gin], format="csc")
    lower = np.concatenate([qp.beq, np.full(qp.n_in, -np.inf)])
    upper = np.concatenate([qp.beq, qp.hin])
    P_reg = sparse.triu(qp.P + RIDGE * sparse.identity(nz), format="csc")
    if A.shape[0] == 0:
        # Unconstrained: OSQP needs at least one row
        A = sparse.csc_matrix((1, nz))
        lower, upper = np.array([-np.inf]), np.array([np.inf])
    prob = osqp.OSQP()
    prob.setup(P_reg, qp.q, A, lower, upper, verbose=False, **options)
    return prob.solve()


def _polish(qp: QuadraticProgram, settings: QpSettings, z, y):
    """Best (z, ν, μ, residuals) from the OSQP iterate and its active-set refinement."""
    ne = qp.n_eq
    nu = y[:ne]
    mu = np.maximum(y[ne:ne + qp.n_in], 0.0)
    best = (z, nu, mu, _residuals(qp, z, nu, mu))
    if _within(settings, *best[3]):
        return best
    slack = qp.hin - qp.Gin @ z
    active = np.flatnonzero((mu > ACTIVE_TOL) | (slack < ACTIVE_TOL))
    refined = _refine(qp, z, active)
    if refined is not None:
        z2, nu2, mu2 = refined
        mu2 = np.maximum(mu2, 0.0)
        r2 = _residuals(qp, z2, nu2, mu2)
        if max(r2) < max(best[3]):
            best = (z2, nu2, mu2, r2)
    return best


def solve(qp: QuadraticProgram, settings: QpSettings = DEFAULT_SETTINGS) -> QpSolution:
    """Solve a convex QP; status reflects the KKT residual contract.

    A primal infeasibility certificate ends the solve at once. Any other
    backend outcome (stall, a dual infeasibility report, residuals out of
    contract after refinement) earns one retry with steadier options before
    the solve is reported as max_iter.
    """
    nz = qp.n_vars
    best, iters, backend_status = None, 0, ""
    for options in _osqp_attempts(settings):
        res = _run_osqp(qp, options)
        backend_status = str(res.info.status).lower()
        iters += int(res.info.iter)
        if "primal infeasible" in backend_status:
            log.debug(f"QP infeasible ({backend_status}, {iters} iterations)")
            return QpSolution(np.full(nz, np.nan), STATUS_INFEASIBLE,
                              iterations=iters, backend="osqp")
        z = None if res.x is None else np.asarray(res.x, dtype=float)
        y = None if res.y is None else np.asarray(res.y, dtype=float)
        if z is None or y is None or z.shape != (nz,) or not np.all(np.isfinite(z)) \
                or not np.all(np.isfinite(y)):
            log.debug(f"QP attempt without a usable iterate ({backend_status})")
            continue
        candidate = _polish(qp, settings, z, y)
        if best is None or max(candidate[3]) < max(best[3]):
            best = candidate
        if _within(settings, *best[3]):
            break

    if best is None:
        log.debug(f"QP stalled without an iterate (backend: {backend_status})")
        return QpSolution(np.full(nz, np.nan), STATUS_MAX_ITER, iterations=iters, backend="osqp")
    z, nu, mu, (r_eq, r_in, r_stat) = best
    status = STATUS_OPTIMAL if _within(settings, r_eq, r_in, r_stat) else STATUS_MAX_ITER
    if status != STATUS_OPTIMAL:
        log.debug(f"QP residuals out of contract: eq={r_eq:.2e} in={r_in:.2e} stat={r_stat:.2e} "
                  f"(backend: {backend_status})")
    return QpSolution(
        z=z, status=status, objective=qp.objective(z),
        primal_residual=max(r_eq, r_in), dual_residual=r_stat,
        iterations=iters, backend="osqp", duals_eq=nu, duals_in=mu,
    )


def _osqp_new_api() -> bool:
    """OSQP 1.x renamed `polish` to `polishing`."""
    version = getattr(osqp, "__version__", "0")
    try:
        return int(version.split(".")[0]) >= 1
    except ValueError:
        return False


# ── LP ─────────────────────────────────────────────────────────

def _run_highs(qp: QuadraticProgram, n_user_in: int, bounds, settings: QpSettings, method: str):
    return linprog(
        qp.q,
        A_ub=qp.Gin[:n_user_in] if n_user_in else None,
        b_ub=qp.hin[:n_user_in] if n_user_in else None,
        A_eq=qp.Aeq if qp.n_eq else None,
        b_eq=qp.beq if qp.n_eq else None,
        bounds=bounds, method=method,
        options={"maxiter": settings.max_iter, "primal_feasibility_tolerance": LP_FEAS_TOL,
                 "dual_feasibility_tolerance": LP_FEAS_TOL},
    )


def solve_lp(q, Aeq=None, beq=None, Gin=None, hin=None, lb=None,
             settings: QpSettings = DEFAULT_SETTINGS) -> QpSolution:
    """Solve an LP (P = 0) with HiGHS.

    `lb` optionally gives per-variable lower bounds; they are handled by the
    backend as bounds instead of inequality rows and count as Gin rows in the
    reported residuals.

    The status follows HiGHS: `optimal` means HiGHS proved optimality, and
    the returned point is primal feasible to the backend tolerance. The KKT
    residuals built from the HiGHS marginals are reported, and logged when
    they miss the contract, but do not overrule the backend. Callers that
    need a certificate (membership witnesses) check the point themselves.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    nz = q.shape[0]
    n_user = 0 if Gin is None else Gin.shape[0]
    if lb is not None:
        lb = _as_vec(lb, nz, "lb")
        Gin_all = sparse.vstack([_as_csc(Gin, n_user, nz, "Gin"), -sparse.identity(nz, format="csc")],
                                format="csc")
        hin_all = np.concatenate([_as_vec(hin, n_user, "hin"), -lb])
        bounds = [(float(v), None) for v in lb]
    else:
        Gin_all, hin_all = Gin, hin
        bounds = (None, None)
    qp = QuadraticProgram(None, q, Aeq, beq, Gin_all, hin_all)

    res = _run_highs(qp, n_user, bounds, settings, "highs")
    if res.status not in (0, 2, 3):
        log.debug(f"HiGHS ended with status {res.status}: {res.message}; "
                  "retrying with the interior-point solver")
        res = _run_highs(qp, n_user, bounds, settings, "highs-ipm")
    iters = int(getattr(res, "nit", 0) or 0)
    if res.status == 2:
        return QpSolution(np.full(nz, np.nan), STATUS_INFEASIBLE, iterations=iters, backend="highs")
    if res.status != 0 or res.x is None:
        log.debug(f"LP not solved (HiGHS status {res.status}: {res.message})")
        return QpSolution(np.full(nz, np.nan), STATUS_MAX_ITER, iterations=iters, backend="highs")

    z = np.asarray(res.x, dtype=float)
    # HiGHS marginals are ∂f/∂b; KKT multipliers of ≤ and = rows are their negatives,
    # lower-bound marginals are already the multipliers of −z ≤ −lb
    nu = -np.asarray(res.eqlin.marginals) if qp.n_eq else np.zeros(0)
    mu_user = -np.asarray(res.ineqlin.marginals) if n_user else np.zeros(0)
    if lb is not None:
        mu = np.concatenate([mu_user, np.asarray(res.lower.marginals, dtype=float)])
    else:
        mu = mu_user
    mu = np.maximum(mu, 0.0)
    r_eq, r_in, r_stat = _residuals(qp, z, nu, mu)
    if not _within(settings, r_eq, r_in, r_stat):
        log.debug(f"LP optimal per HiGHS, KKT residuals eq={r_eq:.2e} in={r_in:.2e} "
                  f"stat={r_stat:.2e}")
    return QpSolution(
        z=z, status=STATUS_OPTIMAL, objective=float(qp.q @ z),
        primal_residual=max(r_eq, r_in), dual_residual=r_stat,
        iterations=iters, backend="highs", duals_eq=nu, duals_in=mu,
    )
