"""Convex quadratic programming over a box with optional linear equalities.

Solves

    minimize    0.5 * z' Q z + q' z
    subject to  A z = b,   lower <= z <= upper

with a primal-dual interior-point method (Mehrotra predictor-corrector).
The equality-constraint Lagrange multipliers are part of the solution; the
sign convention is fixed by the stationarity equation

    Q z + q + A' mu - w_lower + w_upper = 0,      w_lower, w_upper >= 0,

which downstream code relies on when it reads parametric coefficients off
the multipliers.  The solver is deterministic: no randomized pivoting, no
wall-clock dependence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = ["QpProblem", "QpSolution", "SolverError", "solve_qp"]

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

# fraction-to-boundary factor keeping iterates strictly interior
_FTB = 0.99995


class SolverError(RuntimeError):
    """Raised when an optimization backend cannot produce a usable solution."""


@dataclass
class QpProblem:
    """Problem data; ``a_eq``/``b_eq`` may be None for pure box problems."""

    quad: np.ndarray
    lin: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=float)
        self.lin = np.asarray(self.lin, dtype=float).ravel()
        n = self.lin.size
        if self.quad.shape != (n, n):
            raise ValueError(f"quadratic term must be {n}x{n}, got {self.quad.shape}")
        asym = np.abs(self.quad - self.quad.T).max() if n else 0.0
        if asym > 1e-10 * max(1.0, np.abs(self.quad).max()):
            raise ValueError("quadratic term must be symmetric (tol 1e-10)")
        self.quad = 0.5 * (self.quad + self.quad.T)
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("box bounds must be finite")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds must not exceed upper bounds")
        if self.a_eq is not None:
            self.a_eq = np.atleast_2d(np.asarray(self.a_eq, dtype=float))
            self.b_eq = np.atleast_1d(np.asarray(self.b_eq, dtype=float))
            if self.a_eq.shape != (self.b_eq.size, n):
                raise ValueError("equality system dimensions are inconsistent")

    @property
    def num_vars(self) -> int:
        return self.lin.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.quad @ z + self.lin @ z)


@dataclass
class QpSolution:
    z: np.ndarray
    eq_multipliers: np.ndarray
    lower_multipliers: np.ndarray
    upper_multipliers: np.ndarray
    objective: float
    kkt_residual: float
    gap: float
    status: str
    iterations: int = field(default=0)


def _phase1_feasible(p: QpProblem, tol: float) -> bool:
    """Projected gradient on 0.5*||Az-b||^2 over the box; False when the
    residual cannot be driven (近) to zero, i.e. equalities conflict with the box."""
    a, b = p.a_eq, p.b_eq
    z = np.clip(np.linalg.lstsq(a, b, rcond=None)[0], p.lower, p.upper)
    lip = np.linalg.norm(a, 2) ** 2
    if lip == 0.0:
        return np.allclose(b, 0.0, atol=tol)
    step = 1.0 / lip
    scale = 1.0 + np.abs(b).max() if b.size else 1.0
    for _ in range(5000):
        r = a @ z - b
        if np.abs(r).max() <= 1e-9 * scale:
            return True
        z = np.clip(z - step * (a.T @ r), p.lower, p.upper)
    return bool(np.abs(a @ z - b).max() <= 1e-7 * scale)


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha in (0, 1] with v + alpha*dv >= 0, given v > 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _dual_objective(p: QpProblem, z, mu, w_lo, w_up) -> float:
    # inf_z L at the stationary point: -0.5 z'Qz - b'mu + l'w_lo - u'w_up
    val = -0.5 * z @ p.quad @ z + p.lower @ w_lo - p.upper @ w_up
    if p.a_eq is not None:
        val -= p.b_eq @ mu
    return float(val)


def solve_qp(p: QpProblem, tol: float = 1e-8, max_iter: int = 100) -> QpSolution:
    """Solve a box/equality QP; see the module docstring for conventions.

    Returns a solution whose status is ``"optimal"`` only when the scaled
    stationarity, feasibility and complementarity residuals all fall below
    ``tol``.  The reported duality gap is exact up to those residuals.
    """
    n = p.num_vars
    has_eq = p.a_eq is not None and p.a_eq.shape[0] > 0
    m_eq = p.a_eq.shape[0] if has_eq else 0

    # fixed variables (lower == upper) are eliminated up front
    fixed = p.upper - p.lower <= 0.0
    if np.any(fixed):
        return _solve_with_fixed(p, fixed, tol, max_iter)

    if has_eq and not _phase1_feasible(p, tol):
        z = np.clip(np.zeros(n), p.lower, p.upper)
        return QpSolution(z, np.zeros(m_eq), np.zeros(n), np.zeros(n),
                          p.objective(z), np.inf, np.inf, INFEASIBLE)

    quad, lin = p.quad, p.lin
    lo, up = p.lower, p.upper
    a = p.a_eq if has_eq else np.zeros((0, n))
    b = p.b_eq if has_eq else np.zeros(0)

    base_jitter = 1e-10 * max(np.trace(quad), 1.0) / max(n, 1)

    # starting point: box-projected Newton guess with a safe interior margin
    try:
        guess = np.linalg.solve(quad + np.eye(n) * max(1e-8, base_jitter), -lin)
    except np.linalg.LinAlgError:
        guess = np.zeros(n)
    width = up - lo
    margin = np.minimum(0.45 * width, 1.0 + 0.01 * np.abs(guess))
    z = np.clip(guess, lo + margin, up - margin)
    s_lo = z - lo
    s_up = up - z
    g0 = quad @ z + lin
    w_lo = np.maximum(1.0, np.abs(g0))
    w_up = np.maximum(1.0, np.abs(g0))
    mu = np.zeros(m_eq)

    lin_scale = max(1.0, np.abs(lin).max() if n else 1.0)
    b_scale = max(1.0, np.abs(b).max() if m_eq else 1.0)

    status = MAX_ITER
    iters = 0
    kkt = np.inf
    for iters in range(1, max_iter + 1):
        r_dual = quad @ z + lin + (a.T @ mu if has_eq else 0.0) - w_lo + w_up
        r_prim = a @ z - b if has_eq else np.zeros(0)
        comp = s_lo @ w_lo + s_up @ w_up
        obj = p.objective(z)
        obj_scale = 1.0 + abs(obj)
        kkt = max(
            np.abs(r_dual).max() / max(lin_scale, np.abs(quad @ z).max(), 1.0),
            (np.abs(r_prim).max() / b_scale) if m_eq else 0.0,
            comp / obj_scale,
        )
        if kkt <= tol:
            status = OPTIMAL
            break

        barrier = comp / (2 * n)
        d = w_lo / s_lo + w_up / s_up
        h = quad + np.diag(d)

        factor = None
        jitter = base_jitter
        for _ in range(6):
            try:
                factor = cho_factor(h + jitter * np.eye(n), lower=True, check_finite=False)
                break
            except np.linalg.LinAlgError:
                jitter *= 100.0
        if factor is None:
            if not has_eq:
                z = _projected_gradient_refine(p, z)
                obj = p.objective(z)
                return QpSolution(z, mu, w_lo, w_up, obj, kkt, np.inf, MAX_ITER, iters)
            break

        def solve_kkt(rhs_z, rp):
            # solves H dz + A' dmu = rhs_z,  A dz = -rp
            if not has_eq:
                return cho_solve(factor, rhs_z, check_finite=False), np.zeros(0)
            hi_rhs = cho_solve(factor, rhs_z, check_finite=False)
            hi_at = cho_solve(factor, a.T, check_finite=False)
            schur = a @ hi_at + 1e-14 * np.eye(m_eq)
            d_mu = np.linalg.solve(schur, a @ hi_rhs + rp)
            return hi_rhs - hi_at @ d_mu, d_mu

        # predictor (affine scaling) step
        rc_lo = -s_lo * w_lo
        rc_up = -s_up * w_up
        rhs = -r_dual + rc_lo / s_lo - rc_up / s_up
        dz_aff, dmu_aff = solve_kkt(rhs, r_prim)
        dw_lo_aff = (rc_lo - w_lo * dz_aff) / s_lo
        dw_up_aff = (rc_up + w_up * dz_aff) / s_up
        a_p = min(_max_step(s_lo, dz_aff), _max_step(s_up, -dz_aff))
        a_d = min(_max_step(w_lo, dw_lo_aff), _max_step(w_up, dw_up_aff))
        comp_aff = ((s_lo + a_p * dz_aff) @ (w_lo + a_d * dw_lo_aff)
                    + (s_up - a_p * dz_aff) @ (w_up + a_d * dw_up_aff))
        sigma = (max(comp_aff, 0.0) / comp) ** 3 if comp > 0 else 0.1

        # corrector step with centering
        target = sigma * barrier
        rc_lo = -s_lo * w_lo + target - dz_aff * dw_lo_aff
        rc_up = -s_up * w_up + target + dz_aff * dw_up_aff
        rhs = -r_dual + rc_lo / s_lo - rc_up / s_up
        dz, dmu = solve_kkt(rhs, r_prim)
        dw_lo = (rc_lo - w_lo * dz) / s_lo
        dw_up = (rc_up + w_up * dz) / s_up

        a_p = _FTB * min(_max_step(s_lo, dz), _max_step(s_up, -dz))
        a_d = _FTB * min(_max_step(w_lo, dw_lo), _max_step(w_up, dw_up))
        z = z + a_p * dz
        s_lo = z - lo
        s_up = up - z
        w_lo = w_lo + a_d * dw_lo
        w_up = w_up + a_d * dw_up
        mu = mu + a_d * dmu
        # keep slacks numerically positive after rounding
        floor = 1e-30 * np.maximum(width, 1.0)
        s_lo = np.maximum(s_lo, floor)
        s_up = np.maximum(s_up, floor)

    z = np.clip(z, lo, up)
    obj = p.objective(z)
    gap = obj - _dual_objective(p, z, mu, w_lo, w_up)
    return QpSolution(z, mu, w_lo, w_up, obj, float(kkt), float(gap), status, iters)


def _solve_with_fixed(p: QpProblem, fixed: np.ndarray, tol: float, max_iter: int) -> QpSolution:
    """Eliminate variables with equal bounds, solve the reduced QP, scatter back."""
    free = ~fixed
    zf = p.lower[fixed]
    quad_ff = p.quad[np.ix_(free, free)]
    lin_f = p.lin[free] + p.quad[np.ix_(free, fixed)] @ zf
    a_f = b_f = None
    if p.a_eq is not None:
        a_f = p.a_eq[:, free]
        b_f = p.b_eq - p.a_eq[:, fixed] @ zf
    sub = QpProblem(quad_ff, lin_f, p.lower[free], p.upper[free], a_f, b_f)
    sol = solve_qp(sub, tol=tol, max_iter=max_iter)
    n = p.num_vars
    z = np.empty(n)
    z[free] = sol.z
    z[fixed] = zf
    w_lo = np.zeros(n)
    w_up = np.zeros(n)
    w_lo[free] = sol.lower_multipliers
    w_up[free] = sol.upper_multipliers
    # stationarity residual on fixed coordinates becomes their bound multiplier
    resid = p.quad @ z + p.lin
    if p.a_eq is not None:
        resid += p.a_eq.T @ sol.eq_multipliers
    w_lo[fixed] = np.maximum(resid[fixed], 0.0)
    w_up[fixed] = np.maximum(-resid[fixed], 0.0)
    obj = p.objective(z)
    gap = obj - _dual_objective(p, z, sol.eq_multipliers, w_lo, w_up)
    return QpSolution(z, sol.eq_multipliers, w_lo, w_up, obj,
                      sol.kkt_residual, float(gap), sol.status, sol.iterations)


def _projected_gradient_refine(p: QpProblem, z: np.ndarray, iters: int = 2000) -> np.ndarray:
    """Fallback for box-only problems when factorization keeps failing."""
    lip = np.linalg.norm(p.quad, 2) + 1.0
    step = 1.0 / lip
    for _ in range(iters):
        z = np.clip(z - step * (p.quad @ z + p.lin), p.lower, p.upper)
    return z
