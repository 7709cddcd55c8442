"""Batch estimators for vector-valued gain maps from interval power data.

Every estimator consumes a list of :class:`~psdmap.model.MeasurementRecord`
and returns a :class:`MapEstimate` that can be evaluated anywhere in the
region.  Estimators:

``fit_ridge``
    Squared loss on raw (un-quantized) powers; closed form.
``fit_svm_nonparametric``
    Interval-insensitive loss solved through its box-constrained dual, so the
    quantization interval of each measurement is respected exactly.
``fit_svm_semiparametric``
    Adds a parametric component spanned by user basis functions; its
    coefficients come out of the equality-constraint multipliers of the dual.
``fit_svm_cpd``
    Semiparametric variant valid for conditionally positive definite kernels
    (thin-plate splines in particular): the dual Hessian is assembled through
    the basis-null-space projector, which restores positive semidefiniteness.

Scaling conventions
-------------------
With T total measurements, the regularizer enters the coefficient problem as
``lam * T * c' K c`` and the dual box is [0, 1].  Internally the dual is
solved in rescaled variables ``z = (alpha, beta) / (2 * lam * T)`` so that the
Hessian stays O(||K0||) and the recovered coefficients ``c = Phi0 @ (z_a -
z_b)`` remain well-conditioned for the very small ``lam`` values typical in
mapping problems.  The rescaling leaves the equality multipliers untouched,
which is what makes reading the parametric coefficients off the multipliers
safe.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    KernelMatrix,
    assemble_basis_matrix,
    assemble_kernel,
    basis_from_config,
    kernel_from_config,
    projector,
)
from .model import MeasurementRecord
from .qpsolver import OPTIMAL, QpProblem, SolverError, solve_qp

__all__ = [
    "DesignMatrices",
    "MapEstimate",
    "DualSolution",
    "assemble_design",
    "fit_ridge",
    "fit_svm_nonparametric",
    "fit_svm_semiparametric",
    "fit_svm_cpd",
    "assemble_ktilde_separable",
    "assemble_ktilde_dense",
    "theta_recovery_separable",
    "evaluate_map",
]

FIT_TOL = 1e-9
FIT_MAX_ITER = 200


@dataclass(frozen=True)
class DesignMatrices:
    """Measurement matrices shared by all batch fits.

    ``phi`` stacks the filter weights column-wise (M x T).  ``phi0`` is the
    anchor-expanded version (MN x T) whose column j equals the canonical
    vector of anchor ``sensor_of[j]`` Kronecker the j-th filter weight.
    Coincident sensor locations share one anchor, so T counts measurements
    while N counts distinct locations.
    """

    phi: np.ndarray
    phi0: np.ndarray
    y: np.ndarray
    eps: np.ndarray
    anchors: np.ndarray
    sensor_of: np.ndarray
    raw: np.ndarray | None

    @property
    def num_channels(self) -> int:
        return self.phi.shape[0]

    @property
    def num_measurements(self) -> int:
        return self.phi.shape[1]

    @property
    def num_anchors(self) -> int:
        return self.anchors.shape[0]

    def phi0_dot(self, w: np.ndarray) -> np.ndarray:
        """Phi0 @ w without materializing Phi0 (returns an MN vector)."""
        out = np.zeros((self.num_anchors, self.num_channels))
        np.add.at(out, self.sensor_of, self.phi.T * w[:, None])
        return out.ravel()

    def phi0_t_dot(self, v: np.ndarray) -> np.ndarray:
        """Phi0.T @ v for an MN vector (per-measurement filtered values)."""
        per_anchor = v.reshape(self.num_anchors, self.num_channels)
        return np.einsum("jm,jm->j", per_anchor[self.sensor_of], self.phi.T)


def assemble_design(records: list[MeasurementRecord]) -> DesignMatrices:
    """Group records into design matrices, deduplicating coincident locations."""
    if not records:
        raise ValueError("need at least one measurement record")
    m = records[0].num_channels
    anchor_index: dict[tuple, int] = {}
    anchors = []
    sensor_of = np.empty(len(records), dtype=int)
    for j, rec in enumerate(records):
        if rec.num_channels != m:
            raise ValueError(
                f"inconsistent number of channels: record {j} has {rec.num_channels}, expected {m}"
            )
        key = tuple(rec.location.tolist())
        idx = anchor_index.get(key)
        if idx is None:
            idx = len(anchors)
            anchor_index[key] = idx
            anchors.append(rec.location)
        sensor_of[j] = idx
    anchors = np.vstack(anchors)
    t = len(records)
    n = anchors.shape[0]
    phi = np.column_stack([rec.phi for rec in records])
    phi0 = np.zeros((n * m, t))
    for j in range(t):
        s = sensor_of[j]
        phi0[s * m:(s + 1) * m, j] = phi[:, j]
    y = np.array([rec.y for rec in records], dtype=float)
    eps = np.array([rec.eps for rec in records], dtype=float)
    raws = [rec.raw for rec in records]
    raw = None if any(r is None for r in raws) else np.array(raws, dtype=float)
    return DesignMatrices(phi, phi0, y, eps, anchors, sensor_of, raw)


@dataclass(frozen=True)
class MapEstimate:
    """Fitted gain map: kernel expansion around the anchors plus optional
    parametric part.  Evaluation returns the length-M gain vector."""

    anchors: np.ndarray
    coeffs: np.ndarray
    theta: np.ndarray
    kernel: object
    basis: object | None
    lam: float

    def evaluate(self, x) -> np.ndarray:
        return self.evaluate_grid(np.atleast_2d(np.asarray(x, dtype=float)))[0]

    def evaluate_grid(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        coeffs = self.coeffs.reshape(self.anchors.shape[0], self.kernel.num_channels)
        out = self.kernel.apply(points, self.anchors, coeffs)
        if self.basis is not None and self.theta.size:
            out = out + self.basis.apply(points, self.theta)
        return out

    def rkhs_norm_sq(self) -> float:
        """c' K c of the nonparametric component (its squared RKHS norm)."""
        gram = assemble_kernel(self.kernel, self.anchors)
        if gram.scalar is not None:
            c = self.coeffs.reshape(self.anchors.shape[0], -1)
            return float(np.sum(c * (gram.scalar @ c)))
        return float(self.coeffs @ gram.dense @ self.coeffs)

    def save(self, path: str) -> None:
        payload = {
            "schema": "psdmap-estimate/1",
            "kernel": self.kernel.describe(),
            "basis": None if self.basis is None else self.basis.describe(),
            "lambda": float(self.lam),
            "anchors": [[float(v) for v in row] for row in self.anchors],
            "coeffs": [float(v) for v in self.coeffs],
            "theta": [float(v) for v in self.theta],
        }
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        os.replace(tmp, path)

    @staticmethod
    def load(path: str) -> "MapEstimate":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("schema") != "psdmap-estimate/1":
            raise ValueError(f"unrecognized estimate file schema: {payload.get('schema')!r}")
        return MapEstimate(
            anchors=np.asarray(payload["anchors"], dtype=float),
            coeffs=np.asarray(payload["coeffs"], dtype=float),
            theta=np.asarray(payload["theta"], dtype=float),
            kernel=kernel_from_config(payload["kernel"]),
            basis=basis_from_config(payload["basis"]),
            lam=float(payload["lambda"]),
        )


@dataclass(frozen=True)
class DualSolution:
    """Raw dual-solver output plus recovered slacks and objective bookkeeping."""

    alpha: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    xi: np.ndarray
    zeta: np.ndarray
    primal_objective: float
    dual_objective: float
    gap: float
    eq_residual: float = field(default=0.0)


def evaluate_map(estimate: MapEstimate, x) -> np.ndarray:
    """Gain vector of a fitted map at one location."""
    return estimate.evaluate(x)


def _gram_k0(kernel, gram: KernelMatrix, dm: DesignMatrices) -> np.ndarray:
    """The T x T dual Hessian factor Phi0' K Phi0."""
    if gram.scalar is not None:
        expanded = gram.scalar[np.ix_(dm.sensor_of, dm.sensor_of)]
        return expanded * (dm.phi.T @ dm.phi)
    if hasattr(kernel, "widths"):
        # diagonal kernel: K0[i, j] = sum_m phi_mi phi_mj k_m(x_si, x_sj)
        from .kernels import pairwise_sq_dists

        sq = pairwise_sq_dists(dm.anchors, dm.anchors)[np.ix_(dm.sensor_of, dm.sensor_of)]
        out = np.zeros((dm.num_measurements, dm.num_measurements))
        for m, w in enumerate(kernel.widths):
            out += np.exp(-sq / w) * np.outer(dm.phi[m], dm.phi[m])
        return out
    return dm.phi0.T @ gram.full() @ dm.phi0


def _k_dot(gram: KernelMatrix, c: np.ndarray) -> np.ndarray:
    if gram.scalar is not None:
        cm = c.reshape(gram.num_anchors, gram.num_channels)
        return (gram.scalar @ cm).ravel()
    return gram.dense @ c


def _solve_interval_dual(k0, y, eps, lam, a_eq=None, tol=FIT_TOL, max_iter=FIT_MAX_ITER):
    """Box QP in rescaled dual variables; returns (alpha, beta, delta, mu, min_value).

    ``delta = Phi0-weights`` such that ``c = Phi0 @ delta``; ``min_value`` is
    the optimal value of the minimization form of the dual in original units.
    """
    t = y.size
    scale = 2.0 * lam * t
    bound = 1.0 / scale
    quad = np.block([[k0, -k0], [-k0, k0]])
    lin = np.concatenate([-(y - eps), y + eps])
    if a_eq is not None and a_eq.shape[0] > 0:
        a_full = np.hstack([a_eq, -a_eq])
        b_full = np.zeros(a_eq.shape[0])
    else:
        a_full = b_full = None
    problem = QpProblem(quad, lin, np.zeros(2 * t), np.full(2 * t, bound), a_full, b_full)
    sol = solve_qp(problem, tol=tol, max_iter=max_iter)
    if sol.status != OPTIMAL:
        raise SolverError(
            f"dual quadratic program did not converge (status {sol.status}, "
            f"kkt residual {sol.kkt_residual:.3e})"
        )
    za, zb = sol.z[:t], sol.z[t:]
    alpha = np.clip(za * scale, 0.0, 1.0)
    beta = np.clip(zb * scale, 0.0, 1.0)
    delta = za - zb
    return alpha, beta, delta, sol.eq_multipliers.copy(), sol.objective * scale


def _recover(dm: DesignMatrices, gram: KernelMatrix, kernel, basis, theta, lam, delta,
             alpha, beta, mu, dual_min, quad_form):
    """Build the MapEstimate and DualSolution from dual quantities.

    ``quad_form`` is c'Kc of the fitted coefficients (callers supply it to
    reuse structure); slacks follow from the interval residuals.
    """
    t = dm.num_measurements
    c = dm.phi0 @ delta
    pred = dm.phi0_t_dot(_k_dot(gram, c))
    if basis is not None and theta.size:
        pred = pred + dm.phi0_t_dot(assemble_basis_matrix(basis, dm.anchors) @ theta)
    resid_hi = dm.y - pred - dm.eps
    resid_lo = -dm.y + pred - dm.eps
    xi = np.maximum(0.0, resid_hi)
    zeta = np.maximum(0.0, resid_lo)
    primal = float(xi.sum() + zeta.sum() + lam * t * quad_form)
    dual_value = -dual_min
    est = MapEstimate(dm.anchors, c, theta, kernel, basis, lam)
    dual = DualSolution(alpha, beta, mu, xi, zeta, primal, dual_value,
                        primal - dual_value)
    return est, dual


def fit_ridge(records: list[MeasurementRecord], kernel, lam: float) -> MapEstimate:
    """Closed-form squared-loss fit on raw powers.

    Solves ``(Phi0 Phi0' K + lam * T * I) c = Phi0 raw``, the normal
    equations of  mean squared residual + lam * c'Kc  over the kernel
    expansion.  Requires every record to carry its raw power.
    """
    if lam <= 0:
        raise ValueError("regularization weight must be positive")
    dm = assemble_design(records)
    if dm.raw is None:
        raise ValueError("ridge fitting needs raw power values on every record "
                         "(quantized-only or virtual records cannot be used)")
    gram = assemble_kernel(kernel, dm.anchors)
    kfull = gram.full()
    t = dm.num_measurements
    mn = kfull.shape[0]
    lhs = (dm.phi0 @ dm.phi0.T) @ kfull + lam * t * np.eye(mn)
    try:
        c = np.linalg.solve(lhs, dm.phi0 @ dm.raw)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"ridge normal equations are singular: {exc}") from exc
    return MapEstimate(dm.anchors, c, np.zeros(0), kernel, None, lam)


def fit_svm_nonparametric(records, kernel, lam: float,
                          tol: float = FIT_TOL) -> tuple[MapEstimate, DualSolution]:
    """Interval-insensitive fit without a parametric part.

    Measurements inside their quantization interval cost nothing; outside,
    cost grows linearly.  The box dual has 2T variables regardless of M.
    """
    if lam <= 0:
        raise ValueError("regularization weight must be positive")
    dm = assemble_design(records)
    gram = assemble_kernel(kernel, dm.anchors)
    k0 = _gram_k0(kernel, gram, dm)
    alpha, beta, delta, _, dual_min = _solve_interval_dual(k0, dm.y, dm.eps, lam, tol=tol)
    quad_form = float(delta @ k0 @ delta)
    return _recover(dm, gram, kernel, None, np.zeros(0), lam, delta,
                    alpha, beta, np.zeros(0), dual_min, quad_form)


def _basis_design(basis, dm: DesignMatrices):
    """Basis design matrix, its structurally nonzero columns, and B' Phi0."""
    bmat = assemble_basis_matrix(basis, dm.anchors)
    col_norms = np.linalg.norm(bmat, axis=0)
    active = col_norms > 1e-14 * max(1.0, col_norms.max())
    b_active = bmat[:, active]
    a_eq = b_active.T @ dm.phi0
    return bmat, active, b_active, a_eq


def fit_svm_semiparametric(records, kernel, basis, lam: float,
                           tol: float = FIT_TOL) -> tuple[MapEstimate, DualSolution]:
    """Joint fit of kernel expansion plus parametric basis (positive definite
    kernels).  The basis coefficients are the multipliers of the dual's
    equality constraint ``B' Phi0 (alpha - beta) = 0``; basis columns that are
    identically zero on the anchors (e.g. the noise channel of a pathloss
    basis) are excluded from the constraint and get coefficient zero.
    """
    if basis is None:
        return fit_svm_nonparametric(records, kernel, lam, tol=tol)
    if lam <= 0:
        raise ValueError("regularization weight must be positive")
    dm = assemble_design(records)
    gram = assemble_kernel(kernel, dm.anchors)
    k0 = _gram_k0(kernel, gram, dm)
    bmat, active, b_active, a_eq = _basis_design(basis, dm)
    if b_active.shape[1]:
        sv = np.linalg.svd(a_eq, compute_uv=False)
        if sv.size == 0 or sv[-1] <= 1e-12 * sv[0]:
            raise ValueError(
                "equality system B' Phi0 is rank deficient; the parametric "
                "coefficients are not identifiable from this measurement set"
            )
    alpha, beta, delta, mu, dual_min = _solve_interval_dual(
        k0, dm.y, dm.eps, lam, a_eq=a_eq, tol=tol)
    theta = np.zeros(bmat.shape[1])
    theta[active] = mu
    quad_form = float(delta @ k0 @ delta)
    est, dual = _recover(dm, gram, kernel, basis, theta, lam, delta,
                         alpha, beta, mu, dual_min, quad_form)
    eq_res = float(np.abs(a_eq @ (alpha - beta)).max()) if a_eq.size else 0.0
    return est, DualSolution(dual.alpha, dual.beta, dual.mu, dual.xi, dual.zeta,
                             dual.primal_objective, dual.dual_objective, dual.gap,
                             eq_residual=eq_res)


def assemble_ktilde_separable(scalar_kernel: np.ndarray, scalar_basis: np.ndarray | None,
                              phi_bar: np.ndarray, sensor_of: np.ndarray | None = None
                              ) -> np.ndarray:
    """Projected dual Hessian for separable kernel/basis without any MN-sized
    intermediate:  ``(P K P expanded to measurements) hadamard (Phi' Phi)``.

    ``scalar_kernel`` is the N x N scalar Gram matrix, ``scalar_basis`` the
    N x N_B scalar basis design (or None/empty for no basis), and ``phi_bar``
    the M x T stacked filter weights.  ``sensor_of`` maps measurements to
    anchors; when omitted, T must be an integer multiple of N with
    measurements grouped anchor-major.
    """
    n = scalar_kernel.shape[0]
    t = phi_bar.shape[1]
    if sensor_of is None:
        if t % n:
            raise ValueError("cannot infer measurement grouping: T is not a multiple of N")
        sensor_of = np.repeat(np.arange(n), t // n)
    if scalar_basis is not None and scalar_basis.size:
        proj = projector(scalar_basis)
        core = proj @ scalar_kernel @ proj
    else:
        core = scalar_kernel
    return core[np.ix_(sensor_of, sensor_of)] * (phi_bar.T @ phi_bar)


def assemble_ktilde_dense(kernel_full: np.ndarray, basis_matrix: np.ndarray,
                          phi0: np.ndarray) -> np.ndarray:
    """Reference dense path: Phi0' P K P Phi0 with P the basis projector."""
    proj = projector(basis_matrix)
    return phi0.T @ proj @ kernel_full @ proj @ phi0


def theta_recovery_separable(mu: np.ndarray, scalar_kernel: np.ndarray,
                             scalar_basis: np.ndarray, c_bar: np.ndarray,
                             num_channels: int) -> np.ndarray:
    """Basis coefficients from equality multipliers in the separable case:
    ``theta = mu - kron((B'B)^-1 B'K, I_M) c``, evaluated channel-blockwise."""
    gram = scalar_basis.T @ scalar_basis
    try:
        x = np.linalg.solve(gram, scalar_basis.T @ scalar_kernel)
    except np.linalg.LinAlgError as exc:
        raise ValueError("scalar basis design has singular B'B") from exc
    c = c_bar.reshape(scalar_kernel.shape[0], num_channels)
    return mu - (x @ c).ravel()


def fit_svm_cpd(records, kernel, basis, lam: float,
                tol: float = FIT_TOL) -> tuple[MapEstimate, DualSolution]:
    """Semiparametric fit for kernels that are only conditionally positive
    definite with respect to the basis (thin-plate splines in particular).

    The dual Hessian uses the projected kernel ``Phi0' P K P Phi0`` which is
    positive semidefinite whenever the kernel is CPD for the basis, and the
    basis coefficients need the correction ``theta = mu - (B'B)^-1 B'K c``.
    The constraint ``B' c = 0`` then holds automatically.
    """
    if basis is None:
        raise ValueError("the CPD fit requires a nonempty parametric basis")
    if lam <= 0:
        raise ValueError("regularization weight must be positive")
    dm = assemble_design(records)
    gram = assemble_kernel(kernel, dm.anchors)
    bmat, active, b_active, a_eq = _basis_design(basis, dm)
    if not b_active.shape[1]:
        raise ValueError("the parametric basis is identically zero on the anchors")
    sv = np.linalg.svd(a_eq, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-12 * sv[0]:
        raise ValueError(
            "equality system B' Phi0 is rank deficient; the parametric "
            "coefficients are not identifiable from this measurement set"
        )
    separable = gram.scalar is not None and getattr(basis, "is_separable", False)
    if separable:
        b_scalar = basis.scalar_matrix(dm.anchors)
        ktilde = assemble_ktilde_separable(gram.scalar, b_scalar, dm.phi, dm.sensor_of)
    else:
        ktilde = assemble_ktilde_dense(gram.full(), b_active, dm.phi0)
    alpha, beta, delta, mu, dual_min = _solve_interval_dual(
        ktilde, dm.y, dm.eps, lam, a_eq=a_eq, tol=tol)
    c = dm.phi0 @ delta
    if separable:
        theta = theta_recovery_separable(mu, gram.scalar, b_scalar, c, dm.num_channels)
    else:
        theta = np.zeros(bmat.shape[1])
        bg = b_active.T @ b_active
        theta[active] = mu - np.linalg.solve(bg, b_active.T @ _k_dot(gram, c))
    quad_form = float(delta @ ktilde @ delta)
    est, dual = _recover(dm, gram, kernel, basis, theta, lam, delta,
                         alpha, beta, mu, dual_min, quad_form)
    eq_res = float(np.abs(a_eq @ (alpha - beta)).max()) if a_eq.size else 0.0
    return est, DualSolution(dual.alpha, dual.beta, dual.mu, dual.xi, dual.zeta,
                             dual.primal_objective, dual.dual_objective, dual.gap,
                             eq_residual=eq_res)
