"""Online gain-map estimation by stochastic subgradient steps in the RKHS.

Each incoming measurement updates the running estimate

    w_{t+1} = (1 - 2 mu_t lam) w_t + mu_t L'(e_t) K(., x_t) phi_t,

with learning rate ``mu_t = mu / sqrt(t)`` and ``e_t`` the interval residual
of the measurement under the current estimate.  The estimate therefore stays
a kernel expansion over visited locations.  Two bookkeeping modes exist:

``shared``
    All measurements come from a fixed roster of sensor locations; one
    coefficient vector per location is maintained (at most N of them).
``distinct``
    Every step may bring a new location; coefficients are appended and,
    because old ones shrink geometrically, the expansion may be truncated to
    the most recent ones.

The averaged instantaneous regularized cost of the iterates approaches the
batch optimum at rate a1/sqrt(T) + a2/T; :class:`RegretLedger` tracks the
running sums and the constants of that envelope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import assemble_kernel
from .model import MeasurementRecord

__all__ = [
    "loss_value",
    "loss_subgradient",
    "OnlineState",
    "make_shared_state",
    "make_distinct_state",
    "predict",
    "step",
    "instantaneous_cost",
    "rkhs_norm_sq",
    "RegretLedger",
    "regret_envelope",
    "suggested_truncation",
]

LOSSES = ("l1eps", "l2eps")


def loss_value(loss: str, e: float, eps: float) -> float:
    """Interval-insensitive losses: zero inside the tube, growing outside."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if loss == "l1eps":
        return max(0.0, abs(e) - eps)
    if loss == "l2eps":
        return max(0.0, e * e - eps)
    raise ValueError(f"unknown loss: {loss!r}")


def loss_subgradient(loss: str, e: float, eps: float) -> float:
    """A subgradient of the loss at residual ``e`` (sign convention sgn(0)=0)."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if loss == "l1eps":
        return (np.sign(e - eps) + np.sign(e + eps)) / 2.0
    if loss == "l2eps":
        return 2.0 * e if e * e > eps else 0.0
    raise ValueError(f"unknown loss: {loss!r}")


@dataclass(frozen=True)
class OnlineState:
    """Immutable snapshot of the online estimator.

    ``anchors``/``coeffs`` hold the kernel expansion (coeffs row i belongs to
    anchor row i).  ``t`` is the index of the next measurement to process,
    starting at 1.  Snapshots may be evaluated concurrently; stepping is
    strictly sequential.
    """

    kernel: object
    lam: float
    mu: float
    loss: str
    mode: str  # "shared" or "distinct"
    anchors: np.ndarray
    coeffs: np.ndarray
    t: int = 1
    truncation: int | None = None

    def __post_init__(self):
        if self.lam <= 0 or self.mu <= 0:
            raise ValueError("lam and mu must be positive")
        if self.mu * self.lam >= 1.0:
            raise ValueError("need mu * lam < 1 for the shrinkage factor to contract")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss: {self.loss!r}")
        if self.mode not in ("shared", "distinct"):
            raise ValueError(f"unknown mode: {self.mode!r}")
        if self.truncation is not None and self.truncation < 1:
            raise ValueError("truncation window must be >= 1")


def make_shared_state(kernel, anchors, lam: float, mu: float,
                      loss: str = "l1eps") -> OnlineState:
    """Online state over a fixed sensor roster (one coefficient per sensor)."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    coeffs = np.zeros((anchors.shape[0], kernel.num_channels))
    return OnlineState(kernel, lam, mu, loss, "shared", anchors, coeffs)


def make_distinct_state(kernel, dim: int, lam: float, mu: float,
                        loss: str = "l1eps", truncation: int | None = None) -> OnlineState:
    """Online state that appends one coefficient per processed measurement."""
    anchors = np.zeros((0, dim))
    coeffs = np.zeros((0, kernel.num_channels))
    return OnlineState(kernel, lam, mu, loss, "distinct", anchors, coeffs,
                       truncation=truncation)


def predict(state: OnlineState, x) -> np.ndarray:
    """Current estimate w(x), a length-M gain vector."""
    if state.anchors.shape[0] == 0:
        return np.zeros(state.kernel.num_channels)
    return state.kernel.apply(np.atleast_2d(np.asarray(x, dtype=float)),
                              state.anchors, state.coeffs)[0]


def _anchor_row(state: OnlineState, location: np.ndarray) -> int:
    matches = np.where((state.anchors == location[None, :]).all(axis=1))[0]
    if matches.size == 0:
        raise ValueError(
            "measurement location is not on the shared anchor roster; "
            "use distinct mode for free-floating locations"
        )
    return int(matches[0])


def step(state: OnlineState, record: MeasurementRecord) -> OnlineState:
    """Process one measurement and return the updated state.

    The learning rate decays as mu / sqrt(t); all stored coefficients shrink
    by (1 - 2 mu_t lam) and the subgradient term enters at the measurement's
    location (merged for shared mode, appended for distinct mode).
    """
    if record.num_channels != state.kernel.num_channels:
        raise ValueError("record channel count does not match the kernel")
    mu_t = state.mu / math.sqrt(state.t)
    e = record.y - float(record.phi @ predict(state, record.location))
    g = loss_subgradient(state.loss, e, record.eps)
    shrink = 1.0 - 2.0 * mu_t * state.lam
    if state.mode == "shared":
        row = _anchor_row(state, record.location)
        coeffs = shrink * state.coeffs
        coeffs[row] += mu_t * g * record.phi
        return replace(state, coeffs=coeffs, t=state.t + 1)
    anchors = state.anchors
    coeffs = shrink * state.coeffs
    if g != 0.0:
        anchors = np.vstack([anchors, record.location[None, :]]) if anchors.size else \
            record.location[None, :].copy()
        coeffs = np.vstack([coeffs, (mu_t * g) * record.phi[None, :]])
    if state.truncation is not None and coeffs.shape[0] > state.truncation:
        drop = coeffs.shape[0] - state.truncation
        anchors = anchors[drop:]
        coeffs = coeffs[drop:]
    return replace(state, anchors=anchors, coeffs=coeffs, t=state.t + 1)


def rkhs_norm_sq(state: OnlineState) -> float:
    """||w||^2 in the kernel's function space, via the reproducing property."""
    if state.anchors.shape[0] == 0:
        return 0.0
    gram = assemble_kernel(state.kernel, state.anchors)
    if gram.scalar is not None:
        return float(np.sum(state.coeffs * (gram.scalar @ state.coeffs)))
    c = state.coeffs.ravel()
    return float(c @ gram.dense @ c)


def instantaneous_cost(state: OnlineState, record: MeasurementRecord) -> float:
    """Regularized per-measurement cost L(y - phi' w(x)) + lam ||w||^2."""
    e = record.y - float(record.phi @ predict(state, record.location))
    return loss_value(state.loss, e, record.eps) + state.lam * rkhs_norm_sq(state)


@dataclass
class RegretLedger:
    """Running sums and envelope constants for the online/batch comparison.

    ``lam_bar_sq`` tracks the largest eigenvalue of K(x, x) seen on the
    stream and ``phi_bar`` the largest filter-weight norm; both enter the
    envelope constants

        a2 = lam_bar_sq * phi_bar^2 / (8 lam^2 mu),
        a1 = 4 (lam_bar_sq * phi_bar^2 * mu + a2).
    """

    lam: float
    mu: float
    lam_bar_sq: float = 0.0
    phi_bar: float = 0.0
    cost_sum: float = 0.0
    comparator_sum: float = 0.0
    steps: int = field(default=0)

    def observe(self, cost: float, phi_norm: float, diag_eig: float) -> None:
        self.cost_sum += cost
        self.steps += 1
        self.phi_bar = max(self.phi_bar, float(phi_norm))
        self.lam_bar_sq = max(self.lam_bar_sq, float(diag_eig))

    @property
    def a2(self) -> float:
        return self.lam_bar_sq * self.phi_bar ** 2 / (8.0 * self.lam ** 2 * self.mu)

    @property
    def a1(self) -> float:
        return 4.0 * (self.lam_bar_sq * self.phi_bar ** 2 * self.mu + self.a2)

    @property
    def norm_bound(self) -> float:
        """Induction bound U = lam_bar * phi_bar / (2 lam) on ||w_t||."""
        return math.sqrt(self.lam_bar_sq) * self.phi_bar / (2.0 * self.lam)

    def envelope(self, t: int) -> float:
        return regret_envelope(self, t)

    def average_cost(self) -> float:
        return self.cost_sum / self.steps if self.steps else 0.0


def regret_envelope(ledger: RegretLedger, t: int) -> float:
    """Excess-cost envelope a1/sqrt(T) + a2/T after T steps."""
    if t <= 0:
        raise ValueError("the envelope is defined for T >= 1")
    return ledger.a1 / math.sqrt(t) + ledger.a2 / t


def suggested_truncation(mu: float, lam: float, horizon: int,
                         rel_weight: float = 1e-6) -> int | None:
    """Smallest window so that dropped coefficients have shrunk below
    ``rel_weight`` by the end of a run of length ``horizon``.

    Shrinkage per step is (1 - 2 lam mu / sqrt(t)); the cumulative factor
    over the window is estimated by the integral of the step rates.  Returns
    None (keep everything) when no window shorter than the horizon achieves
    the target, which is the common case for very small ``lam``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    need = -math.log(rel_weight)
    # product of (1 - 2 mu lam / sqrt(j)) over j in (t-i, t] is about
    # exp(-4 mu lam (sqrt(t) - sqrt(t-i))); worst case is t = horizon.
    root_t = math.sqrt(horizon)
    deficit = need / (4.0 * mu * lam) if mu * lam > 0 else float("inf")
    if deficit >= root_t:
        return None
    window = horizon - (root_t - deficit) ** 2
    return max(1, math.ceil(window))
