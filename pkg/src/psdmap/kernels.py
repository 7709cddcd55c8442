"""Matrix-valued reproducing kernels and parametric basis functions.

Kernels map a pair of locations to an M x M block; the block matrix over N
anchor locations has shape MN x MN.  Two families are separable, meaning the
block matrix factors as ``kron(scalar_gram, I_M)``: the thin-plate family and
explicitly scalar kernels.  Separability is what the fast assembly path in
:mod:`psdmap.batch` exploits.

Thin-plate convention
---------------------
The radial profile :func:`tps_radial` is applied to the Euclidean *distance*
between locations, which is the classical thin-plate/polyharmonic convention.
Some texts write the argument as a squared distance; that variant is not
conditionally positive definite with respect to the affine basis (an explicit
counterexample exists on four collinear points), so it is not used here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "tps_radial",
    "DiagonalGaussianKernel",
    "ThinPlateKernel",
    "ScalarSeparableKernel",
    "scalar_gaussian_kernel",
    "KernelMatrix",
    "kernel_block",
    "assemble_kernel",
    "TpsPolynomialBasis",
    "TransmitterPathlossBasis",
    "assemble_basis_matrix",
    "projector",
    "cpd_check",
    "has_psd_cholesky",
    "kernel_from_config",
    "basis_from_config",
]


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``a`` (n, d) and ``b`` (n2, d)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def tps_radial(z, s: int, d: int):
    """Polyharmonic radial profile ``z**(2s-d) * log(z)`` (even d) or ``z**(2s-d)``.

    ``z`` is a nonnegative scalar or array.  At ``z = 0`` the even-dimension
    branch returns 0, the continuous extension of ``z**k * log(z)``.
    """
    if s < 1 or int(s) != s:
        raise ValueError(f"smoothness order must be a positive integer, got {s}")
    if d < 1 or int(d) != d:
        raise ValueError(f"dimension must be a positive integer, got {d}")
    if 2 * s - d <= 0:
        raise ValueError(f"need 2*s - d > 0, got s={s}, d={d}")
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("radial argument must be nonnegative")
    power = z ** (2 * s - d)
    if d % 2 == 0:
        out = np.where(z > 0, power * np.log(np.where(z > 0, z, 1.0)), 0.0)
    else:
        out = power
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DiagonalGaussianKernel:
    """Diagonal kernel with per-channel Gaussian entries exp(-||x-x'||^2 / w_m)."""

    widths: np.ndarray  # per-channel squared widths, length M, all > 0

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.widths, dtype=float))
        if np.any(w <= 0):
            raise ValueError("Gaussian widths must be positive")
        object.__setattr__(self, "widths", w)

    @property
    def num_channels(self) -> int:
        return self.widths.size

    is_separable = False

    def block(self, x, x2) -> np.ndarray:
        sq = float(pairwise_sq_dists(np.atleast_2d(x), np.atleast_2d(x2))[0, 0])
        return np.diag(np.exp(-sq / self.widths))

    def apply(self, points, anchors, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate sum_n K(x, x_n) c_n at each row of ``points``; coeffs is (N, M)."""
        sq = pairwise_sq_dists(points, anchors)
        out = np.empty((sq.shape[0], self.num_channels))
        for m, w in enumerate(self.widths):
            out[:, m] = np.exp(-sq / w) @ coeffs[:, m]
        return out

    def diag_block_max_eigenvalue(self) -> float:
        return 1.0  # exp(0) on the diagonal

    def describe(self) -> dict:
        return {"type": "diagonal_gaussian", "widths": [float(w) for w in self.widths]}


@dataclass(frozen=True)
class ThinPlateKernel:
    """Thin-plate kernel ``r(||x - x'||) I_M`` with r from :func:`tps_radial`.

    Conditionally positive definite with respect to the affine polynomial
    basis for order ``s = 2`` (the usual choice) in dimensions 1 to 3.
    """

    order: int
    dim: int
    num_channels: int

    def __post_init__(self):
        tps_radial(0.0, self.order, self.dim)  # validates order/dim
        if self.num_channels < 1:
            raise ValueError("num_channels must be >= 1")

    is_separable = True

    def scalar(self, a, b) -> np.ndarray:
        d = np.sqrt(pairwise_sq_dists(a, b))
        return tps_radial(d, self.order, self.dim)

    def block(self, x, x2) -> np.ndarray:
        r = float(self.scalar(np.atleast_2d(x), np.atleast_2d(x2))[0, 0])
        return r * np.eye(self.num_channels)

    def apply(self, points, anchors, coeffs: np.ndarray) -> np.ndarray:
        return self.scalar(points, anchors) @ coeffs

    def diag_block_max_eigenvalue(self) -> float:
        return 0.0  # r(0) = 0

    def describe(self) -> dict:
        return {
            "type": "thin_plate",
            "order": int(self.order),
            "dim": int(self.dim),
            "num_channels": int(self.num_channels),
        }


@dataclass(frozen=True)
class ScalarSeparableKernel:
    """Kernel ``k(x, x') I_M`` built from a scalar kernel function.

    ``scalar_fn`` takes two stacked coordinate arrays of shapes (n, d) and
    (n2, d) and returns the (n, n2) scalar Gram matrix.
    """

    scalar_fn: object
    num_channels: int
    name: str | None = None
    params: tuple = ()

    is_separable = True

    def scalar(self, a, b) -> np.ndarray:
        return np.asarray(self.scalar_fn(np.atleast_2d(a), np.atleast_2d(b)), dtype=float)

    def block(self, x, x2) -> np.ndarray:
        r = float(self.scalar(np.atleast_2d(x), np.atleast_2d(x2))[0, 0])
        return r * np.eye(self.num_channels)

    def apply(self, points, anchors, coeffs: np.ndarray) -> np.ndarray:
        return self.scalar(points, anchors) @ coeffs

    def diag_block_max_eigenvalue(self) -> float:
        probe = np.zeros((1, 1))
        return float(self.scalar(probe, probe)[0, 0])

    def describe(self) -> dict:
        if self.name == "scalar_gaussian":
            return {
                "type": "scalar_gaussian",
                "width": float(self.params[0]),
                "num_channels": int(self.num_channels),
            }
        raise TypeError("only named scalar kernels can be serialized")


def scalar_gaussian_kernel(width: float, num_channels: int) -> ScalarSeparableKernel:
    """Gaussian scalar kernel exp(-||x-x'||^2 / width) shared by all channels."""
    if width <= 0:
        raise ValueError("width must be positive")

    def fn(a, b, _w=float(width)):
        return np.exp(-pairwise_sq_dists(a, b) / _w)

    return ScalarSeparableKernel(fn, num_channels, name="scalar_gaussian", params=(float(width),))


@dataclass(frozen=True)
class KernelMatrix:
    """Block kernel matrix over a fixed anchor set.

    Stores either the dense MN x MN matrix or, for separable kernels, the
    N x N scalar Gram factor.  ``full()`` always yields the dense form.
    """

    anchors: np.ndarray
    num_channels: int
    dense: np.ndarray | None = None
    scalar: np.ndarray | None = None

    def full(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        return np.kron(self.scalar, np.eye(self.num_channels))

    @property
    def num_anchors(self) -> int:
        return self.anchors.shape[0]


def kernel_block(kernel, x, x2) -> np.ndarray:
    """The M x M kernel block K(x, x2)."""
    return kernel.block(x, x2)


def assemble_kernel(kernel, anchors) -> KernelMatrix:
    """Assemble the block kernel matrix over the given anchor locations."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    n = anchors.shape[0]
    if n < 1:
        raise ValueError("need at least one anchor")
    m = kernel.num_channels
    if kernel.is_separable:
        return KernelMatrix(anchors, m, scalar=kernel.scalar(anchors, anchors))
    dense = np.zeros((n * m, n * m))
    if isinstance(kernel, DiagonalGaussianKernel):
        sq = pairwise_sq_dists(anchors, anchors)
        for ch, w in enumerate(kernel.widths):
            dense[ch::m, ch::m] = np.exp(-sq / w)
    else:
        for i in range(n):
            for j in range(i, n):
                blk = kernel.block(anchors[i], anchors[j])
                dense[i * m:(i + 1) * m, j * m:(j + 1) * m] = blk
                dense[j * m:(j + 1) * m, i * m:(i + 1) * m] = blk.T
    return KernelMatrix(anchors, m, dense=dense)


@dataclass(frozen=True)
class TpsPolynomialBasis:
    """Affine polynomial basis: B_1 = I_M, B_{1+j}(x) = x_j I_M for j = 1..d."""

    dim: int
    num_channels: int

    is_separable = True

    @property
    def num_functions(self) -> int:
        return 1 + self.dim

    def scalar_row(self, x) -> np.ndarray:
        return np.concatenate([[1.0], np.asarray(x, dtype=float)])

    def scalar_matrix(self, anchors) -> np.ndarray:
        anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        return np.hstack([np.ones((anchors.shape[0], 1)), anchors])

    def block(self, x) -> np.ndarray:
        eye = np.eye(self.num_channels)
        return np.hstack([c * eye for c in self.scalar_row(x)])

    def apply(self, points, theta: np.ndarray) -> np.ndarray:
        """Evaluate B(x) theta at each row of ``points``; theta has length N_B * M."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        t = theta.reshape(self.num_functions, self.num_channels)
        return self.scalar_matrix(points) @ t

    def describe(self) -> dict:
        return {
            "type": "tps_polynomial",
            "dim": int(self.dim),
            "num_channels": int(self.num_channels),
        }


@dataclass(frozen=True)
class TransmitterPathlossBasis:
    """Single diagonal basis block with pathloss profiles toward known transmitters.

    Entry (m, m) of B_1(x) is ``1 / (delta + ||x - tx_m||**gamma)`` for the
    M-1 transmitter channels and 0 for the noise channel, so the fitted
    parametric coefficients are proportional to transmit powers when the
    profile matches the propagation environment.
    """

    tx_locations: np.ndarray  # (M-1, d)
    gamma: float
    delta: float
    num_channels: int

    def __post_init__(self):
        tx = np.atleast_2d(np.asarray(self.tx_locations, dtype=float))
        object.__setattr__(self, "tx_locations", tx)
        if self.delta <= 0:
            raise ValueError("pathloss offset delta must be positive")
        if tx.shape[0] != self.num_channels - 1:
            raise ValueError(
                f"expected {self.num_channels - 1} transmitter locations, got {tx.shape[0]}"
            )

    is_separable = False

    @property
    def num_functions(self) -> int:
        return 1

    def profile(self, points) -> np.ndarray:
        """Per-channel diagonal entries at each point, shape (npts, M)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        dist = np.sqrt(pairwise_sq_dists(points, self.tx_locations))
        vals = 1.0 / (self.delta + dist ** self.gamma)
        return np.hstack([vals, np.zeros((points.shape[0], 1))])

    def block(self, x) -> np.ndarray:
        return np.diag(self.profile(np.atleast_2d(x))[0])

    def apply(self, points, theta: np.ndarray) -> np.ndarray:
        return self.profile(points) * theta[None, :]

    def describe(self) -> dict:
        return {
            "type": "transmitter_pathloss",
            "tx_locations": [[float(v) for v in row] for row in self.tx_locations],
            "gamma": float(self.gamma),
            "delta": float(self.delta),
            "num_channels": int(self.num_channels),
        }


def assemble_basis_matrix(basis, anchors, num_channels: int | None = None) -> np.ndarray:
    """Stack basis blocks B_nu(x_n) into the NM x (N_B * M) design matrix.

    With ``basis=None`` an empty matrix with zero columns is returned, in
    which case ``num_channels`` must be supplied.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    n = anchors.shape[0]
    if basis is None:
        if num_channels is None:
            raise ValueError("num_channels is required when basis is None")
        return np.zeros((n * num_channels, 0))
    return np.vstack([basis.block(x) for x in anchors])


def projector(basis_matrix: np.ndarray, name: str = "basis", cond_limit: float = 1e12) -> np.ndarray:
    """Orthogonal projector onto the null space of B^T: P = I - B (B^T B)^-1 B^T."""
    b = np.asarray(basis_matrix, dtype=float)
    n = b.shape[0]
    if b.shape[1] == 0:
        return np.eye(n)
    gram = b.T @ b
    if np.linalg.cond(gram) > cond_limit:
        raise ValueError(
            f"the {name} matrix is rank deficient (condition number of B^T B exceeds {cond_limit:g})"
        )
    return np.eye(n) - b @ np.linalg.solve(gram, b.T)


def cpd_check(kernel, basis, anchors, trials: int = 100, rng=None, tol: float = 1e-9) -> bool:
    """Empirically test conditional positive definiteness of a kernel.

    Samples random coefficient vectors, projects them onto the null space of
    the basis design matrix, and checks the kernel quadratic form stays above
    ``-tol`` (scaled by the kernel magnitude).  Returns True when every trial
    passes.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    m = kernel.num_channels
    kmat = assemble_kernel(kernel, anchors).full()
    bmat = assemble_basis_matrix(basis, anchors, num_channels=m)
    proj = projector(bmat)
    scale = max(1.0, float(np.abs(kmat).max()))
    for _ in range(trials):
        c = proj @ rng.standard_normal(kmat.shape[0])
        norm = np.linalg.norm(c)
        if norm > 0:
            c = c / norm
        if c @ kmat @ c < -tol * scale:
            return False
    return True


def has_psd_cholesky(mat: np.ndarray, jitter_scale: float = 1e-10) -> bool:
    """Positive semidefiniteness test: Cholesky after adding trace-scaled jitter."""
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    jitter = jitter_scale * max(np.trace(mat), 1e-30) / n
    try:
        np.linalg.cholesky(mat + jitter * np.eye(n))
        return True
    except np.linalg.LinAlgError:
        return False


def kernel_from_config(cfg: dict):
    """Build a kernel from its flat description (inverse of ``describe()``)."""
    kind = cfg.get("type")
    if kind == "diagonal_gaussian":
        return DiagonalGaussianKernel(np.asarray(cfg["widths"], dtype=float))
    if kind == "thin_plate":
        return ThinPlateKernel(int(cfg["order"]), int(cfg["dim"]), int(cfg["num_channels"]))
    if kind == "scalar_gaussian":
        return scalar_gaussian_kernel(float(cfg["width"]), int(cfg["num_channels"]))
    raise ValueError(f"unknown kernel type: {kind!r}")


def basis_from_config(cfg: dict | None):
    """Build a parametric basis from its flat description; None passes through."""
    if cfg is None:
        return None
    kind = cfg.get("type")
    if kind == "tps_polynomial":
        return TpsPolynomialBasis(int(cfg["dim"]), int(cfg["num_channels"]))
    if kind == "transmitter_pathloss":
        return TransmitterPathlossBasis(
            np.asarray(cfg["tx_locations"], dtype=float),
            float(cfg["gamma"]),
            float(cfg["delta"]),
            int(cfg["num_channels"]),
        )
    raise ValueError(f"unknown basis type: {kind!r}")
