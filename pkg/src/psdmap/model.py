"""Core domain types: locations, channel-gain vectors, filter weights and
quantized measurement records.

The measurement model is linear: a sensor at location ``x`` with filter
weight vector ``phi`` observes the ensemble power ``phi @ l(x)``, where
``l(x)`` stacks the per-channel gains and, as its last entry, the noise
floor.  Quantization turns the scalar power into interval data
``[y - eps, y + eps)`` carried by :class:`MeasurementRecord`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "as_location",
    "as_power_vector",
    "SpectralBasis",
    "MeasurementRecord",
    "evaluate_psd",
    "ensemble_power",
    "compute_phi",
]


def as_location(coords) -> np.ndarray:
    """Validate and return a spatial coordinate vector of dimension 1, 2 or 3."""
    x = np.atleast_1d(np.asarray(coords, dtype=float))
    if x.ndim != 1 or x.size not in (1, 2, 3):
        raise ValueError(f"location must be a 1-, 2- or 3-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("location has non-finite entries")
    return x


def as_power_vector(values) -> np.ndarray:
    """Validate a per-channel power (or filter-weight) vector of length M >= 1."""
    v = np.atleast_1d(np.asarray(values, dtype=float))
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"power vector must be 1-dimensional, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("power vector has non-finite entries")
    return v


@dataclass(frozen=True)
class SpectralBasis:
    """Piecewise-constant normalized spectral shapes on a shared frequency grid.

    ``edges`` gives the F+1 breakpoints of the grid and ``densities`` holds one
    row per channel (M rows), each a density over frequency that integrates to
    one.  The last row is reserved for the noise floor's spectral shape.

    Parameters
    ----------
    edges : array, shape (F+1,)
        Strictly increasing frequency breakpoints.
    densities : array, shape (M, F)
        Per-channel density values on each grid cell, in 1/Hz.
    """

    edges: np.ndarray
    densities: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        dens = np.atleast_2d(np.asarray(self.densities, dtype=float))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "densities", dens)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("frequency edges must be strictly increasing")
        if dens.shape[1] != edges.size - 1:
            raise ValueError("densities must have one column per grid cell")
        integrals = dens @ np.diff(edges)
        if np.any(np.abs(integrals - 1.0) > 1e-9):
            raise ValueError("each spectral density must integrate to 1 (tol 1e-9)")

    @property
    def num_channels(self) -> int:
        return self.densities.shape[0]

    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


@dataclass(frozen=True)
class MeasurementRecord:
    """One quantized power observation.

    ``y`` and ``eps`` are the centroid and half-width of the quantization
    interval containing the measured power, so the underlying raw value
    satisfies ``y - eps <= raw < y + eps`` whenever it was not clipped.
    Virtual records promote nonnegativity of the fitted gains; they carry a
    canonical-basis-vector ``phi`` and the full quantizer range as interval.
    """

    sensor_index: int
    location: np.ndarray
    phi: np.ndarray
    y: float
    eps: float
    raw: float | None = None
    is_virtual: bool = field(default=False)

    def __post_init__(self):
        object.__setattr__(self, "location", as_location(self.location))
        object.__setattr__(self, "phi", as_power_vector(self.phi))
        if not np.isfinite(self.y):
            raise ValueError("interval centroid must be finite")
        if not (self.eps >= 0.0):
            raise ValueError("interval half-width must be nonnegative")

    @property
    def num_channels(self) -> int:
        return self.phi.size


def evaluate_psd(basis: SpectralBasis, gains, f: float) -> float:
    """Evaluate the received PSD ``sum_m l_m * psi_m(f)`` at frequency ``f``.

    Frequencies outside the grid, and the right edge of the grid (cells are
    half-open), evaluate to zero.
    """
    l = as_power_vector(gains)
    if l.size != basis.num_channels:
        raise ValueError(
            f"gain vector length {l.size} does not match basis with M={basis.num_channels}"
        )
    edges = basis.edges
    if f < edges[0] or f >= edges[-1]:
        return 0.0
    cell = int(np.searchsorted(edges, f, side="right") - 1)
    return float(l @ basis.densities[:, cell])


def ensemble_power(phi, gains) -> float:
    """Filtered ensemble power ``phi @ l`` of a gain vector through a filter weight."""
    p = as_power_vector(phi)
    l = as_power_vector(gains)
    if p.size != l.size:
        raise ValueError(f"length mismatch: phi has {p.size} entries, gains {l.size}")
    return float(p @ l)


def compute_phi(basis: SpectralBasis, filter_response_sq) -> np.ndarray:
    """Filter weights ``phi_m = integral |G|^2 psi_m df`` on the basis grid.

    ``filter_response_sq`` is the squared magnitude response, piecewise
    constant on the same frequency grid as ``basis`` (one value per cell).
    """
    g2 = np.asarray(filter_response_sq, dtype=float)
    if g2.shape != (basis.edges.size - 1,):
        raise ValueError(
            "squared filter response must be piecewise constant on the basis grid "
            f"(expected {basis.edges.size - 1} cells, got shape {g2.shape})"
        )
    if np.any(g2 < 0):
        raise ValueError("squared filter response must be nonnegative")
    return basis.densities @ (g2 * basis.widths())
