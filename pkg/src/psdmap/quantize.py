"""Scalar power quantizers and interval recovery.

A quantizer is a strictly increasing boundary list ``tau_0 < ... < tau_R``
with half-open cells ``[tau_i, tau_{i+1})``.  Values below ``tau_0`` fall in
cell 0 and values at or above ``tau_R`` clip into the top cell.  Cell ``i``
dequantizes to the interval centroid ``y = (tau_i + tau_{i+1}) / 2`` with
half-width ``eps = (tau_{i+1} - tau_i) / 2``, which is all the estimators
ever see.

Both calibrators anchor ``tau_0 = 0`` because measured powers are
nonnegative.  Uniform quantization (UQ) uses equal steps with the top
boundary placed at an empirical quantile so that clipping happens with a
prescribed small probability; constant-probability quantization (CPQ) places
the boundaries at empirical quantiles so that every cell is (approximately)
equally likely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import MeasurementRecord

__all__ = [
    "QuantizerSpec",
    "quantize",
    "interval_of",
    "calibrate_uniform",
    "calibrate_cpq",
    "virtual_records",
]

MIN_CALIBRATION_SAMPLES = 100


@dataclass(frozen=True)
class QuantizerSpec:
    """Quantization cell boundaries plus the scheme that produced them."""

    boundaries: np.ndarray
    kind: str  # "uniform" or "cpq"

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        object.__setattr__(self, "boundaries", b)
        if b.ndim != 1 or b.size < 3:
            raise ValueError("need at least two cells (three boundaries)")
        if np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must be strictly increasing")
        if self.kind not in ("uniform", "cpq"):
            raise ValueError(f"unknown quantizer kind: {self.kind!r}")
        if self.kind == "uniform":
            steps = np.diff(b)
            if np.any(np.abs(steps - steps[0]) > 1e-12 * max(1.0, abs(b[-1]))):
                raise ValueError("uniform quantizer must have constant step")

    @property
    def num_cells(self) -> int:
        return self.boundaries.size - 1

    @property
    def bits(self) -> int:
        return math.ceil(math.log2(self.num_cells))

    @property
    def full_range(self) -> tuple[float, float]:
        return float(self.boundaries[0]), float(self.boundaries[-1])


def quantize(spec: QuantizerSpec, v: float) -> int:
    """Cell index of ``v``: the i with tau_i <= v < tau_{i+1}, clipped to [0, R-1]."""
    idx = int(np.searchsorted(spec.boundaries, v, side="right")) - 1
    return min(max(idx, 0), spec.num_cells - 1)


def interval_of(spec: QuantizerSpec, index: int) -> tuple[float, float]:
    """Centroid and half-width (y, eps) of quantization cell ``index``."""
    if not 0 <= index < spec.num_cells:
        raise ValueError(f"cell index {index} out of range [0, {spec.num_cells})")
    lo = float(spec.boundaries[index])
    hi = float(spec.boundaries[index + 1])
    return (hi + lo) / 2.0, (hi - lo) / 2.0


def _check_samples(samples) -> np.ndarray:
    v = np.asarray(samples, dtype=float).ravel()
    if v.size < MIN_CALIBRATION_SAMPLES:
        raise ValueError(
            f"calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {v.size}"
        )
    if not np.all(np.isfinite(v)):
        raise ValueError("calibration samples must be finite")
    return v


def calibrate_uniform(samples, bits: int, clip_prob: float) -> QuantizerSpec:
    """Equal-step quantizer over [0, q] with q the (1 - clip_prob) sample quantile."""
    v = _check_samples(samples)
    if not 0.0 < clip_prob < 1.0:
        raise ValueError("clip probability must lie strictly between 0 and 1")
    if bits < 1:
        raise ValueError("need at least one bit")
    top = float(np.quantile(v, 1.0 - clip_prob))
    if top <= 0.0:
        raise ValueError("degenerate sample range: top boundary would not be positive")
    cells = 2 ** bits
    return QuantizerSpec(np.linspace(0.0, top, cells + 1), "uniform")


def calibrate_cpq(samples, bits: int) -> QuantizerSpec:
    """Quantile-boundary quantizer giving each cell probability close to 1/R."""
    v = _check_samples(samples)
    if bits < 1:
        raise ValueError("need at least one bit")
    cells = 2 ** bits
    inner = np.quantile(v, np.arange(1, cells) / cells)
    top = float(v.max())
    boundaries = np.concatenate([[0.0], inner, [top]])
    if np.any(np.diff(boundaries) <= 0):
        raise ValueError(
            "degenerate sample range: repeated quantiles leave empty quantization cells"
        )
    return QuantizerSpec(boundaries, "cpq")


def virtual_records(locations, spec: QuantizerSpec, num_channels: int) -> list[MeasurementRecord]:
    """Nonnegativity-promoting records: one per location and channel.

    Each record pins a single channel gain (phi is a canonical basis vector)
    inside the full quantizer range, steering fits toward
    ``0 <= l_m(x_n) < tau_R`` without hard constraints.
    """
    locations = np.asarray(locations, dtype=float)
    if locations.size == 0:
        return []
    lo, hi = spec.full_range
    y = (lo + hi) / 2.0
    eps = (hi - lo) / 2.0
    eye = np.eye(num_channels)
    out = []
    for idx, loc in enumerate(np.atleast_2d(locations)):
        for m in range(num_channels):
            out.append(
                MeasurementRecord(
                    sensor_index=idx,
                    location=loc,
                    phi=eye[m],
                    y=y,
                    eps=eps,
                    raw=None,
                    is_virtual=True,
                )
            )
    return out
