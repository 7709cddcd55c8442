"""Synthetic scenario generation: transmitters, correlated shadowing, sensor
deployment, random filter weights, measurement noise and quantization.

Ground-truth gains follow a pathloss-plus-shadowing model,

    l_m(x) = A_m * (delta + ||x - tx_m||)**(-gamma) * 10**(s_m(x)/10),

with the last channel a constant noise floor.  The shadowing fields s_m are
independent zero-mean Gaussians with covariance ``var * corr**dist`` (the
classical exponentially decaying model; note the decay: correlation falls
with distance).  Shadowing is jointly sampled on a fixed point set (sensors
plus any evaluation grid), which is the only place the field is evaluable.

Randomness is organized as named counter-based streams (Philox) derived from
one scenario seed, so that sweeps can vary a single factor while keeping
every other draw identical.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import MeasurementRecord
from .quantize import QuantizerSpec, calibrate_cpq, calibrate_uniform, interval_of, quantize

__all__ = [
    "stream",
    "derive_seed",
    "ScenarioConfig",
    "GroundTruthField",
    "SimulatedScenario",
    "sample_shadowing",
    "gain_field",
    "calibration_values",
    "calibrate_quantizer",
    "synthesize_measurements",
    "simulate_scenario",
    "calibrate_noise_for_error_rate",
]

# fixed identifiers of the independent randomness sources
_STREAM_IDS = {
    "shadowing": 0,
    "sensors": 1,
    "phi": 2,
    "noise": 3,
    "calibration": 4,
    "eval": 5,
    "schedule": 6,
}


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Named, documented random stream: Philox keyed by (seed, source, indices)."""
    if name not in _STREAM_IDS:
        raise ValueError(f"unknown stream name: {name!r}; known: {sorted(_STREAM_IDS)}")
    key = (_STREAM_IDS[name],) + tuple(int(i) for i in indices)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *indices: int) -> int:
    """A child seed for per-run pairing in Monte Carlo sweeps."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(999,) + tuple(int(i) for i in indices))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ScenarioConfig:
    """Full generative description of a synthetic experiment."""

    dim: int
    region: np.ndarray              # (dim, 2) lower/upper bounds
    tx_power: np.ndarray            # (M-1,) linear transmit powers
    tx_locations: np.ndarray        # (M-1, dim)
    noise_power: float = 0.75
    gamma: float = 3.0
    delta: float = 1e-2
    shadowing_var: float = 0.0      # dB^2
    shadowing_corr: float = 0.8
    num_sensors: int = 20
    meas_per_sensor: int = 1
    noise_var: float = 0.0          # measurement-noise variance (power units^2)
    quantizer_bits: int = 5
    quantizer_kind: str = "uniform"
    clip_prob: float = 1e-3
    calibration_samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "region", np.asarray(self.region, dtype=float).reshape(self.dim, 2))
        object.__setattr__(self, "tx_power", np.asarray(self.tx_power, dtype=float))
        object.__setattr__(self, "tx_locations",
                           np.asarray(self.tx_locations, dtype=float).reshape(-1, self.dim))
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if np.any(self.region[:, 1] <= self.region[:, 0]):
            raise ValueError("region upper bounds must exceed lower bounds")
        if np.any(self.tx_power <= 0):
            raise ValueError("transmit powers must be positive")
        if self.tx_locations.shape[0] != self.tx_power.size:
            raise ValueError("one location per transmitter is required")
        if self.noise_power <= 0 or self.delta <= 0:
            raise ValueError("noise_power and delta must be positive")
        if not 0.0 < self.shadowing_corr < 1.0:
            raise ValueError("shadowing correlation base must lie in (0, 1)")
        if self.shadowing_var < 0 or self.noise_var < 0:
            raise ValueError("variances must be nonnegative")
        if self.num_sensors < 1 or self.meas_per_sensor < 1:
            raise ValueError("need at least one sensor and one measurement per sensor")
        if self.quantizer_kind not in ("uniform", "cpq"):
            raise ValueError("quantizer kind must be 'uniform' or 'cpq'")

    @property
    def num_channels(self) -> int:
        return self.tx_power.size + 1

    def uniform_points(self, rng: np.random.Generator, count: int) -> np.ndarray:
        lo, hi = self.region[:, 0], self.region[:, 1]
        return lo + (hi - lo) * rng.random((count, self.dim))


@dataclass(frozen=True)
class GroundTruthField:
    """Pathloss-plus-shadowing gains, evaluable on its fixed point set."""

    tx_power: np.ndarray
    tx_locations: np.ndarray
    noise_power: float
    gamma: float
    delta: float
    points: np.ndarray        # (npts, dim)
    shadow_db: np.ndarray     # (M-1, npts)

    def values(self, indices=None) -> np.ndarray:
        """Gain vectors (rows) at the selected points of the fixed set."""
        pts = self.points if indices is None else self.points[indices]
        shadow = self.shadow_db if indices is None else self.shadow_db[:, indices]
        diff = pts[:, None, :] - self.tx_locations[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        base = self.tx_power[None, :] * (self.delta + dist) ** (-self.gamma)
        gains = base * 10.0 ** (shadow.T / 10.0)
        floor = np.full((pts.shape[0], 1), self.noise_power)
        return np.hstack([gains, floor])

    @property
    def num_channels(self) -> int:
        return self.tx_power.size + 1


def sample_shadowing(points, sigma_s2: float, rho: float, rng: np.random.Generator,
                     n_fields: int = 1) -> np.ndarray:
    """Joint Gaussian shadowing draw on ``points`` with covariance
    ``sigma_s2 * rho**dist``; one independent field per row of the output."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    npts = points.shape[0]
    if sigma_s2 < 0:
        raise ValueError("shadowing variance must be nonnegative")
    if not 0.0 < rho < 1.0:
        raise ValueError("correlation base must lie in (0, 1)")
    if sigma_s2 == 0.0:
        return np.zeros((n_fields, npts))
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    cov = sigma_s2 * rho ** dist
    jitter = 1e-10 * np.trace(cov) / npts
    chol = None
    for _ in range(6):
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(npts))
            break
        except np.linalg.LinAlgError:
            jitter *= 100.0
    if chol is None:
        raise np.linalg.LinAlgError("shadowing covariance could not be factorized")
    return rng.standard_normal((n_fields, npts)) @ chol.T


def gain_field(config: ScenarioConfig, points, shadow_db) -> GroundTruthField:
    """Bundle transmitter parameters with a sampled shadowing realization."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    shadow_db = np.asarray(shadow_db, dtype=float)
    if shadow_db.shape != (config.tx_power.size, points.shape[0]):
        raise ValueError("shadowing array must be (M-1, npts)")
    return GroundTruthField(config.tx_power, config.tx_locations, config.noise_power,
                            config.gamma, config.delta, points, shadow_db)


def calibration_values(config: ScenarioConfig, rng: np.random.Generator,
                       count: int) -> np.ndarray:
    """Monte Carlo draws of |phi' l(x) + eta| over the scenario.

    Each draw uses an independent location, filter weight and noise sample.
    Only the single-point marginal of the shadowing enters the distribution
    of one power value, so shadowing is drawn i.i.d. N(0, var) per channel;
    this is exact and avoids factorizing huge joint covariances.
    """
    x = config.uniform_points(rng, count)
    diff = x[:, None, :] - config.tx_locations[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    base = config.tx_power[None, :] * (config.delta + dist) ** (-config.gamma)
    if config.shadowing_var > 0:
        shadow = np.sqrt(config.shadowing_var) * rng.standard_normal(dist.shape)
        base = base * 10.0 ** (shadow / 10.0)
    gains = np.hstack([base, np.full((count, 1), config.noise_power)])
    phi = rng.random((count, config.num_channels))
    power = np.einsum("ij,ij->i", phi, gains)
    if config.noise_var > 0:
        power = power + np.sqrt(config.noise_var) * rng.standard_normal(count)
    return np.abs(power)


def calibrate_quantizer(config: ScenarioConfig, rng: np.random.Generator | None = None
                        ) -> QuantizerSpec:
    """Calibrate the configured quantizer from seeded scenario Monte Carlo."""
    if rng is None:
        rng = stream(config.seed, "calibration")
    samples = calibration_values(config, rng, config.calibration_samples)
    if config.quantizer_kind == "uniform":
        return calibrate_uniform(samples, config.quantizer_bits, config.clip_prob)
    return calibrate_cpq(samples, config.quantizer_bits)


def synthesize_measurements(config: ScenarioConfig, field: GroundTruthField,
                            sensor_indices, spec: QuantizerSpec,
                            rng_phi: np.random.Generator,
                            rng_noise: np.random.Generator):
    """Quantized measurement records at the field's sensor points.

    Filter-weight entries are i.i.d. uniform on [0, 1]; measurement noise is
    drawn as sigma * standard normal so that scenarios differing only in the
    noise variance share the same underlying draws (paired comparisons).
    Returns (records, number clipped, number of measurement errors).
    """
    gains = field.values(sensor_indices)
    m = config.num_channels
    sigma = float(np.sqrt(config.noise_var))
    records = []
    clipped = 0
    errors = 0
    for n, point_idx in enumerate(sensor_indices):
        loc = field.points[point_idx]
        for _ in range(config.meas_per_sensor):
            phi = rng_phi.random(m)
            exact = float(phi @ gains[n])
            noisy = abs(exact + sigma * float(rng_noise.standard_normal()))
            cell = quantize(spec, noisy)
            if noisy >= spec.boundaries[-1] or noisy < spec.boundaries[0]:
                clipped += 1
            if cell != quantize(spec, exact):
                errors += 1
            y, eps = interval_of(spec, cell)
            records.append(MeasurementRecord(n, loc, phi, y, eps, raw=noisy))
    return records, clipped, errors


@dataclass(frozen=True)
class SimulatedScenario:
    """One realized experiment: field, records, quantizer and point bookkeeping."""

    config: ScenarioConfig
    field: GroundTruthField
    quantizer: QuantizerSpec
    records: list
    sensor_indices: np.ndarray
    eval_indices: np.ndarray
    clipped: int = 0
    errors: int = 0

    @property
    def sensors(self) -> np.ndarray:
        return self.field.points[self.sensor_indices]

    @property
    def clip_rate(self) -> float:
        return self.clipped / max(1, len(self.records))

    @property
    def error_rate(self) -> float:
        return self.errors / max(1, len(self.records))


def simulate_scenario(config: ScenarioConfig, n_eval: int = 0) -> SimulatedScenario:
    """Deterministic end-to-end realization of one scenario.

    Sensors and evaluation points are drawn uniformly over the region,
    shadowing is sampled jointly on their union, the quantizer is calibrated
    from scenario Monte Carlo, and each sensor reports its quantized
    measurements.
    """
    sensors = config.uniform_points(stream(config.seed, "sensors"), config.num_sensors)
    points = sensors
    if n_eval > 0:
        eval_points = config.uniform_points(stream(config.seed, "eval"), n_eval)
        points = np.vstack([sensors, eval_points])
    shadow = sample_shadowing(points, config.shadowing_var, config.shadowing_corr,
                              stream(config.seed, "shadowing"), config.tx_power.size)
    field = gain_field(config, points, shadow)
    spec = calibrate_quantizer(config)
    sensor_indices = np.arange(config.num_sensors)
    eval_indices = np.arange(config.num_sensors, points.shape[0])
    records, clipped, errors = synthesize_measurements(
        config, field, sensor_indices, spec,
        stream(config.seed, "phi"), stream(config.seed, "noise"))
    return SimulatedScenario(config, field, spec, records, sensor_indices,
                             eval_indices, clipped, errors)


def _error_rate(config: ScenarioConfig, sigma: float, rng_draws, spec: QuantizerSpec) -> float:
    """Fraction of Monte Carlo measurements whose cell changes under noise."""
    exact, eta = rng_draws
    noisy = np.abs(exact + sigma * eta)
    cells_noisy = np.searchsorted(spec.boundaries, noisy, side="right") - 1
    cells_exact = np.searchsorted(spec.boundaries, exact, side="right") - 1
    r = spec.num_cells
    return float(np.mean(np.clip(cells_noisy, 0, r - 1) != np.clip(cells_exact, 0, r - 1)))


def calibrate_noise_for_error_rate(config: ScenarioConfig, target: float,
                                   samples: int = 20_000, tol: float = 5e-3,
                                   max_iter: int = 60) -> float:
    """Bisection on the noise standard deviation until the measurement-error
    rate Pr{Q(|power + noise|) != Q(power)} meets ``target``.

    Uses common random numbers across candidate sigmas, with the quantizer
    recalibrated (at the candidate noise level) in each evaluation so the
    returned level is self-consistent with its quantizer.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("target rate must lie strictly between 0 and 1")
    base = replace(config, noise_var=0.0)
    rng = stream(config.seed, "calibration", 1)
    exact = calibration_values(base, rng, samples)
    eta = rng.standard_normal(samples)

    def rate(sigma: float) -> float:
        spec = calibrate_quantizer(replace(config, noise_var=sigma * sigma))
        return _error_rate(config, sigma, (exact, eta), spec)

    lo, hi = 0.0, max(1e-6, float(np.median(exact)))
    for _ in range(40):
        if rate(hi) >= target:
            break
        hi *= 2.0
    else:
        raise ValueError("could not bracket the target measurement-error rate")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - target) <= tol:
            return mid
        if r < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
