"""Experiment evaluation: NMSE, Monte Carlo factor sweeps and online traces.

Sweeps use common random numbers: each Monte Carlo run draws one pool of
sensors, filter weights and noise variates sized for the largest grid cell,
and every cell reuses prefixes of that pool.  Comparisons across factors
(sensor count, bit depth, quantizer family, estimator, noise level) are then
paired per run, which is what the sign tests in the acceptance suite rely
on.  All results carry per-run samples alongside the aggregated statistics.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from itertools import product

import numpy as np

from .batch import (
    MapEstimate,
    fit_ridge,
    fit_svm_cpd,
    fit_svm_nonparametric,
    fit_svm_semiparametric,
)
from .kernels import (
    DiagonalGaussianKernel,
    ThinPlateKernel,
    TpsPolynomialBasis,
    TransmitterPathlossBasis,
)
from .model import MeasurementRecord
from .online import (
    RegretLedger,
    instantaneous_cost,
    make_shared_state,
    rkhs_norm_sq,
    step,
)
from .quantize import interval_of, quantize, virtual_records
from .simulate import (
    GroundTruthField,
    ScenarioConfig,
    calibrate_quantizer,
    derive_seed,
    gain_field,
    sample_shadowing,
    simulate_scenario,
    stream,
)

__all__ = [
    "nmse",
    "nmse_values",
    "sign_test_pvalue",
    "EstimatorSpec",
    "SweepSpec",
    "ResultTable",
    "run_sweep",
    "online_trace",
    "trace_to_csv",
    "format_value",
]


def nmse_values(truth: np.ndarray, estimate: np.ndarray) -> float:
    """sum ||l - l_hat||^2 / sum ||l||^2 over rows of gain vectors."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    denom = float(np.sum(truth * truth))
    if denom <= 0.0:
        raise ValueError("degenerate ground-truth field: zero energy on the evaluation set")
    return float(np.sum((truth - estimate) ** 2) / denom)


def nmse(estimate: MapEstimate, field_: GroundTruthField, eval_indices) -> float:
    """Normalized mean-square error of a fitted map over evaluation points."""
    truth = field_.values(eval_indices)
    pred = estimate.evaluate_grid(field_.points[eval_indices])
    return nmse_values(truth, pred)


def sign_test_pvalue(wins: int, trials: int) -> float:
    """One-sided exact binomial tail P(X >= wins) under a fair coin."""
    if trials < 1 or not 0 <= wins <= trials:
        raise ValueError("need 0 <= wins <= trials with trials >= 1")
    total = sum(math.comb(trials, k) for k in range(wins, trials + 1))
    return total / 2.0 ** trials


@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimator a sweep cell runs, with its hyperparameters.

    Kinds: ``ridge`` (squared loss on raw powers), ``svm`` (nonparametric
    interval fit with a diagonal Gaussian kernel), ``semiparametric`` (adds
    the transmitter-pathloss basis), ``tps`` (thin-plate kernel with the
    affine basis through the projected-kernel path).
    """

    kind: str = "svm"
    lam: float = 1e-6
    kernel_width: float = 0.12
    tps_order: int = 2

    def __post_init__(self):
        if self.kind not in ("ridge", "svm", "semiparametric", "tps"):
            raise ValueError(f"unknown estimator kind: {self.kind!r}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    def fit(self, records: list[MeasurementRecord], config: ScenarioConfig) -> MapEstimate:
        m = config.num_channels
        if self.kind == "ridge":
            kernel = DiagonalGaussianKernel(np.full(m, self.kernel_width))
            return fit_ridge(records, kernel, self.lam)
        if self.kind == "svm":
            kernel = DiagonalGaussianKernel(np.full(m, self.kernel_width))
            return fit_svm_nonparametric(records, kernel, self.lam)[0]
        if self.kind == "semiparametric":
            kernel = DiagonalGaussianKernel(np.full(m, self.kernel_width))
            basis = TransmitterPathlossBasis(config.tx_locations, config.gamma,
                                             config.delta, m)
            return fit_svm_semiparametric(records, kernel, basis, self.lam)[0]
        kernel = ThinPlateKernel(self.tps_order, config.dim, m)
        basis = TpsPolynomialBasis(config.dim, m)
        return fit_svm_cpd(records, kernel, basis, self.lam)[0]


@dataclass(frozen=True)
class SweepSpec:
    """Factor grids around a base scenario; every grid must be nonempty."""

    base: ScenarioConfig
    sensors: tuple = None
    bits: tuple = None
    measurements: tuple = None
    kinds: tuple = None
    nonnegativity: tuple = (False,)
    estimators: tuple = (EstimatorSpec(),)
    noise_vars: tuple = None
    runs: int = 1
    eval_count: int = 1000

    def __post_init__(self):
        def default(value, fallback):
            return tuple(value) if value is not None else (fallback,)

        object.__setattr__(self, "sensors", default(self.sensors, self.base.num_sensors))
        object.__setattr__(self, "bits", default(self.bits, self.base.quantizer_bits))
        object.__setattr__(self, "measurements",
                           default(self.measurements, self.base.meas_per_sensor))
        object.__setattr__(self, "kinds", default(self.kinds, self.base.quantizer_kind))
        object.__setattr__(self, "nonnegativity", tuple(self.nonnegativity))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "noise_vars", default(self.noise_vars, self.base.noise_var))
        for name in ("sensors", "bits", "measurements", "kinds", "nonnegativity",
                     "estimators", "noise_vars"):
            if not getattr(self, name):
                raise ValueError(f"factor grid {name!r} must be nonempty")
        if self.runs < 1:
            raise ValueError("need at least one Monte Carlo run")

    def cells(self):
        return list(product(self.sensors, self.measurements, self.bits, self.kinds,
                            self.nonnegativity, self.noise_vars,
                            range(len(self.estimators))))


FACTOR_NAMES = ("sensors", "measurements", "bits", "quantizer", "nonnegativity",
                "noise_var", "estimator")


@dataclass
class ResultTable:
    """Aggregated sweep output plus per-run NMSE samples keyed by cell."""

    factor_names: tuple
    rows: list
    samples: dict

    def to_csv(self, path: str) -> None:
        # wall_time_s stays on the in-memory rows only: CSV output must be
        # byte-identical across repeated runs with the same seed
        header = list(self.factor_names) + [
            "nmse_mean", "nmse_se", "clip_rate", "error_rate",
            "runs", "failures",
        ]
        lines = [",".join(header)]
        for row in self.rows:
            lines.append(",".join(format_value(row[k]) for k in header))
        from .cli import atomic_write  # local import to avoid a cycle

        atomic_write(path, "\n".join(lines) + "\n")


def format_value(value) -> str:
    """Stable CSV formatting: shortest round-trip repr for floats."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _measurement_records(config, field_, quantizer, phi_pool, eta_pool,
                         n_sensors, n_meas, sigma):
    """Records for one sweep cell from the pre-drawn pools (paired seeds)."""
    gains = field_.values(np.arange(n_sensors))
    records = []
    clipped = 0
    errors = 0
    top = quantizer.boundaries[-1]
    for n in range(n_sensors):
        loc = field_.points[n]
        for p in range(n_meas):
            phi = phi_pool[n, p]
            exact = float(phi @ gains[n])
            noisy = abs(exact + sigma * eta_pool[n, p])
            cell = quantize(quantizer, noisy)
            clipped += noisy >= top
            errors += cell != quantize(quantizer, exact)
            y, eps = interval_of(quantizer, cell)
            records.append(MeasurementRecord(n, loc, phi, y, eps, raw=noisy))
    return records, clipped, errors


def run_sweep(spec: SweepSpec) -> ResultTable:
    """Monte Carlo sweep over the factor grids with per-run pairing.

    Per run, sensor locations are a nested pool (a cell with fewer sensors
    uses a prefix), filter weights and noise variates are shared across
    cells, and quantizers are recalibrated per (bits, kind, noise) triple.
    Estimator failures are recorded per cell rather than aborting the sweep.
    """
    base = spec.base
    n_max = max(spec.sensors)
    p_max = max(spec.measurements)
    cells = spec.cells()
    acc = {cell: [] for cell in cells}
    stats = {cell: [0, 0, 0, 0.0] for cell in cells}  # meas, clips, errors, time

    for run in range(spec.runs):
        run_seed = derive_seed(base.seed, run)
        cfg_run = replace(base, seed=run_seed, num_sensors=n_max, meas_per_sensor=p_max)
        sensors = cfg_run.uniform_points(stream(run_seed, "sensors"), n_max)
        eval_points = cfg_run.uniform_points(stream(run_seed, "eval"), spec.eval_count)
        points = np.vstack([sensors, eval_points])
        shadow = sample_shadowing(points, cfg_run.shadowing_var, cfg_run.shadowing_corr,
                                  stream(run_seed, "shadowing"), cfg_run.tx_power.size)
        field_ = gain_field(cfg_run, points, shadow)
        eval_idx = np.arange(n_max, points.shape[0])
        m = cfg_run.num_channels
        phi_pool = stream(run_seed, "phi").random((n_max, p_max, m))
        eta_pool = stream(run_seed, "noise").standard_normal((n_max, p_max))
        quantizers = {}
        for cell in cells:
            n_sens, n_meas, bits, kind, nonneg, noise_var, est_idx = cell
            qkey = (bits, kind, noise_var)
            if qkey not in quantizers:
                qcfg = replace(cfg_run, quantizer_bits=bits, quantizer_kind=kind,
                               noise_var=noise_var)
                quantizers[qkey] = calibrate_quantizer(qcfg)
            quant = quantizers[qkey]
            records, clipped, errors = _measurement_records(
                cfg_run, field_, quant, phi_pool, eta_pool,
                n_sens, n_meas, math.sqrt(noise_var))
            if nonneg:
                records = records + virtual_records(sensors[:n_sens], quant, m)
            t0 = time.perf_counter()
            try:
                est = spec.estimators[est_idx].fit(records, cfg_run)
                value = nmse(est, field_, eval_idx)
            except Exception:
                value = math.nan
            elapsed = time.perf_counter() - t0
            acc[cell].append(value)
            st = stats[cell]
            st[0] += n_sens * n_meas
            st[1] += clipped
            st[2] += errors
            st[3] += elapsed

    rows = []
    samples = {}
    for cell in cells:
        n_sens, n_meas, bits, kind, nonneg, noise_var, est_idx = cell
        values = np.array(acc[cell], dtype=float)
        ok = values[~np.isnan(values)]
        st = stats[cell]
        row = {
            "sensors": n_sens,
            "measurements": n_meas,
            "bits": bits,
            "quantizer": kind,
            "nonnegativity": nonneg,
            "noise_var": noise_var,
            "estimator": spec.estimators[est_idx].kind,
            "nmse_mean": float(ok.mean()) if ok.size else None,
            "nmse_se": float(ok.std(ddof=1) / math.sqrt(ok.size)) if ok.size > 1 else None,
            "clip_rate": st[1] / max(1, st[0]),
            "error_rate": st[2] / max(1, st[0]),
            "wall_time_s": st[3] / spec.runs,
            "runs": spec.runs,
            "failures": int(np.isnan(values).sum()),
        }
        rows.append(row)
        samples[cell] = values
    return ResultTable(FACTOR_NAMES, rows, samples)


def online_trace(config: ScenarioConfig, mu: float, steps: int,
                 lam: float = 1e-6, kernel_width: float = 0.12,
                 loss: str = "l1eps", schedule: str = "round_robin",
                 eval_count: int = 0, checkpoints=None,
                 comparator_tol: float = 1e-8):
    """Run the online estimator over a simulated scenario and trace it.

    Returns ``(rows, ledger)``.  Each row reports the step index, the
    instantaneous regularized cost of the pre-update iterate, the running
    average, the current RKHS norm and the regret envelope; at checkpoint
    steps the batch fit over the measurements processed so far supplies the
    comparator average (both its attained primal average and the dual lower
    bound) and the map NMSE is evaluated.
    """
    if schedule not in ("round_robin", "random"):
        raise ValueError(f"unknown schedule: {schedule!r}")
    sc = simulate_scenario(config, n_eval=eval_count)
    m = config.num_channels
    kernel = DiagonalGaussianKernel(np.full(m, kernel_width))
    state = make_shared_state(kernel, sc.sensors, lam, mu, loss=loss)
    ledger = RegretLedger(lam, mu)
    n_rec = len(sc.records)
    sched_rng = stream(config.seed, "schedule") if schedule == "random" else None
    if checkpoints is None:
        checkpoints = {steps}
    checkpoints = set(int(t) for t in checkpoints)
    diag_eig = kernel.diag_block_max_eigenvalue()

    processed = []
    rows = []
    cost_sum = 0.0
    for t in range(1, steps + 1):
        if schedule == "round_robin":
            sensor = (t - 1) % config.num_sensors
            meas = ((t - 1) // config.num_sensors) % config.meas_per_sensor
            rec = sc.records[sensor * config.meas_per_sensor + meas]
        else:
            rec = sc.records[int(sched_rng.integers(0, n_rec))]
        cost = instantaneous_cost(state, rec)
        cost_sum += cost
        ledger.observe(cost, float(np.linalg.norm(rec.phi)), diag_eig)
        processed.append(rec)
        row = {
            "t": t,
            "cost": cost,
            "running_avg": cost_sum / t,
            "envelope": ledger.envelope(t),
            "wnorm": math.sqrt(max(0.0, rkhs_norm_sq(state))),
            "comparator_avg": None,
            "comparator_lb": None,
            "nmse": None,
        }
        if t in checkpoints:
            _, dual = fit_svm_nonparametric(processed, kernel, lam, tol=comparator_tol)
            row["comparator_avg"] = dual.primal_objective / t
            row["comparator_lb"] = dual.dual_objective / t
            if eval_count > 0:
                snapshot = MapEstimate(state.anchors, state.coeffs.ravel(),
                                       np.zeros(0), kernel, None, lam)
                row["nmse"] = nmse(snapshot, sc.field, sc.eval_indices)
        rows.append(row)
        state = step(state, rec)
    return rows, ledger


TRACE_COLUMNS = ("t", "cost", "running_avg", "envelope", "wnorm",
                 "comparator_avg", "comparator_lb", "nmse")


def trace_to_csv(rows, path: str) -> None:
    from .cli import atomic_write

    lines = [",".join(TRACE_COLUMNS)]
    for row in rows:
        lines.append(",".join(format_value(row[k]) for k in TRACE_COLUMNS))
    atomic_write(path, "\n".join(lines) + "\n")
