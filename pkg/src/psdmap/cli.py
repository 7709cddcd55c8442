"""Command-line interface binding config files to the simulate/fit/evaluate
pipeline.

Commands
--------
``simulate``             draw a scenario; write measurements, quantizer and truth grid
``calibrate-quantizer``  write the calibrated quantizer only
``fit``                  fit an estimator to a measurements file; write the map estimate
``evaluate``             evaluate a saved estimate against the scenario's ground truth
``sweep``                Monte Carlo factor sweep; write the results table
``online``               run the online estimator; write the per-step trace

All randomness flows from the scenario seed (or ``--seed``); outputs are
written atomically and are byte-identical across repeated runs.  Exit codes:
0 success, 2 configuration error, 3 solver failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from .batch import MapEstimate, assemble_design
from .evaluate import (
    EstimatorSpec,
    SweepSpec,
    format_value,
    nmse,
    online_trace,
    run_sweep,
    trace_to_csv,
)
from .model import MeasurementRecord
from .quantize import QuantizerSpec, quantize, virtual_records
from .qpsolver import SolverError
from .simulate import ScenarioConfig, calibrate_quantizer, simulate_scenario

__all__ = ["ConfigError", "main", "run", "atomic_write"]

SCHEMA = "psdmap/1"


class ConfigError(ValueError):
    """Configuration file is missing, malformed, or has invalid values."""


def atomic_write(path: str, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see partial data."""
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- config parsing -----------------------------------------------------------

def _need(mapping, key, path):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ConfigError(f"missing required config key: {path}{key}")
    return mapping[key]


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    if cfg.get("schema") != SCHEMA:
        raise ConfigError(f"config key schema: expected {SCHEMA!r}, got {cfg.get('schema')!r}")
    return cfg


def scenario_from_config(cfg: dict, seed_override: int | None = None) -> ScenarioConfig:
    sc = _need(cfg, "scenario", "")
    tx = _need(sc, "transmitters", "scenario.")
    quant = sc.get("quantizer", {})
    shadow = sc.get("shadowing", {})
    try:
        return ScenarioConfig(
            dim=int(_need(sc, "dim", "scenario.")),
            region=np.asarray(_need(sc, "region", "scenario."), dtype=float),
            tx_power=np.asarray(_need(tx, "powers", "scenario.transmitters."), dtype=float),
            tx_locations=np.asarray(_need(tx, "locations", "scenario.transmitters."), dtype=float),
            noise_power=float(sc.get("noise_power", 0.75)),
            gamma=float(sc.get("gamma", 3.0)),
            delta=float(sc.get("delta", 1e-2)),
            shadowing_var=float(shadow.get("variance", 0.0)),
            shadowing_corr=float(shadow.get("correlation", 0.8)),
            num_sensors=int(sc.get("sensors", 20)),
            meas_per_sensor=int(sc.get("measurements_per_sensor", 1)),
            noise_var=float(sc.get("noise_var", 0.0)),
            quantizer_bits=int(quant.get("bits", 5)),
            quantizer_kind=str(quant.get("kind", "uniform")),
            clip_prob=float(quant.get("clip_prob", 1e-3)),
            calibration_samples=int(quant.get("calibration_samples", 100_000)),
            seed=int(seed_override if seed_override is not None else sc.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario config: {exc}") from exc


def estimator_from_config(cfg: dict) -> tuple[EstimatorSpec, bool]:
    est = cfg.get("estimator", {})
    try:
        spec = EstimatorSpec(
            kind=str(est.get("kind", "svm")),
            lam=float(est.get("lambda", 1e-6)),
            kernel_width=float(est.get("kernel_width", 0.12)),
            tps_order=int(est.get("tps_order", 2)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid estimator config: {exc}") from exc
    return spec, bool(est.get("nonnegativity", False))


def sweep_from_config(cfg: dict, base: ScenarioConfig) -> SweepSpec:
    sw = _need(cfg, "sweep", "")
    try:
        estimators = tuple(
            EstimatorSpec(
                kind=str(e.get("kind", "svm")),
                lam=float(e.get("lambda", 1e-6)),
                kernel_width=float(e.get("kernel_width", 0.12)),
                tps_order=int(e.get("tps_order", 2)),
            )
            for e in sw.get("estimators", [{}])
        )
        return SweepSpec(
            base=base,
            sensors=tuple(sw["sensors"]) if "sensors" in sw else None,
            bits=tuple(sw["bits"]) if "bits" in sw else None,
            measurements=tuple(sw["measurements"]) if "measurements" in sw else None,
            kinds=tuple(sw["kinds"]) if "kinds" in sw else None,
            nonnegativity=tuple(bool(v) for v in sw.get("nonnegativity", [False])),
            estimators=estimators,
            noise_vars=tuple(float(v) for v in sw["noise_vars"]) if "noise_vars" in sw else None,
            runs=int(sw.get("runs", 1)),
            eval_count=int(sw.get("eval_points", 1000)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid sweep config: {exc}") from exc


# -- file formats --------------------------------------------------------------

def write_measurements(path: str, records, dim: int, num_channels: int,
                       quantizer: QuantizerSpec | None) -> None:
    header = (["sensor_index"] + [f"x{i+1}" for i in range(dim)]
              + [f"phi{m+1}" for m in range(num_channels)]
              + ["q_index", "y", "eps", "raw", "is_virtual"])
    lines = [",".join(header)]
    for rec in records:
        q_index = ""
        if quantizer is not None and rec.raw is not None:
            q_index = str(quantize(quantizer, rec.raw))
        cells = ([str(rec.sensor_index)]
                 + [format_value(v) for v in rec.location]
                 + [format_value(v) for v in rec.phi]
                 + [q_index, format_value(rec.y), format_value(rec.eps),
                    format_value(rec.raw), format_value(rec.is_virtual)])
        lines.append(",".join(cells))
    atomic_write(path, "\n".join(lines) + "\n")


def read_measurements(path: str) -> list[MeasurementRecord]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ConfigError(f"measurements file is empty: {path}")
    header = lines[0].split(",")
    dim = sum(1 for h in header if h.startswith("x") and h[1:].isdigit())
    m = sum(1 for h in header if h.startswith("phi") and h[3:].isdigit())
    if dim == 0 or m == 0:
        raise ConfigError(f"measurements header lacks x*/phi* columns: {path}")
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ConfigError(f"measurements row has {len(parts)} fields, expected {len(header)}")
        idx = 1
        loc = [float(v) for v in parts[idx:idx + dim]]
        idx += dim
        phi = [float(v) for v in parts[idx:idx + m]]
        idx += m + 1  # skip q_index
        y, eps = float(parts[idx]), float(parts[idx + 1])
        raw = float(parts[idx + 2]) if parts[idx + 2] else None
        virtual = parts[idx + 3] == "true"
        records.append(MeasurementRecord(int(parts[0]), np.array(loc), np.array(phi),
                                         y, eps, raw=raw, is_virtual=virtual))
    return records


def write_quantizer(path: str, spec: QuantizerSpec) -> None:
    payload = {
        "schema": "psdmap-quantizer/1",
        "kind": spec.kind,
        "bits": spec.bits,
        "boundaries": [float(b) for b in spec.boundaries],
    }
    atomic_write(path, json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def read_quantizer(path: str) -> QuantizerSpec:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read quantizer file {path}: {exc}") from exc
    if payload.get("schema") != "psdmap-quantizer/1":
        raise ConfigError(f"unrecognized quantizer schema in {path}")
    return QuantizerSpec(np.asarray(payload["boundaries"], dtype=float), payload["kind"])


def write_grid(path: str, points: np.ndarray, values: np.ndarray) -> None:
    dim = points.shape[1]
    m = values.shape[1]
    header = [f"x{i+1}" for i in range(dim)] + [f"l{j+1}" for j in range(m)]
    lines = [",".join(header)]
    for row_x, row_l in zip(points, values):
        lines.append(",".join([format_value(v) for v in row_x]
                              + [format_value(v) for v in row_l]))
    atomic_write(path, "\n".join(lines) + "\n")


# -- commands ------------------------------------------------------------------

def _cmd_simulate(cfg: dict, args) -> int:
    config = scenario_from_config(cfg, args.seed)
    n_eval = int(cfg.get("evaluate", {}).get("points", 1000))
    sc = simulate_scenario(config, n_eval=n_eval)
    write_measurements(os.path.join(args.out, "measurements.csv"), sc.records,
                       config.dim, config.num_channels, sc.quantizer)
    write_quantizer(os.path.join(args.out, "quantizer.json"), sc.quantizer)
    write_grid(os.path.join(args.out, "truth.csv"),
               sc.field.points[sc.eval_indices], sc.field.values(sc.eval_indices))
    print(f"simulate: {len(sc.records)} measurements from {config.num_sensors} sensors; "
          f"clip rate {sc.clip_rate:.4g}, measurement-error rate {sc.error_rate:.4g}")
    return 0


def _cmd_calibrate(cfg: dict, args) -> int:
    config = scenario_from_config(cfg, args.seed)
    spec = calibrate_quantizer(config)
    write_quantizer(os.path.join(args.out, "quantizer.json"), spec)
    print(f"calibrate-quantizer: {spec.kind} with {spec.num_cells} cells on "
          f"[0, {spec.boundaries[-1]:.6g})")
    return 0


def _cmd_fit(cfg: dict, args) -> int:
    config = scenario_from_config(cfg, args.seed)
    est_spec, nonneg = estimator_from_config(cfg)
    records = read_measurements(args.measurements)
    if nonneg:
        if not args.quantizer:
            raise ConfigError("estimator.nonnegativity requires --quantizer "
                              "(virtual records need the quantizer range)")
        quant = read_quantizer(args.quantizer)
        sensors = {}
        for rec in records:
            if not rec.is_virtual:
                sensors.setdefault(tuple(rec.location), rec.location)
        records = records + virtual_records(np.vstack(list(sensors.values())),
                                            quant, records[0].num_channels)
    estimate = est_spec.fit(records, config)
    estimate.save(os.path.join(args.out, "estimate.json"))
    _write_residuals(os.path.join(args.out, "residuals.csv"), records, estimate)
    print(f"fit: {est_spec.kind} on {len(records)} records "
          f"({sum(r.is_virtual for r in records)} virtual)")
    return 0


def _write_residuals(path: str, records, estimate: MapEstimate) -> None:
    dm = assemble_design(records)
    pred_gains = estimate.evaluate_grid(dm.anchors)
    header = ["sensor_index", "y", "eps", "prediction", "xi", "zeta", "is_virtual"]
    lines = [",".join(header)]
    for j, rec in enumerate(records):
        pred = float(rec.phi @ pred_gains[dm.sensor_of[j]])
        xi = max(0.0, rec.y - pred - rec.eps)
        zeta = max(0.0, -rec.y + pred - rec.eps)
        lines.append(",".join([str(rec.sensor_index), format_value(rec.y),
                               format_value(rec.eps), format_value(pred),
                               format_value(xi), format_value(zeta),
                               format_value(rec.is_virtual)]))
    atomic_write(path, "\n".join(lines) + "\n")


def _cmd_evaluate(cfg: dict, args) -> int:
    config = scenario_from_config(cfg, args.seed)
    estimate = MapEstimate.load(args.estimate)
    n_eval = int(cfg.get("evaluate", {}).get("points", 1000))
    sc = simulate_scenario(config, n_eval=n_eval)
    value = nmse(estimate, sc.field, sc.eval_indices)
    points = sc.field.points[sc.eval_indices]
    write_grid(os.path.join(args.out, "map_grid.csv"), points,
               estimate.evaluate_grid(points))
    atomic_write(os.path.join(args.out, "evaluation.csv"),
                 "nmse,points\n" + f"{format_value(value)},{n_eval}\n")
    print(f"evaluate: nmse {value:.6g} over {n_eval} points")
    return 0


def _cmd_sweep(cfg: dict, args) -> int:
    config = scenario_from_config(cfg, args.seed)
    spec = sweep_from_config(cfg, config)
    table = run_sweep(spec)
    table.to_csv(os.path.join(args.out, "sweep.csv"))
    print(f"sweep: {len(table.rows)} cells x {spec.runs} runs")
    return 0


def _cmd_online(cfg: dict, args) -> int:
    config = scenario_from_config(cfg, args.seed)
    onl = cfg.get("online", {})
    est = cfg.get("estimator", {})
    steps = int(onl.get("steps", 200))
    every = onl.get("comparator_every")
    checkpoints = set(range(int(every), steps + 1, int(every))) | {steps} if every else {steps}
    rows, ledger = online_trace(
        config,
        mu=float(onl.get("mu", 1.0)),
        steps=steps,
        lam=float(est.get("lambda", 1e-6)),
        kernel_width=float(est.get("kernel_width", 0.12)),
        loss=str(onl.get("loss", "l1eps")),
        schedule=str(onl.get("schedule", "round_robin")),
        eval_count=int(cfg.get("evaluate", {}).get("points", 0)),
        checkpoints=checkpoints,
    )
    trace_to_csv(rows, os.path.join(args.out, "trace.csv"))
    print(f"online: {steps} steps, final running average {rows[-1]['running_avg']:.6g}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "calibrate-quantizer": _cmd_calibrate,
    "fit": _cmd_fit,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "online": _cmd_online,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psdmap",
                                     description="Gain-map estimation from quantized power measurements")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--format", default="csv", choices=["csv"],
                       help="tabular output format")
        if name == "fit":
            p.add_argument("--measurements", required=True, help="measurements CSV")
            p.add_argument("--quantizer", default=None,
                           help="quantizer JSON (required for nonnegativity)")
        if name == "evaluate":
            p.add_argument("--estimate", required=True, help="estimate JSON")
    return parser


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"PSDMAP_ERROR code=2 kind=config message={str(exc)!r}", file=sys.stderr)
        return 2
    except (SolverError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"PSDMAP_ERROR code=3 kind=solver message={str(exc)!r}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"PSDMAP_ERROR code=4 kind=io message={str(exc)!r}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run())
