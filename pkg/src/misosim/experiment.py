"""Multi-trial experiments: config parsing, policy comparison, sweeps, output."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import PHASES, MetricsReport
from .optimizer import static_partition_table
from .profiles import PredictorSpec
from .sim import POLICIES, OverheadSpec, run_simulation
from .topology import PartitionConfig
from .workload import JobTrace, TraceSpec, generate_trace, load_trace

SWEEP_PARAMS = ("checkpoint_restart_s", "target_mae", "lambda_s")
METRICS = ("avg_jct_s", "makespan_s", "avg_stp")
RESULT_FIELDS = (
    ("sweep_param", "sweep_value", "trial", "seed", "policy", "static_partition")
    + METRICS
    + tuple(f"norm_{m}" for m in METRICS)
    + tuple(f"frac_{p}" for p in PHASES)
    + ("reconfigurations", "migrations")
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    cluster_size: int = 8
    job_count: int = 100
    lambda_s: float = 60.0
    max_duration_s: float = 7200.0
    duration_sigma: float = 1.0
    trace_path: Optional[str] = None
    policies: tuple[str, ...] = POLICIES
    mig_reconfig_s: float = 4.0
    checkpoint_restart_s: float = 30.0
    mps_window_s: float = 10.0
    interference: float = 0.8
    predictor_mode: str = "noisy"
    target_mae: float = 0.017
    sweep_param: Optional[str] = None
    sweep_values: tuple[float, ...] = ()
    trials: int = 1
    base_seed: int = 0
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        bad = []
        if self.trials < 1:
            bad.append("trials must be >= 1")
        if self.cluster_size < 1:
            bad.append("cluster_size must be >= 1")
        if self.workers < 1:
            bad.append("workers must be >= 1")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown or not self.policies:
            bad.append(f"policies must be a non-empty subset of {','.join(POLICIES)}; got {unknown}")
        if self.sweep_param is not None and self.sweep_param not in SWEEP_PARAMS:
            bad.append(f"sweep_param must be one of {', '.join(SWEEP_PARAMS)}")
        if self.sweep_param is not None and not self.sweep_values:
            bad.append("sweep_values is empty")
        if self.sweep_param is None and self.sweep_values:
            bad.append("sweep_values given without sweep_param")
        if self.sweep_param == "lambda_s" and self.trace_path:
            bad.append("cannot sweep lambda_s over a fixed trace file")
        if bad:
            raise ConfigError("; ".join(bad))
        try:
            self.overheads()
            self.predictor(0)
            self.trace_spec(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def overheads(self) -> OverheadSpec:
        return OverheadSpec(self.mig_reconfig_s, self.checkpoint_restart_s, self.mps_window_s, self.interference)

    def predictor(self, seed: int) -> PredictorSpec:
        return PredictorSpec(self.predictor_mode, self.target_mae, seed)

    def trace_spec(self, seed: int) -> TraceSpec:
        return TraceSpec(
            self.job_count, self.lambda_s, self.max_duration_s, self.duration_sigma, seed, self.interference
        )

    def sweep_points(self) -> list[Optional[float]]:
        return list(self.sweep_values) if self.sweep_param else [None]

    def at(self, value: Optional[float]) -> "ExperimentConfig":
        if self.sweep_param is None:
            return self
        return replace(self, **{self.sweep_param: value, "sweep_param": None, "sweep_values": ()})


_FIELD_TYPES = {
    "cluster_size": int,
    "job_count": int,
    "lambda_s": float,
    "max_duration_s": float,
    "duration_sigma": float,
    "trace_path": str,
    "policies": "strs",
    "mig_reconfig_s": float,
    "checkpoint_restart_s": float,
    "mps_window_s": float,
    "interference": float,
    "predictor_mode": str,
    "target_mae": float,
    "sweep_param": str,
    "sweep_values": "floats",
    "trials": int,
    "base_seed": int,
    "output_dir": str,
    "workers": int,
}
CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))


def convert_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "strs":
            return tuple(t.strip() for t in text.split(",") if t.strip())
        if kind == "floats":
            return tuple(float(t) for t in text.split(",") if t.strip())
        if kind is str:
            return text or None
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    unknown = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            unknown.append(key)
            continue
        values[key] = convert_value(key, val)
    if unknown:
        raise ConfigError(f"{source}: unknown config keys: {', '.join(unknown)}")
    return values


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values = parse_config_text(text, str(path))
    values.update(overrides or {})
    unknown = sorted(set(values) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**values)


def _trace_for(config: ExperimentConfig, seed: int, fixed: Optional[JobTrace]) -> JobTrace:
    return fixed if fixed is not None else generate_trace(config.trace_spec(seed))


def _run_unit(args) -> list[dict]:
    """All policies for one (sweep point, trial); NoPart always runs for normalization."""
    config, point_idx, value, trial, fixed = args
    cfg = config.at(value)
    seed = cfg.base_seed + trial
    trace = _trace_for(cfg, seed, fixed)
    ov = cfg.overheads()
    pred = cfg.predictor(seed)
    reports: dict[str, tuple[MetricsReport, str]] = {}
    base = run_simulation(trace, cfg.cluster_size, "nopart", ov, pred)
    for policy in cfg.policies:
        if policy == "nopart":
            reports[policy] = (base, "7")
        elif policy == "optsta":
            table = static_partition_table(trace, cfg.cluster_size, ov)
            best = min(table, key=lambda row: row[1])[0]
            rep = run_simulation(trace, cfg.cluster_size, "optsta", ov, pred, best)
            reports[policy] = (rep, best.label())
        else:
            reports[policy] = (run_simulation(trace, cfg.cluster_size, policy, ov, pred), "")
    rows = []
    for policy in cfg.policies:
        rep, part = reports[policy]
        row = {
            "sweep_param": config.sweep_param or "",
            "sweep_value": "" if value is None else repr(float(value)),
            "trial": trial,
            "seed": seed,
            "policy": policy,
            "static_partition": part,
            "_point": point_idx,
        }
        for m in METRICS:
            row[m] = getattr(rep, m)
            row[f"norm_{m}"] = getattr(rep, m) / getattr(base, m)
        for p in PHASES:
            row[f"frac_{p}"] = rep.breakdown[p]
        row["reconfigurations"] = rep.reconfigurations
        row["migrations"] = rep.migrations
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summarize(rows: Sequence[dict], config: ExperimentConfig) -> dict:
    points = []
    for idx, value in enumerate(config.sweep_points()):
        per_policy = {}
        for policy in config.policies:
            sel = [r for r in rows if r["_point"] == idx and r["policy"] == policy]
            stats = {}
            for m in METRICS + tuple(f"norm_{m}" for m in METRICS):
                arr = np.array([r[m] for r in sel], dtype=float)
                q1, med, q3 = np.percentile(arr, [25, 50, 75])
                stats[m] = {
                    "median": float(med),
                    "q1": float(q1),
                    "q3": float(q3),
                    "min": float(arr.min()),
                    "max": float(arr.max()),
                }
            per_policy[policy] = stats
        points.append({"sweep_value": value, "policies": per_policy})
    return {
        "config": config_dict(config),
        "sweep_param": config.sweep_param,
        "trials": config.trials,
        "points": points,
    }


def config_dict(config: ExperimentConfig) -> dict:
    out = {}
    for key in CONFIG_KEYS:
        v = getattr(config, key)
        out[key] = list(v) if isinstance(v, tuple) else v
    return out


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in RESULT_FIELDS])
    return buf.getvalue()


def run_trials(config: ExperimentConfig) -> list[dict]:
    fixed = None
    if config.trace_path:
        fixed = load_trace(config.trace_path)
    units = [
        (config, idx, value, trial, fixed)
        for idx, value in enumerate(config.sweep_points())
        for trial in range(config.trials)
    ]
    if config.workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(units))) as pool:
            chunks = list(pool.map(_run_unit, units))
    else:
        chunks = [_run_unit(u) for u in units]
    rows = [r for chunk in chunks for r in chunk]
    order = {p: i for i, p in enumerate(config.policies)}
    rows.sort(key=lambda r: (r["_point"], r["trial"], order[r["policy"]]))
    return rows


def run_experiment(config: ExperimentConfig) -> dict[str, Path]:
    """Run every (sweep point, trial, policy) simulation and write
    ``results.csv`` plus ``summary.json`` into ``config.output_dir``."""
    rows = run_trials(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    json_path = out / "summary.json"
    csv_path.write_text(rows_to_csv(rows))
    json_path.write_text(json.dumps(summarize(rows, config), indent=2, sort_keys=True) + "\n")
    return {"results": csv_path, "summary": json_path}


@dataclass
class OptStaReport:
    chosen: PartitionConfig
    table: list[tuple[PartitionConfig, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("partition", "avg_jct_s", "chosen"))
        for entry, jct in self.table:
            w.writerow((entry.label(), repr(jct), int(entry == self.chosen)))
        return buf.getvalue()


def optsta_search(config: ExperimentConfig, trial: int = 0) -> OptStaReport:
    """Exhaustive static-partition search on one trace; writes
    ``optsta.csv`` (per-candidate average JCT) and ``optsta_choice.txt``."""
    seed = config.base_seed + trial
    fixed = load_trace(config.trace_path) if config.trace_path else None
    trace = _trace_for(config, seed, fixed)
    table = static_partition_table(trace, config.cluster_size, config.overheads())
    chosen = min(table, key=lambda row: row[1])[0]
    report = OptStaReport(chosen, table)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "optsta.csv").write_text(report.to_csv())
    (out / "optsta_choice.txt").write_text(chosen.label() + "\n")
    return report

