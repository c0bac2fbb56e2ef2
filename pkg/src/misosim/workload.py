"""Synthetic job traces: Poisson arrivals, capped log-normal durations."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Optional

import numpy as np

from .profiles import DEFAULT_INTERFERENCE, PROFILE_FIELDS, JobProfile, profile_from_row, profile_to_row, random_profile

TRACE_SCHEMA = "miso-trace v1"
TRACE_FIELDS = ("job_id", "arrival_s") + PROFILE_FIELDS[1:] + ("instances",)
CAP_QUANTILE = 0.9


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceSpec:
    job_count: int = 100
    lambda_s: float = 60.0
    max_duration_s: float = 7200.0
    duration_sigma: float = 1.0
    seed: int = 0
    interference: float = DEFAULT_INTERFERENCE

    def __post_init__(self):
        if self.job_count < 1:
            raise ValueError("job_count must be >= 1")
        if not self.lambda_s > 0:
            raise ValueError("lambda_s must be > 0")
        if not self.max_duration_s > 0:
            raise ValueError("max_duration_s must be > 0")
        if not self.duration_sigma > 0:
            raise ValueError("duration_sigma must be > 0")

    @property
    def duration_mu(self) -> float:
        """Log-mean placing the cap at the 90th percentile of the raw log-normal."""
        z = NormalDist().inv_cdf(CAP_QUANTILE)
        return math.log(self.max_duration_s) - z * self.duration_sigma


@dataclass
class JobTrace:
    jobs: list[tuple[JobProfile, float]]
    spec: TraceSpec = field(default_factory=TraceSpec)

    def __post_init__(self):
        validate_trace(self)

    def __len__(self) -> int:
        return len(self.jobs)

    @property
    def profiles(self) -> list[JobProfile]:
        return [j for j, _ in self.jobs]

    @property
    def arrivals(self) -> list[float]:
        return [t for _, t in self.jobs]


def validate_trace(trace: JobTrace) -> None:
    prev = None
    for i, (job, t) in enumerate(trace.jobs):
        if prev is None and t != 0:
            raise TraceError(f"job {job.job_id}: first arrival must be at t=0, got {t}")
        if prev is not None and t < prev:
            raise TraceError(f"job {job.job_id}: arrival {t} precedes previous arrival {prev}")
        if job.base_duration_s > trace.spec.max_duration_s:
            raise TraceError(
                f"job {job.job_id}: duration {job.base_duration_s} exceeds cap "
                f"{trace.spec.max_duration_s}"
            )
        prev = t


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    arrivals, jobs = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(arrivals), np.random.default_rng(jobs)


def generate_trace(spec: TraceSpec) -> JobTrace:
    """Arrivals and job draws come from separate seeded streams, so traces
    that differ only in ``lambda_s`` share every job and duration."""
    arr_rng, job_rng = _streams(spec.seed)
    gaps = arr_rng.exponential(spec.lambda_s, size=spec.job_count - 1)
    arrivals = np.concatenate([[0.0], np.cumsum(gaps)])
    raw = job_rng.lognormal(spec.duration_mu, spec.duration_sigma, size=spec.job_count)
    durations = np.minimum(raw, spec.max_duration_s)
    jobs = []
    for i, (t, d) in enumerate(zip(arrivals, durations)):
        prof = random_profile(job_rng, f"j{i:04d}", float(d), interference=spec.interference)
        jobs.append((prof, float(t)))
    return JobTrace(jobs, spec)


def _header(spec: TraceSpec) -> str:
    return (
        f"# {TRACE_SCHEMA} job_count={spec.job_count} lambda_s={spec.lambda_s!r} "
        f"max_duration_s={spec.max_duration_s!r} duration_sigma={spec.duration_sigma!r} "
        f"seed={spec.seed} interference={spec.interference!r}"
    )


def save_trace(trace: JobTrace, path: str | Path) -> None:
    buf = io.StringIO()
    buf.write(_header(trace.spec) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for job, t in trace.jobs:
        row = profile_to_row(job)
        w.writerow([row[0], repr(t)] + row[1:] + [str(job.instances)])
    Path(path).write_text(buf.getvalue())


def _parse_header(line: str, path) -> TraceSpec:
    if not line.startswith(f"# {TRACE_SCHEMA}"):
        raise TraceError(f"{path}:1: missing '# {TRACE_SCHEMA}' header")
    kv = dict(tok.split("=", 1) for tok in line.split()[3:] if "=" in tok)
    try:
        return TraceSpec(
            job_count=int(kv.get("job_count", 1)),
            lambda_s=float(kv.get("lambda_s", 60.0)),
            max_duration_s=float(kv.get("max_duration_s", 7200.0)),
            duration_sigma=float(kv.get("duration_sigma", 1.0)),
            seed=int(kv.get("seed", 0)),
            interference=float(kv.get("interference", DEFAULT_INTERFERENCE)),
        )
    except ValueError as exc:
        raise TraceError(f"{path}:1: {exc}") from None


def load_trace(path: str | Path) -> JobTrace:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise TraceError(f"{path}: empty trace file")
    spec = _parse_header(lines[0], path)
    jobs = []
    prev = None
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row or row[0].startswith("#"):
            continue
        if row[0] == "job_id":
            continue
        if len(row) not in (len(TRACE_FIELDS) - 1, len(TRACE_FIELDS)):
            raise TraceError(f"{path}:{lineno}: expected {len(TRACE_FIELDS)} fields, got {len(row)}")
        try:
            arrival = float(row[1])
            job = profile_from_row([row[0]] + row[2:])
        except ValueError as exc:
            raise TraceError(f"{path}:{lineno}: {exc}") from None
        if not math.isfinite(arrival) or arrival < 0:
            raise TraceError(f"{path}:{lineno}: bad arrival time {row[1]!r}")
        if prev is not None and arrival < prev:
            raise TraceError(f"{path}:{lineno}: arrival {arrival} goes back in time (previous {prev})")
        if job.base_duration_s > spec.max_duration_s:
            raise TraceError(
                f"{path}:{lineno}: duration {job.base_duration_s} exceeds cap {spec.max_duration_s}"
            )
        prev = arrival
        jobs.append((job, arrival))
    if not jobs:
        raise TraceError(f"{path}: no job records")
    try:
        return JobTrace(jobs, spec)
    except TraceError as exc:
        raise TraceError(f"{path}: {exc}") from None


def with_lambda(spec: TraceSpec, lambda_s: float) -> TraceSpec:
    from dataclasses import replace

    return replace(spec, lambda_s=lambda_s)


def single_job_trace(job: JobProfile, max_duration_s: Optional[float] = None) -> JobTrace:
    cap = max_duration_s or max(job.base_duration_s, 1.0)
    return JobTrace([(job, 0.0)], TraceSpec(job_count=1, max_duration_s=cap))
