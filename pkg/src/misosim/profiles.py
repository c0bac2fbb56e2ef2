"""Per-job speed tables, MPS profiling matrices and the MPS-to-MIG predictor stand-in.

Speed tables are stored as 5-tuples ordered like ``topology.SLICE_KINDS``
(7g, 4g, 3g, 2g, 1g), normalized so the 7g entry is exactly 1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .topology import (
    GPC_SIZES,
    KIND_INDEX,
    S1G,
    S2G,
    S3G,
    SLICE_KINDS,
    SliceKind,
    slice_kind,
    smallest_slice_for,
)

MPS_LEVELS = (100, 50, 14)
MIG_ROWS = SLICE_KINDS[:3]  # 7g, 4g, 3g
PROFILE_COLUMNS = 7
MAX_MEMORY_GB = 40
DEFAULT_INTERFERENCE = 0.8
DEFAULT_TARGET_MAE = 0.017

MEMORY_CHOICES_GB = (5, 10, 20)
MEMORY_WEIGHTS = (0.4, 0.3, 0.3)


@dataclass(frozen=True)
class JobProfile:
    job_id: str
    base_duration_s: float
    speed_table: tuple[float, ...]
    mem_demand_gb: int = 5
    qos_min_slice: Optional[SliceKind] = None
    mps_rates: tuple[float, ...] = ()
    is_dummy: bool = False
    instances: int = 1

    def __post_init__(self):
        table = tuple(float(v) for v in self.speed_table)
        object.__setattr__(self, "speed_table", table)
        object.__setattr__(self, "mps_rates", tuple(float(v) for v in self.mps_rates))
        if len(table) != len(SLICE_KINDS):
            raise ValueError(f"{self.job_id}: speed table needs {len(SLICE_KINDS)} entries")
        if table[0] != 1.0:
            raise ValueError(f"{self.job_id}: 7g speed must be exactly 1, got {table[0]}")
        if any(not 0.0 < v <= 1.0 for v in table):
            raise ValueError(f"{self.job_id}: speeds must lie in (0, 1]")
        if any(a < b for a, b in zip(table, table[1:])):
            raise ValueError(f"{self.job_id}: speed table must be non-decreasing in GPCs")
        if not self.base_duration_s > 0 or not math.isfinite(self.base_duration_s):
            raise ValueError(f"{self.job_id}: base duration must be positive")
        if not 0 <= self.mem_demand_gb <= MAX_MEMORY_GB:
            raise ValueError(
                f"{self.job_id}: memory demand {self.mem_demand_gb} GB outside 0..{MAX_MEMORY_GB}"
            )
        if self.mps_rates and (
            len(self.mps_rates) != len(MPS_LEVELS)
            or any(not 0.0 < v <= 1.0 for v in self.mps_rates)
        ):
            raise ValueError(f"{self.job_id}: mps rates need 3 entries in (0, 1]")
        if self.instances < 1:
            raise ValueError(f"{self.job_id}: instances must be >= 1")

    def speed(self, kind: SliceKind) -> float:
        return self.speed_table[KIND_INDEX[kind]]

    @property
    def min_slice(self) -> SliceKind:
        """Smallest slice meeting both the memory demand and the QoS floor."""
        qos = self.qos_min_slice.gpc_count if self.qos_min_slice else 0
        return smallest_slice_for(self.mem_demand_gb, qos)

    def fits(self, kind: SliceKind) -> bool:
        need = self.min_slice
        return kind.memory_gb >= need.memory_gb and kind.gpc_count >= need.gpc_count

    def effective_speed(self, kind: SliceKind) -> float:
        return self.speed(kind) if self.fits(kind) else 0.0

    def effective_table(self, table: Optional[Sequence[float]] = None) -> tuple[float, ...]:
        """Zero the entries of ``table`` (default: own table) this job cannot run on."""
        table = self.speed_table if table is None else table
        return tuple(v if self.fits(k) else 0.0 for k, v in zip(SLICE_KINDS, table))


def power_law_table(alpha: float) -> tuple[float, ...]:
    return tuple((g / 7) ** alpha for g in GPC_SIZES)


def repair_table(raw: Sequence[float]) -> tuple[float, ...]:
    """Re-anchor on the 7g entry, clip to (0, 1] and force monotonicity."""
    anchored = [v / raw[0] for v in raw]
    out = [1.0]
    for v in anchored[1:]:
        out.append(min(out[-1], max(v, 1e-6)))
    return tuple(out)


def random_profile(
    rng: np.random.Generator,
    job_id: str,
    base_duration_s: float,
    *,
    alpha_range: tuple[float, float] = (0.1, 1.0),
    jitter: float = 0.03,
    interference: float = DEFAULT_INTERFERENCE,
) -> JobProfile:
    """Draw a synthetic job: power-law speed table with multiplicative jitter."""
    alpha = rng.uniform(*alpha_range)
    noise = rng.uniform(1 - jitter, 1 + jitter, size=len(GPC_SIZES))
    table = repair_table([v * n for v, n in zip(power_law_table(alpha), noise)])
    mem = int(rng.choice(MEMORY_CHOICES_GB, p=MEMORY_WEIGHTS))
    prof = JobProfile(job_id, float(base_duration_s), table, mem_demand_gb=mem)
    return with_solo_mps_rates(prof, interference)


DUMMY_TABLE = (1.0,) * len(SLICE_KINDS)


def dummy_profile(index: int) -> JobProfile:
    # Lightweight filler: insensitive to slice size, no memory footprint.
    return JobProfile(
        f"__dummy{index}",
        10.0,
        DUMMY_TABLE,
        mem_demand_gb=0,
        mps_rates=(1.0, 1.0, 1.0),
        is_dummy=True,
    )


def pad_to_seven(jobs: Sequence[JobProfile]) -> list[JobProfile]:
    if not 1 <= len(jobs) <= PROFILE_COLUMNS:
        raise ValueError(f"need 1..{PROFILE_COLUMNS} jobs to profile, got {len(jobs)}")
    return list(jobs) + [dummy_profile(i) for i in range(PROFILE_COLUMNS - len(jobs))]


def drop_dummies(jobs: Iterable[JobProfile]) -> list[JobProfile]:
    return [j for j in jobs if not j.is_dummy]


def interpolate_speed(table: Sequence[float], gpcs: float) -> float:
    """Piecewise-linear speed at a fractional GPC share, clamped to [1, 7] GPCs."""
    gpcs = min(max(gpcs, 1.0), 7.0)
    xs = GPC_SIZES[::-1]
    ys = list(table)[::-1]
    return float(np.interp(gpcs, xs, ys))


def mps_share_gpcs(level: int, n_jobs: int) -> float:
    return min(level / 100.0, 1.0 / n_jobs) * 7


def simulate_mps_rates(
    jobs: Sequence[JobProfile], level: int, interference: float = DEFAULT_INTERFERENCE
) -> dict[str, float]:
    """Rate of each co-located job under MPS at one active-thread level.

    Each job sees the GPC share ``min(level%, 100%/n)`` of the GPU, read off
    its speed table by linear interpolation, scaled by the interference factor.
    Dummy fillers are lightweight and do not count towards ``n``.
    """
    if level not in MPS_LEVELS:
        raise ValueError(f"MPS level must be one of {MPS_LEVELS}")
    if not 0 < interference <= 1:
        raise ValueError("interference must be in (0, 1]")
    n = max(1, sum(1 for j in jobs if not j.is_dummy))
    share = mps_share_gpcs(level, n)
    return {j.job_id: interference * interpolate_speed(j.speed_table, share) for j in jobs}


def with_solo_mps_rates(job: JobProfile, interference: float = DEFAULT_INTERFERENCE) -> JobProfile:
    rates = tuple(simulate_mps_rates([job], lvl, interference)[job.job_id] for lvl in MPS_LEVELS)
    return replace(job, mps_rates=rates)


@dataclass
class ProfileMatrix:
    values: np.ndarray
    kind: str
    job_ids: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in ("mps", "mig"):
            raise ValueError(f"unknown matrix kind {self.kind!r}")
        if self.values.shape != (3, PROFILE_COLUMNS) or len(self.job_ids) != PROFILE_COLUMNS:
            raise ValueError("profile matrices are 3x7 with 7 column labels")
        if np.any(self.values <= 0) or np.any(self.values > 1):
            raise ValueError("matrix entries must lie in (0, 1]")
        if not np.all(self.values.max(axis=0) == 1.0):
            raise ValueError("every column must be normalized to a maximum of 1")

    def column(self, job_id: str) -> np.ndarray:
        return self.values[:, self.job_ids.index(job_id)]


def normalize_columns(values: np.ndarray) -> np.ndarray:
    return values / values.max(axis=0, keepdims=True)


def build_mps_matrix(
    jobs: Sequence[JobProfile], interference: float = DEFAULT_INTERFERENCE
) -> ProfileMatrix:
    """Profile a padded 7-job mix at the three MPS levels."""
    if len(jobs) != PROFILE_COLUMNS:
        raise ValueError("MPS matrix needs exactly 7 (padded) jobs")
    rows = []
    for level in MPS_LEVELS:
        rates = simulate_mps_rates(jobs, level, interference)
        rows.append([rates[j.job_id] for j in jobs])
    return ProfileMatrix(normalize_columns(np.array(rows)), "mps", tuple(j.job_id for j in jobs))


def truth_mig_matrix(jobs: Sequence[JobProfile]) -> ProfileMatrix:
    values = np.array([[j.speed(k) for j in jobs] for k in MIG_ROWS])
    return ProfileMatrix(normalize_columns(values), "mig", tuple(j.job_id for j in jobs))


@dataclass(frozen=True)
class PredictorSpec:
    mode: str = "noisy"
    target_mae: float = DEFAULT_TARGET_MAE
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("oracle", "noisy"):
            raise ValueError(f"predictor mode must be 'oracle' or 'noisy', got {self.mode!r}")
        if not 0 <= self.target_mae <= 0.5:
            raise ValueError("target_mae must be in [0, 0.5]")

    @property
    def noise_sigma(self) -> float:
        # Half-normal magnitude with mean target_mae.
        return self.target_mae * math.sqrt(math.pi / 2)


def _perturb(truth: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add |N(0, sigma)| errors with random sign, reflecting to stay in (0, 1].

    Reflection flips the sign of an error that would leave the range, which
    keeps every error magnitude and therefore the mean absolute error intact.
    """
    mag = np.abs(rng.normal(0.0, sigma, size=truth.shape))
    sign = np.where(rng.random(truth.shape) < 0.5, -1.0, 1.0)
    out = truth + sign * mag
    flipped = truth - sign * mag
    bad = (out <= 0) | (out > 1)
    out = np.where(bad, flipped, out)
    return np.clip(out, 1e-3, 1.0)


def predict_mig_speeds(
    mps: ProfileMatrix,
    truth: Sequence[JobProfile],
    spec: PredictorSpec,
    rng: Optional[np.random.Generator] = None,
) -> ProfileMatrix:
    """Stand-in for the learned MPS-to-MIG translator.

    Oracle mode returns the true (7g, 4g, 3g) rows. Noisy mode perturbs the
    4g and 3g rows so their mean absolute error is ``spec.target_mae``; the 7g
    row is the normalization anchor and stays at 1, so columns keep max 1.
    ``rng`` lets a caller continue one stream across calls; by default a
    fresh generator is seeded from ``spec.rng_seed``.
    """
    if mps.kind != "mps":
        raise ValueError("predictor input must be an MPS matrix")
    if tuple(j.job_id for j in truth) != mps.job_ids:
        raise ValueError("truth profiles are not aligned with the MPS matrix columns")
    exact = truth_mig_matrix(truth)
    if spec.mode == "oracle" or spec.target_mae == 0:
        return exact
    rng = rng if rng is not None else np.random.default_rng(spec.rng_seed)
    values = exact.values.copy()
    values[1:] = _perturb(values[1:], spec.noise_sigma, rng)
    return ProfileMatrix(values, "mig", exact.job_ids)


def prediction_errors(pred: ProfileMatrix, truth: ProfileMatrix) -> np.ndarray:
    """Absolute errors over the predicted (non-anchor) rows."""
    return np.abs(pred.values[1:] - truth.values[1:]).ravel()


@dataclass
class LinearMap:
    """Least-squares map from (s7g, s4g, s3g, 1) to (s2g, s1g)."""

    coef: Optional[np.ndarray] = None  # shape (4, 2)
    dropped: tuple[int, ...] = field(default_factory=tuple)

    @property
    def fitted(self) -> bool:
        return self.coef is not None

    def predict(self, big: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("small-slice model has not been fitted")
        big = np.atleast_2d(np.asarray(big, dtype=float))
        design = np.column_stack([big, np.ones(len(big))])
        return design @ self.coef


MIN_TRAINING = 10


def fit_small_slice_model(training: Sequence[JobProfile]) -> LinearMap:
    """Fit the 2g/1g extrapolation on jobs with known full speed tables.

    A feature that is constant across the corpus duplicates the intercept
    (the 7g anchor is always 1), so it is folded into the intercept instead
    of making the fit rank-deficient. Any remaining collinearity is an error.
    """
    if len(training) < MIN_TRAINING:
        raise ValueError(f"need at least {MIN_TRAINING} training profiles, got {len(training)}")
    tables = np.array([j.speed_table for j in training])
    x, y = tables[:, :3], tables[:, 3:]
    keep = [i for i in range(3) if np.ptp(x[:, i]) > 0]
    dropped = tuple(i for i in range(3) if i not in keep)
    design = np.column_stack([x[:, keep], np.ones(len(x))])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ValueError("rank-deficient design matrix for small-slice model")
    sol, *_ = np.linalg.lstsq(design, y, rcond=None)
    coef = np.zeros((4, 2))
    coef[keep] = sol[:-1]
    coef[3] = sol[-1]
    return LinearMap(coef, dropped)


def extrapolate_small_slices(mig: ProfileMatrix, model: LinearMap) -> dict[str, dict[SliceKind, float]]:
    if mig.kind != "mig":
        raise ValueError("extrapolation needs a MIG matrix")
    pred = model.predict(mig.values.T)
    out = {}
    for job_id, big, (s2, s1) in zip(mig.job_ids, mig.values.T, pred):
        s3 = float(big[2])
        s2 = min(max(float(s2), 1e-6), s3)
        s1 = min(max(float(s1), 1e-6), s2)
        out[job_id] = {S2G: s2, S1G: s1}
    return out


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Coefficient of determination, averaged uniformly over output columns."""
    y_true = np.atleast_2d(np.asarray(y_true, dtype=float))
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=float))
    ss_res = ((y_true - y_pred) ** 2).sum(axis=0)
    ss_tot = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    return float(np.mean(1 - ss_res / ss_tot))


def synthetic_corpus(n: int, seed: int) -> list[JobProfile]:
    rng = np.random.default_rng(seed)
    return [random_profile(rng, f"train{i}", 1.0) for i in range(n)]


_SMALL_MODEL: Optional[LinearMap] = None


def default_small_slice_model() -> LinearMap:
    """Model fitted once on a fixed synthetic corpus of 3000 profiles."""
    global _SMALL_MODEL
    if _SMALL_MODEL is None:
        _SMALL_MODEL = fit_small_slice_model(synthetic_corpus(3000, seed=20220901))
    return _SMALL_MODEL


def estimate_table(
    mig: ProfileMatrix, small: Mapping[str, Mapping[SliceKind, float]], job_id: str
) -> tuple[float, ...]:
    """Full five-entry estimate for one job from predictor + extrapolation."""
    s7, s4, s3 = (float(v) for v in mig.column(job_id))
    return (s7, s4, s3, small[job_id][S2G], small[job_id][S1G])


# Profile record files ------------------------------------------------------

PROFILE_FIELDS = (
    "job_id", "base_duration_s", "mem_demand_gb", "qos_min_gpc",
    "f7", "f4", "f3", "f2", "f1", "mps100", "mps50", "mps14",
)


def profile_to_row(job: JobProfile) -> list[str]:
    qos = job.qos_min_slice.gpc_count if job.qos_min_slice else 0
    rates = job.mps_rates or (0.0, 0.0, 0.0)
    return [job.job_id, repr(job.base_duration_s), str(job.mem_demand_gb), str(qos)] + [
        repr(v) for v in job.speed_table
    ] + [repr(v) for v in rates]


def profile_from_row(row: Sequence[str]) -> JobProfile:
    if len(row) < len(PROFILE_FIELDS):
        raise ValueError(f"expected {len(PROFILE_FIELDS)} fields, got {len(row)}")
    qos = int(row[3])
    rates = tuple(float(v) for v in row[9:12])
    return JobProfile(
        job_id=row[0].strip(),
        base_duration_s=float(row[1]),
        mem_demand_gb=int(row[2]),
        qos_min_slice=slice_kind(qos) if qos else None,
        speed_table=tuple(float(v) for v in row[4:9]),
        mps_rates=() if all(r == 0 for r in rates) else rates,
        instances=int(row[12]) if len(row) > 12 and row[12].strip() else 1,
    )


def write_profiles(jobs: Iterable[JobProfile], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_FIELDS)
    for job in jobs:
        w.writerow(profile_to_row(job))
    Path(path).write_text(buf.getvalue())


def read_profiles(path: str | Path) -> list[JobProfile]:
    jobs = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0] == "job_id":
                continue
            try:
                jobs.append(profile_from_row(row))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return jobs
