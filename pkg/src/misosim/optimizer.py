"""Per-GPU partition optimizer: pick the slice multiset and job-to-slice map
that maximizes the summed normalized speed of the co-located jobs."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .topology import (
    KIND_INDEX,
    MAX_SLICES,
    SLICE_KINDS,
    PartitionCatalog,
    PartitionConfig,
    SliceKind,
    default_catalog,
    slice_kind,
)

if TYPE_CHECKING:
    from .sim import OverheadSpec
    from .workload import JobTrace

TIE_TOL = 1e-12


class InfeasibleError(Exception):
    """No catalog partition can host every job on a slice it can run on."""


@dataclass(frozen=True)
class AssignmentVector:
    entries: tuple[tuple[str, SliceKind], ...]
    objective: float

    @property
    def partition(self) -> PartitionConfig:
        return PartitionConfig(k for _, k in self.entries)

    def slice_of(self, job_id: str) -> SliceKind:
        for jid, kind in self.entries:
            if jid == job_id:
                return kind
        raise KeyError(job_id)

    def as_dict(self) -> dict[str, SliceKind]:
        return dict(self.entries)

    def __str__(self) -> str:
        body = ", ".join(f"{j}->{k.short}" for j, k in self.entries)
        return f"{self.partition} [{body}] objective={self.objective:.6f}"


class _SizeTable:
    """All distinct slice orderings of every size-m catalog entry, pre-sorted
    by tie-break preference (fewer GPCs, then lexicographically smaller)."""

    def __init__(self, entries: Sequence[PartitionConfig], m: int):
        rows = set()
        for entry in entries:
            idx = [KIND_INDEX[k] for k in entry.slices]
            rows.update(itertools.permutations(idx))
        gpc = np.array([k.gpc_count for k in SLICE_KINDS])
        ordered = sorted(rows, key=lambda r: (int(gpc[list(r)].sum()), [int(gpc[i]) for i in r]))
        self.kind_idx = np.array(ordered, dtype=np.intp).reshape(-1, m)
        self.job_idx = np.arange(m)


class PartitionOptimizer:
    """Reusable optimizer bound to one catalog (the tables are built once)."""

    def __init__(self, catalog: Optional[PartitionCatalog] = None):
        self.catalog = catalog or default_catalog()
        self._tables = {
            m: _SizeTable(self.catalog.of_size(m), m)
            for m in range(1, MAX_SLICES + 1)
            if self.catalog.of_size(m)
        }

    def solve(self, job_ids: Sequence[str], speeds) -> AssignmentVector:
        """``speeds[i][k]`` is job i's effective speed on ``SLICE_KINDS[k]``
        (already zeroed where memory or QoS rule it out)."""
        m = len(job_ids)
        if not 1 <= m <= MAX_SLICES:
            raise ValueError(f"can co-locate 1..{MAX_SLICES} jobs per GPU, got {m}")
        table = self._tables.get(m)
        if table is None:
            raise InfeasibleError(f"catalog has no partition with {m} slices")
        s = np.asarray(speeds, dtype=float)
        if s.shape != (m, len(SLICE_KINDS)):
            raise ValueError(f"speed matrix must be {m}x{len(SLICE_KINDS)}")
        picked = s[table.job_idx, table.kind_idx]
        # A job placed on a slice it cannot run on is not an assignment.
        obj = np.where((picked > 0).all(axis=1), picked.sum(axis=1), -np.inf)
        best = obj.max()
        if not best > 0:
            raise InfeasibleError("every candidate leaves some job on an unusable slice")
        row = int(np.flatnonzero(obj >= best - TIE_TOL)[0])
        kinds = [SLICE_KINDS[i] for i in table.kind_idx[row]]
        return AssignmentVector(tuple(zip(job_ids, kinds)), float(obj[row]))


_DEFAULT: Optional[PartitionOptimizer] = None


def default_optimizer() -> PartitionOptimizer:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PartitionOptimizer()
    return _DEFAULT


def optimize_partition(jobs, catalog: Optional[PartitionCatalog] = None) -> AssignmentVector:
    """Best assignment for ``jobs``, a sequence of ``(job_id, speed)`` pairs.

    ``speed`` may be a callable over ``SliceKind``, a mapping keyed by
    ``SliceKind``, or a 5-sequence ordered 7g..1g.
    """
    opt = default_optimizer() if catalog is None else PartitionOptimizer(catalog)
    ids = [jid for jid, _ in jobs]
    return opt.solve(ids, [_as_row(f) for _, f in jobs])


def _as_row(f) -> list[float]:
    if callable(f):
        return [float(f(k)) for k in SLICE_KINDS]
    if isinstance(f, dict):
        return [float(f.get(k, 0.0)) for k in SLICE_KINDS]
    return [float(v) for v in f]


def static_candidates(trace: "JobTrace", catalog: Optional[PartitionCatalog] = None):
    """Catalog entries on which every job in the trace has some usable slice."""
    catalog = catalog or default_catalog()
    out = []
    for entry in catalog:
        if all(any(job.fits(k) for k in entry.slices) for job, _ in trace.jobs):
            out.append(entry)
    return out


def static_partition_table(
    trace: "JobTrace",
    cluster_size: int,
    overheads: Optional["OverheadSpec"] = None,
    catalog: Optional[PartitionCatalog] = None,
) -> list[tuple[PartitionConfig, float]]:
    """Average JCT of a full OptSta simulation for every catalog entry.

    Entries that cannot host some job in the trace get ``inf``.
    """
    from .sim import OverheadSpec, run_simulation

    overheads = overheads or OverheadSpec()
    catalog = catalog or default_catalog()
    usable = set(static_candidates(trace, catalog))
    rows = []
    for entry in catalog:
        if entry not in usable:
            rows.append((entry, float("inf")))
            continue
        report = run_simulation(
            trace, cluster_size, "optsta", overheads=overheads, static_partition=entry
        )
        rows.append((entry, report.avg_jct_s))
    return rows


def best_static_partition(
    trace: "JobTrace",
    cluster_size: int,
    overheads: Optional["OverheadSpec"] = None,
    catalog: Optional[PartitionCatalog] = None,
) -> PartitionConfig:
    """The single partition that, applied to every GPU, minimizes average JCT."""
    table = static_partition_table(trace, cluster_size, overheads, catalog)
    return min(table, key=lambda row: row[1])[0]


def parse_slice_vector(text: str) -> list[SliceKind]:
    return [slice_kind(tok.strip()) for tok in text.split(",") if tok.strip()]
