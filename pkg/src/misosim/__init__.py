"""Simulator and optimizer for MIG-partitioned GPU cluster scheduling."""

from .metrics import MetricsReport, compute_stp
from .optimizer import AssignmentVector, InfeasibleError, best_static_partition, optimize_partition
from .profiles import JobProfile, PredictorSpec
from .sim import POLICIES, OverheadSpec, run_simulation
from .topology import SLICE_KINDS, PartitionCatalog, PartitionConfig, SliceKind, default_catalog, max_spare_slice
from .workload import JobTrace, TraceSpec, generate_trace, load_trace, save_trace

__all__ = [
    "AssignmentVector",
    "InfeasibleError",
    "JobProfile",
    "JobTrace",
    "MetricsReport",
    "OverheadSpec",
    "POLICIES",
    "PartitionCatalog",
    "PartitionConfig",
    "PredictorSpec",
    "SLICE_KINDS",
    "SliceKind",
    "TraceSpec",
    "best_static_partition",
    "compute_stp",
    "default_catalog",
    "generate_trace",
    "load_trace",
    "max_spare_slice",
    "optimize_partition",
    "run_simulation",
    "save_trace",
]
