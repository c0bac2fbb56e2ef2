from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

PHASES = ("queue", "mps", "checkpoint", "mig-run", "idle")


def compute_stp(running: Iterable[tuple[float, float]]) -> float:
    """System throughput: sum of q_i / p_i over co-running jobs.

    ``running`` holds (current speed, exclusive-GPU speed) pairs.
    """
    total = 0.0
    for q, p in running:
        if not p > 0:
            raise ValueError("exclusive speed p must be positive")
        total += q / p
    return total


def integrate_series(series: Sequence[tuple[float, float]], end: float) -> float:
    """Integral of a right-continuous step function given as (time, value) steps."""
    total = 0.0
    for (t0, v), (t1, _) in zip(series, list(series[1:]) + [(end, 0.0)]):
        total += v * (t1 - t0)
    return total


@dataclass
class MetricsReport:
    policy: str
    seed: int
    avg_jct_s: float
    jct_s: dict[str, float]
    makespan_s: float
    avg_stp: float
    stp_series: list[tuple[float, float]]
    breakdown: dict[str, float]
    breakdown_s: dict[str, float]
    first_start_s: float
    last_completion_s: float
    reconfigurations: int = 0
    migrations: int = 0
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stp_series"] = [list(p) for p in self.stp_series]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def comparable(self) -> dict:
        """Every field except the policy label."""
        d = self.to_dict()
        d.pop("policy")
        return d
