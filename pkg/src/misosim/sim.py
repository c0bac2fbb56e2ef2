"""Discrete-event simulation of a MIG-capable GPU cluster.

Jobs progress as a fluid: each holds a remaining amount of normalized work
(seconds on an exclusive 7g slice) and a current rate. Any rate change
advances the job to the current time and reschedules its completion.
"""

from __future__ import annotations

import bisect
import heapq
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import IO, Optional, Sequence

import numpy as np

from .metrics import PHASES, MetricsReport, integrate_series
from .optimizer import TIE_TOL, AssignmentVector, InfeasibleError, PartitionOptimizer
from .profiles import (
    MPS_LEVELS,
    JobProfile,
    PredictorSpec,
    build_mps_matrix,
    default_small_slice_model,
    estimate_table,
    extrapolate_small_slices,
    pad_to_seven,
    predict_mig_speeds,
    simulate_mps_rates,
)
from .topology import (
    MAX_SLICES,
    SLICE_KINDS,
    PartitionCatalog,
    PartitionConfig,
    SliceKind,
    default_catalog,
    max_spare_slice,
    slice_kind,
)
from .workload import JobTrace

POLICIES = ("nopart", "optsta", "oracle", "miso")
DEBUG_ENV = "MISOSIM_DEBUG"

ARRIVAL = "arrival"
MPS_END = "mps-phase-end"
RECONFIG_DONE = "reconfig-done"
CHECKPOINT_DONE = "checkpoint-done"
COMPLETION = "completion"
ADMIT_RETRY = "admission-retry"

_PRIORITY = {COMPLETION: 0, ARRIVAL: 1}


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OverheadSpec:
    mig_reconfig_s: float = 4.0
    checkpoint_restart_s: float = 30.0
    mps_window_s: float = 10.0
    interference: float = 0.8

    def __post_init__(self):
        for name in ("mig_reconfig_s", "checkpoint_restart_s", "mps_window_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.interference <= 1:
            raise ValueError("interference must be in (0, 1]")

    @classmethod
    def zero(cls, interference: float = 0.8) -> "OverheadSpec":
        return cls(0.0, 0.0, 0.0, interference)


class _Job:
    __slots__ = (
        "id", "profile", "arrival", "remaining", "rate", "t_last", "phase", "acct",
        "work", "version", "start", "done", "gpu", "slot", "estimate", "has_run",
        "needs_profile", "root", "reprofiled", "migrating", "segments", "seq",
    )

    def __init__(self, job_id: str, profile: JobProfile, arrival: float, seq: int):
        self.id = job_id
        self.profile = profile
        self.arrival = arrival
        self.seq = seq
        self.remaining = profile.base_duration_s
        self.rate = 0.0
        self.t_last = arrival
        self.phase = "queue"
        self.acct = dict.fromkeys(PHASES, 0.0)
        self.work = 0.0
        self.version = 0
        self.start: Optional[float] = None
        self.done: Optional[float] = None
        self.gpu: Optional[_Gpu] = None
        self.slot: Optional[int] = None
        self.estimate: Optional[tuple[float, ...]] = None
        self.has_run = False
        self.needs_profile = True
        self.root: Optional[str] = None
        self.reprofiled = False
        self.migrating = False
        self.segments: list[tuple[float, float, float]] = []


class _Gpu:
    __slots__ = ("id", "mode", "jobs", "assignment", "partition", "version", "mps_idx",
                 "dirty", "slots", "pending")

    def __init__(self, gpu_id: int):
        self.id = gpu_id
        self.mode = "mig"
        self.jobs: list[_Job] = []
        self.assignment: dict[str, SliceKind] = {}
        self.partition: Optional[PartitionConfig] = None
        self.version = 0
        self.mps_idx = -1
        self.dirty = False
        self.slots: list[list] = []  # static policies: [kind, occupant]
        self.pending: Optional[AssignmentVector] = None


@lru_cache(maxsize=4096)
def _spare(needs: tuple[tuple[int, int], ...]) -> Optional[SliceKind]:
    return max_spare_slice(None, [m for m, _ in needs], [q for _, q in needs])


class Simulation:
    def __init__(
        self,
        trace: JobTrace,
        cluster_size: int,
        policy: str,
        overheads: Optional[OverheadSpec] = None,
        predictor: Optional[PredictorSpec] = None,
        static_partition: Optional[PartitionConfig] = None,
        *,
        catalog: Optional[PartitionCatalog] = None,
        debug: bool = False,
        event_log: Optional[IO[str]] = None,
        reprofile_threshold: Optional[float] = None,
    ):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
        if cluster_size < 1:
            raise ValueError("cluster_size must be >= 1")
        if policy == "optsta" and static_partition is None:
            raise ValueError("policy 'optsta' needs a static_partition")
        self.trace = trace
        self.policy = policy
        self.ov = overheads or OverheadSpec()
        self.pred = predictor or PredictorSpec()
        self.catalog = catalog or default_catalog()
        self.optimizer = PartitionOptimizer(self.catalog) if catalog else _default_optimizer()
        self.debug = debug
        self.log = event_log
        self.reprofile_threshold = reprofile_threshold
        self.rng = np.random.default_rng(self.pred.rng_seed)

        self.now = 0.0
        self.heap: list = []
        self.seq = 0
        self.queue: list[tuple[tuple[float, int], _Job]] = []
        self.held: dict[str, list[_Job]] = {}
        self.active: dict[str, _Job] = {}
        self.finished: list[_Job] = []
        self.stp_series: list[tuple[float, float]] = []
        self.retry_at: Optional[float] = None
        self.reconfigs = 0
        self.migrations = 0
        self.gpus = [_Gpu(i) for i in range(cluster_size)]

        self.static = policy in ("nopart", "optsta")
        if self.static:
            part = PartitionConfig([7]) if policy == "nopart" else static_partition
            for g in self.gpus:
                g.partition = part
                g.slots = [[k, None] for k in part.slices]
            for job in trace.profiles:
                if not any(job.fits(k) for k in part.slices):
                    raise ValueError(f"job {job.job_id} fits no slice of static partition {part}")

        self.jobs: list[_Job] = []
        for job, t in trace.jobs:
            for k in range(job.instances):
                jid = job.job_id if k == 0 else f"{job.job_id}#{k}"
                js = _Job(jid, job, t, len(self.jobs))
                if k:
                    js.root = job.job_id
                self.jobs.append(js)
        for js in self.jobs:
            self._push(js.arrival, ARRIVAL, job=js)

    # -- event plumbing -------------------------------------------------

    def _push(self, t: float, kind: str, *, gpu: Optional[_Gpu] = None, job: Optional[_Job] = None,
              version: int = 0) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, _PRIORITY.get(kind, 2), self.seq, kind, gpu, job, version))

    def _emit(self, gpu, kind: str, payload: str) -> None:
        if self.log is not None:
            g = "-" if gpu is None else str(gpu.id)
            self.log.write(f"{self.now!r}\t{g}\t{kind}\t{payload}\n")

    def _retry(self) -> None:
        if self.retry_at != self.now:
            self.retry_at = self.now
            self._push(self.now, ADMIT_RETRY)

    def _set_rate(self, job: _Job, rate: float, phase: str) -> None:
        dt = self.now - job.t_last
        job.acct[job.phase] += dt
        if job.rate:
            done = job.rate * dt
            job.remaining -= done
            job.work += done
            if self.debug and dt > 0:
                job.segments.append((job.t_last, self.now, job.rate))
        job.t_last = self.now
        job.rate = rate
        job.phase = phase
        job.version += 1
        if rate > 0:
            job.has_run = True
            eta = self.now + max(job.remaining, 0.0) / rate
            self._push(eta, COMPLETION, job=job, version=job.version)

    def _record_stp(self) -> None:
        stp = sum(j.rate for j in self.active.values())
        if self.stp_series and self.stp_series[-1][0] == self.now:
            self.stp_series[-1] = (self.now, stp)
        elif not self.stp_series or self.stp_series[-1][1] != stp:
            self.stp_series.append((self.now, stp))

    # -- main loop -----------------------------------------------------

    def run(self) -> MetricsReport:
        while self.heap:
            t, _, _, kind, gpu, job, version = heapq.heappop(self.heap)
            self.now = t
            if kind == COMPLETION:
                if job.version != version or job.done is not None:
                    continue
                self._emit(job.gpu, kind, job.id)
                self._on_completion(job)
            elif kind == ARRIVAL:
                self._emit(None, kind, job.id)
                self._on_arrival(job)
            elif kind == ADMIT_RETRY:
                self.retry_at = None
                self._emit(None, kind, str(len(self.queue)))
                self._on_retry()
            elif gpu is not None and gpu.version != version:
                continue
            elif kind == CHECKPOINT_DONE:
                self._on_checkpoint_done(gpu, job)
            elif kind == MPS_END:
                self._emit(gpu, kind, str(MPS_LEVELS[gpu.mps_idx]))
                self._next_mps_level(gpu, gpu.mps_idx + 1)
            elif kind == RECONFIG_DONE:
                self._on_reconfig_done(gpu)
            if self.active or self.stp_series:
                self._record_stp()
        if len(self.finished) != len(self.jobs):
            stuck = [j.id for j in self.jobs if j.done is None]
            raise SimulationError(f"simulation ended with unfinished jobs {stuck[:5]}")
        return self._report()

    # -- common handlers -------------------------------------------------

    def _enqueue(self, job: _Job) -> None:
        bisect.insort(self.queue, ((job.arrival, job.seq), job), key=lambda e: e[0])

    def _on_arrival(self, job: _Job) -> None:
        if self.policy == "miso" and job.root is not None:
            root = next((j for j in self.jobs if j.id == job.root), None)
            if root is not None and root.estimate is None and root.done is None:
                self.held.setdefault(job.root, []).append(job)
                return
            if root is not None and root.estimate is not None:
                job.estimate = root.estimate
                job.needs_profile = False
        self._enqueue(job)
        self._admit()

    def _on_retry(self) -> None:
        self._admit()
        if not self.static:
            for gpu in self.gpus:
                if gpu.dirty and gpu.mode == "mig":
                    self._completion_repartition(gpu)

    def _start(self, job: _Job, gpu: _Gpu) -> None:
        self.queue.pop(0)
        if job.start is None:
            job.start = self.now
        job.gpu = gpu
        self.active[job.id] = job
        self._emit(gpu, "admit", job.id)

    def _on_completion(self, job: _Job) -> None:
        self._set_rate(job, 0.0, job.phase)
        job.remaining = 0.0
        job.done = self.now
        del self.active[job.id]
        self.finished.append(job)
        if self.debug:
            self._check_job(job)
        gpu = job.gpu
        if self.static:
            self._static_release(job, gpu)
        else:
            self._dynamic_release(job, gpu)
        self._release_held(job.id)
        if self.queue or (not self.static and gpu.dirty):
            self._retry()

    def _on_checkpoint_done(self, gpu: _Gpu, job: Optional[_Job]) -> None:
        if job is not None:
            # Static-policy migration finished restoring.
            self._emit(gpu, CHECKPOINT_DONE, job.id)
            job.migrating = False
            kind = gpu.slots[job.slot][0]
            self._set_rate(job, job.profile.effective_speed(kind), "mig-run")
            return
        self._emit(gpu, CHECKPOINT_DONE, ",".join(j.id for j in gpu.jobs))
        self._next_mps_level(gpu, 0)

    # -- static policies (NoPart, OptSta) ---------------------------------

    def _admit(self) -> None:
        if self.static:
            self._admit_static()
        else:
            self._admit_dynamic()

    def _admit_static(self) -> None:
        while self.queue:
            job = self.queue[0][1]
            best = None
            for gpu in self.gpus:
                for idx, (kind, occ) in enumerate(gpu.slots):
                    if occ is None and job.profile.fits(kind):
                        key = (-kind.gpc_count, gpu.id, idx)
                        if best is None or key < best[0]:
                            best = (key, gpu, idx)
            if best is None:
                return
            _, gpu, idx = best
            self._start(job, gpu)
            gpu.slots[idx][1] = job
            job.slot = idx
            kind = gpu.slots[idx][0]
            if self.debug:
                assert job.profile.fits(kind), "admission violated memory/QoS minimum"
            self._set_rate(job, job.profile.effective_speed(kind), "mig-run")

    def _static_release(self, job: _Job, gpu: _Gpu) -> None:
        freed = job.slot
        gpu.slots[freed][1] = None
        if self.policy != "optsta":
            return
        kind = gpu.slots[freed][0]
        best = None
        for idx, (k, occ) in enumerate(gpu.slots):
            if occ is None or occ.migrating or k.gpc_count >= kind.gpc_count:
                continue
            if not occ.profile.fits(kind):
                continue
            gain = occ.profile.effective_speed(kind) - occ.profile.effective_speed(k)
            if gain > 0 and (best is None or gain > best[0]):
                best = (gain, idx, occ)
        if best is None:
            return
        _, old, mover = best
        gpu.slots[old][1] = None
        gpu.slots[freed][1] = mover
        mover.slot = freed
        self.migrations += 1
        self._emit(gpu, "migrate", f"{mover.id}:{gpu.slots[old][0].short}->{kind.short}")
        if self.ov.checkpoint_restart_s > 0:
            mover.migrating = True
            self._set_rate(mover, 0.0, "checkpoint")
            self._push(self.now + self.ov.checkpoint_restart_s, CHECKPOINT_DONE, gpu=gpu,
                       job=mover, version=gpu.version)
        else:
            self._set_rate(mover, mover.profile.effective_speed(kind), "mig-run")

    # -- dynamic policies (MISO, Oracle) ----------------------------------

    def _gpu_spare(self, gpu: _Gpu) -> Optional[SliceKind]:
        if len(gpu.jobs) >= MAX_SLICES:
            return None
        needs = tuple(sorted(
            (j.profile.mem_demand_gb, j.profile.qos_min_slice.gpc_count if j.profile.qos_min_slice else 0)
            for j in gpu.jobs
        ))
        if self.catalog is default_catalog():
            return _spare(needs)
        return max_spare_slice(None, [m for m, _ in needs], [q for _, q in needs], self.catalog)

    def _admit_dynamic(self) -> None:
        while self.queue:
            job = self.queue[0][1]
            target = None
            for gpu in self.gpus:
                if gpu.mode != "mig":
                    continue
                spare = self._gpu_spare(gpu)
                if spare is None or not job.profile.fits(spare):
                    continue
                if target is None or len(gpu.jobs) < len(target.jobs):
                    target = gpu
            if target is None:
                return
            self._start(job, target)
            target.jobs.append(job)
            target.dirty = False
            if self.policy == "oracle":
                job.estimate = job.profile.speed_table
                job.needs_profile = False
            if self.policy == "miso" and job.needs_profile:
                self._begin_profiling(target, fresh=job)
            else:
                self._begin_reconfig(target)

    def _begin_profiling(self, gpu: _Gpu, fresh: Optional[_Job]) -> None:
        gpu.mode = "mps-profiling"
        gpu.version += 1
        residents = [j for j in gpu.jobs if j is not fresh]
        if residents and self.ov.checkpoint_restart_s > 0:
            for j in gpu.jobs:
                self._set_rate(j, 0.0, "checkpoint" if j.has_run else "idle")
            self._push(self.now + self.ov.checkpoint_restart_s, CHECKPOINT_DONE, gpu=gpu,
                       version=gpu.version)
        else:
            self._next_mps_level(gpu, 0)

    def _mps_rates(self, gpu: _Gpu, level_idx: int) -> None:
        rates = simulate_mps_rates([j.profile for j in gpu.jobs], MPS_LEVELS[level_idx],
                                   self.ov.interference)
        for j in gpu.jobs:
            self._set_rate(j, rates[j.profile.job_id], "mps")

    def _next_mps_level(self, gpu: _Gpu, idx: int) -> None:
        if idx < len(MPS_LEVELS) and self.ov.mps_window_s > 0:
            gpu.mps_idx = idx
            self._mps_rates(gpu, idx)
            self._push(self.now + self.ov.mps_window_s, MPS_END, gpu=gpu, version=gpu.version)
            return
        gpu.mps_idx = -1
        self._predict(gpu)
        self._begin_reconfig(gpu)

    def _predict(self, gpu: _Gpu) -> None:
        """Refresh the speed estimates of every job on ``gpu`` from one MPS profile."""
        profiles = [j.profile for j in gpu.jobs]
        # Instances of one job share a profile; the matrix wants unique columns.
        uniq = list({p.job_id: p for p in profiles}.values())
        padded = pad_to_seven(uniq)
        mps = build_mps_matrix(padded, self.ov.interference)
        mig = predict_mig_speeds(mps, padded, self.pred, rng=self.rng)
        if self.pred.mode == "oracle":
            tables = {p.job_id: p.speed_table for p in uniq}
        else:
            small = extrapolate_small_slices(mig, default_small_slice_model())
            tables = {p.job_id: estimate_table(mig, small, p.job_id) for p in uniq}
        for j in gpu.jobs:
            j.estimate = tables[j.profile.job_id]
            j.needs_profile = False
            self._release_held(j.id)

    def _release_held(self, root_id: str) -> None:
        waiting = self.held.pop(root_id, None)
        if not waiting:
            return
        root = next(j for j in self.jobs if j.id == root_id)
        for inst in waiting:
            if root.estimate is not None:
                inst.estimate = root.estimate
                inst.needs_profile = False
            self._enqueue(inst)
        self._retry()

    def _solve(self, jobs: Sequence[_Job]) -> AssignmentVector:
        speeds = [j.profile.effective_table(j.estimate) for j in jobs]
        try:
            return self.optimizer.solve([j.id for j in jobs], speeds)
        except InfeasibleError as exc:
            raise SimulationError(f"no feasible partition for {[j.id for j in jobs]}: {exc}") from None

    def _begin_reconfig(self, gpu: _Gpu, plan: Optional[AssignmentVector] = None) -> None:
        gpu.pending = plan or self._solve(gpu.jobs)
        gpu.mode = "reconfiguring"
        gpu.version += 1
        restore = any(j.has_run for j in gpu.jobs)
        delay = self.ov.mig_reconfig_s + (self.ov.checkpoint_restart_s if restore else 0.0)
        for j in gpu.jobs:
            self._set_rate(j, 0.0, "checkpoint" if j.has_run else "idle")
        self._push(self.now + delay, RECONFIG_DONE, gpu=gpu, version=gpu.version)

    def _on_reconfig_done(self, gpu: _Gpu) -> None:
        plan = gpu.pending
        gpu.pending = None
        gpu.mode = "mig"
        gpu.assignment = plan.as_dict()
        gpu.partition = plan.partition
        self.reconfigs += 1
        self._emit(gpu, RECONFIG_DONE, " ".join(f"{j}:{k.short}" for j, k in plan.entries))
        for j in gpu.jobs:
            kind = gpu.assignment[j.id]
            self._set_rate(j, j.profile.effective_speed(kind), "mig-run")
        if self.debug:
            self._check_gpu(gpu)
        if self._wants_reprofile(gpu):
            self._begin_profiling(gpu, fresh=None)
            return
        if self.queue:
            self._retry()

    def _wants_reprofile(self, gpu: _Gpu) -> bool:
        """Phase-change hook: re-profile when a job runs far from its estimate."""
        if self.reprofile_threshold is None or self.policy != "miso":
            return False
        trigger = False
        for j in gpu.jobs:
            if j.reprofiled:
                continue
            kind = gpu.assignment[j.id]
            expected = j.profile.effective_table(j.estimate)[SLICE_KINDS.index(kind)]
            observed = j.profile.effective_speed(kind)
            if expected > 0 and abs(observed - expected) / expected > self.reprofile_threshold:
                j.reprofiled = True
                trigger = True
        return trigger

    def _dynamic_release(self, job: _Job, gpu: _Gpu) -> None:
        gpu.jobs.remove(job)
        gpu.assignment.pop(job.id, None)
        if gpu.mode == "mig":
            gpu.dirty = True
            return
        # Only MPS progress can finish a job mid-transition.
        if not gpu.jobs:
            gpu.version += 1
            gpu.mode = "mig"
            gpu.partition = None
            gpu.mps_idx = -1
            self._retry()
        elif gpu.mps_idx >= 0:
            self._mps_rates(gpu, gpu.mps_idx)

    def _completion_repartition(self, gpu: _Gpu) -> None:
        gpu.dirty = False
        if not gpu.jobs:
            gpu.partition = None
            gpu.assignment = {}
            self._emit(gpu, "shrink", "")
            return
        kept = [gpu.assignment[j.id] for j in gpu.jobs]
        keep_part = PartitionConfig(kept)
        keep_obj = sum(
            j.profile.effective_table(j.estimate)[SLICE_KINDS.index(k)] for j, k in zip(gpu.jobs, kept)
        )
        plan = self._solve(gpu.jobs)
        if keep_part not in self.catalog or plan.objective > keep_obj + TIE_TOL:
            self._begin_reconfig(gpu, plan)
        else:
            # Destroying the emptied instance leaves the others running.
            gpu.partition = keep_part
            self._emit(gpu, "shrink", keep_part.label())
            if self.debug:
                self._check_gpu(gpu)

    # -- invariants ----------------------------------------------------

    def _check_job(self, job: _Job) -> None:
        base = job.profile.base_duration_s
        assert abs(job.work - base) <= 1e-6 * base, f"{job.id}: work {job.work} != {base}"
        jct = job.done - job.arrival
        total = math.fsum(job.acct.values())
        assert abs(total - jct) <= 1e-9 * max(jct, 1.0), f"{job.id}: phases {total} != jct {jct}"

    def _check_gpu(self, gpu: _Gpu) -> None:
        assert len(gpu.assignment) == len(gpu.jobs), f"gpu {gpu.id}: slice bubble or unplaced job"
        assert gpu.partition in self.catalog, f"gpu {gpu.id}: partition {gpu.partition} not in catalog"
        assert sorted(k.gpc_count for k in gpu.assignment.values()) == sorted(gpu.partition.gpcs)
        for j in gpu.jobs:
            assert j.profile.fits(gpu.assignment[j.id]), f"{j.id}: placed below its memory/QoS minimum"

    # -- metrics -------------------------------------------------------

    def _report(self) -> MetricsReport:
        jobs = sorted(self.jobs, key=lambda j: j.seq)
        jct = {j.id: j.done - j.arrival for j in jobs}
        first = min(j.start for j in jobs)
        last = max(j.done for j in jobs)
        makespan = last - first
        series = [(t, v) for t, v in self.stp_series if t >= first]
        area = integrate_series(series, last)
        total_jct = math.fsum(jct.values())
        per_phase = {p: math.fsum(j.acct[p] for j in jobs) for p in PHASES}
        return MetricsReport(
            policy=self.policy,
            seed=self.trace.spec.seed,
            avg_jct_s=total_jct / len(jobs),
            jct_s=jct,
            makespan_s=makespan,
            avg_stp=area / makespan if makespan > 0 else 0.0,
            stp_series=series,
            breakdown={p: (v / total_jct if total_jct > 0 else 0.0) for p, v in per_phase.items()},
            breakdown_s={p: v / len(jobs) for p, v in per_phase.items()},
            first_start_s=first,
            last_completion_s=last,
            reconfigurations=self.reconfigs,
            migrations=self.migrations,
        )


_OPT: Optional[PartitionOptimizer] = None


def _default_optimizer() -> PartitionOptimizer:
    global _OPT
    if _OPT is None:
        _OPT = PartitionOptimizer(default_catalog())
    return _OPT


def run_simulation(
    trace: JobTrace,
    cluster_size: int,
    policy: str,
    overheads: Optional[OverheadSpec] = None,
    predictor: Optional[PredictorSpec] = None,
    static_partition: Optional[PartitionConfig] = None,
    **kwargs,
) -> MetricsReport:
    """Run ``trace`` to completion under one scheduling policy.

    Keyword options: ``debug`` (assert invariants as the run proceeds;
    defaults to on when ``MISOSIM_DEBUG`` is set to a non-zero value),
    ``event_log`` (text stream receiving one tab-separated line per event),
    ``reprofile_threshold`` and ``catalog``.
    """
    kwargs.setdefault("debug", os.environ.get(DEBUG_ENV, "") not in ("", "0"))
    if isinstance(static_partition, str):
        static_partition = PartitionConfig(slice_kind(t) for t in static_partition.split(","))
    sim = Simulation(trace, cluster_size, policy, overheads, predictor, static_partition, **kwargs)
    return sim.run()
