import functools
import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from misosim.optimizer import (
    TIE_TOL,
    InfeasibleError,
    PartitionOptimizer,
    best_static_partition,
    optimize_partition,
    static_candidates,
    static_partition_table,
)
from misosim.profiles import JobProfile, power_law_table
from misosim.topology import KIND_INDEX, S1G, S3G, S7G, PartitionConfig, default_catalog
from misosim.workload import JobTrace, TraceSpec, single_job_trace


@functools.lru_cache(maxsize=None)
def orderings(m):
    out = []
    for entry in default_catalog():
        if len(entry) == m:
            out.extend(set(itertools.permutations(entry.slices)))
    return out


def brute_force(tables):
    """Best objective over every catalog entry of size m and every ordering."""
    best = -np.inf
    for perm in orderings(len(tables)):
        vals = [t[KIND_INDEX[k]] for t, k in zip(tables, perm)]
        if min(vals) > 0:
            best = max(best, sum(vals))
    return best


def random_tables(rng, m, p_zero=0.0):
    out = []
    for _ in range(m):
        t = np.sort(rng.uniform(0.01, 1.0, 4))[::-1]
        row = [1.0] + list(t)
        if p_zero and rng.random() < p_zero:
            cut = int(rng.integers(1, 5))
            row = row[:cut] + [0.0] * (5 - cut)
        out.append(tuple(row))
    return out


def solve(tables):
    return optimize_partition([(f"j{i}", t) for i, t in enumerate(tables)])


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(2024)
    cat = default_catalog()
    checked = 0
    while checked < 1000:
        m = int(rng.integers(1, 8))
        tables = random_tables(rng, m, p_zero=0.3)
        expected = brute_force(tables)
        if expected == -np.inf:
            with pytest.raises(InfeasibleError):
                solve(tables)
            continue
        got = solve(tables)
        assert abs(got.objective - expected) <= 1e-12
        assert got.partition in cat
        assert len(got.entries) == m
        recomputed = sum(tables[int(jid[1:])][KIND_INDEX[k]] for jid, k in got.entries)
        assert abs(recomputed - got.objective) <= 1e-12
        checked += 1


def test_two_job_example():
    f1 = (1, 0.9, 0.85, 0.5, 0.3)
    f2 = (1, 0.6, 0.5, 0.4, 0.35)
    got = optimize_partition([("J1", f1), ("J2", f2)])
    assert got.partition == PartitionConfig([3, 3])
    assert got.slice_of("J1") is S3G and got.slice_of("J2") is S3G
    assert got.objective == pytest.approx(1.35, abs=1e-12)


def test_seven_linear_jobs():
    lin = tuple(g / 7 for g in (7, 4, 3, 2, 1))
    got = solve([lin] * 7)
    assert got.partition == PartitionConfig([1] * 7)
    assert got.objective == pytest.approx(1.0, abs=1e-12)


def test_single_job_gets_full_gpu():
    got = solve([power_law_table(0.3)])
    assert got.partition == PartitionConfig([7])
    assert got.objective == 1.0


def test_ties_prefer_fewer_gpcs():
    # Insensitive to slice size: every singleton scores 1, the smallest wins.
    assert solve([(1.0,) * 5]).partition == PartitionConfig([1])


def test_callable_and_mapping_inputs():
    t = power_law_table(0.6)
    by_seq = optimize_partition([("a", t), ("b", t)])
    by_fn = optimize_partition([("a", lambda k: t[KIND_INDEX[k]]), ("b", {k: t[i] for k, i in KIND_INDEX.items()})])
    assert by_seq == by_fn


def test_oom_slice_avoided():
    rng = np.random.default_rng(7)
    for _ in range(300):
        m = int(rng.integers(2, 7))
        tables = random_tables(rng, m)
        oom = list(tables[0])
        oom[KIND_INDEX[S1G]] = 0.0
        tables[0] = tuple(oom)
        if brute_force(tables) > 0:
            assert solve(tables).slice_of("j0") is not S1G


@settings(max_examples=200)
@given(st.integers(1, 7), st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 2.0, 3.7]))
def test_scale_invariance(m, seed, c):
    tables = random_tables(np.random.default_rng(seed), m)
    a = solve(tables)
    b = solve([tuple(c * v for v in t) for t in tables])
    assert a.entries == b.entries


@settings(max_examples=200)
@given(st.integers(2, 7), st.integers(0, 2**32 - 1))
def test_swap_optimal(m, seed):
    tables = random_tables(np.random.default_rng(seed), m)
    got = solve(tables)
    kinds = [k for _, k in got.entries]
    for i, j in itertools.combinations(range(m), 2):
        before = tables[i][KIND_INDEX[kinds[i]]] + tables[j][KIND_INDEX[kinds[j]]]
        after = tables[i][KIND_INDEX[kinds[j]]] + tables[j][KIND_INDEX[kinds[i]]]
        assert after <= before + TIE_TOL


def test_runtime_under_a_millisecond():
    opt = PartitionOptimizer()
    rng = np.random.default_rng(1)
    cases = [random_tables(rng, m) for m in range(1, 8) for _ in range(50)]
    ids = [f"j{i}" for i in range(7)]
    worst = 0.0
    for tables in cases:
        t0 = time.perf_counter()
        opt.solve(ids[: len(tables)], tables)
        worst = max(worst, time.perf_counter() - t0)
    assert worst < 1e-3


def test_infeasible_and_bad_sizes():
    big = (1.0, 0.0, 0.0, 0.0, 0.0)
    with pytest.raises(InfeasibleError):
        solve([big, big])
    with pytest.raises(ValueError):
        solve([(1.0,) * 5] * 8)
    with pytest.raises(ValueError):
        optimize_partition([])


def test_assignment_vector_str():
    got = optimize_partition([("a", (1, 0.9, 0.85, 0.5, 0.3))])
    assert str(got) == "{7g} [a->7g] objective=1.000000"


def _trace(tables, durations, arrivals, mem=5):
    jobs = [
        (JobProfile(f"j{i}", d, t, mem_demand_gb=mem), a)
        for i, (t, d, a) in enumerate(zip(tables, durations, arrivals))
    ]
    return JobTrace(jobs, TraceSpec(job_count=len(jobs), max_duration_s=max(durations)))


def test_static_single_job_is_full_gpu():
    trace = single_job_trace(JobProfile("solo", 500.0, power_law_table(0.5)))
    assert best_static_partition(trace, 1) == PartitionConfig([7])


def test_static_candidates_include_deployment_example():
    trace = _trace([power_law_table(0.5)] * 3, [100.0] * 3, [0.0, 1.0, 2.0])
    table = static_partition_table(trace, 1)
    labels = [p.label() for p, _ in table]
    assert "4,2,1" in labels
    chosen = best_static_partition(trace, 1)
    assert dict(table)[chosen] == min(j for _, j in table)


def test_static_candidates_respect_memory():
    trace = _trace([power_law_table(0.5)] * 2, [100.0] * 2, [0.0, 1.0], mem=20)
    for entry in static_candidates(trace):
        assert any(k.memory_gb >= 20 for k in entry.slices)
    rows = dict(static_partition_table(trace, 1))
    assert rows[PartitionConfig([1] * 7)] == float("inf")
    assert rows[PartitionConfig([7])] < float("inf")


def test_identical_linear_jobs_static_choice():
    # With perfectly linear scaling every partition has the same throughput,
    # so the search is decided by queueing alone.
    lin = tuple(g / 7 for g in (7, 4, 3, 2, 1))
    trace = _trace([lin] * 14, [700.0] * 14, [0.0] * 14)
    table = static_partition_table(trace, 1)
    chosen = best_static_partition(trace, 1)
    assert dict(table)[chosen] == min(j for _, j in table)
    assert chosen == PartitionConfig([7])
