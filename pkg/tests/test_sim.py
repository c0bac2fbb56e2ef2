import io
import math

import pytest

from misosim.metrics import PHASES, compute_stp, integrate_series
from misosim.profiles import JobProfile, PredictorSpec, power_law_table
from misosim.sim import OverheadSpec, Simulation, run_simulation
from misosim.topology import PartitionConfig, default_catalog
from misosim.workload import JobTrace, TraceSpec, generate_trace, single_job_trace

ORACLE = PredictorSpec(mode="oracle")


def make_trace(specs, cap=None):
    """specs: (alpha, duration, arrival[, mem]) tuples."""
    jobs = []
    for i, s in enumerate(specs):
        alpha, dur, arr = s[:3]
        mem = s[3] if len(s) > 3 else 5
        jobs.append((JobProfile(f"j{i}", dur, power_law_table(alpha), mem_demand_gb=mem), arr))
    cap = cap or max(s[1] for s in specs)
    return JobTrace(jobs, TraceSpec(job_count=len(jobs), max_duration_s=cap))


def test_compute_stp_examples():
    assert compute_stp([(1.0, 1.0)]) == 1.0
    assert compute_stp([(0.8, 1.0), (0.5, 1.0), (0.3, 1.0)]) == pytest.approx(1.6)
    assert compute_stp([]) == 0.0
    with pytest.raises(ValueError):
        compute_stp([(0.5, 0.0)])


def test_integrate_series():
    assert integrate_series([(0.0, 2.0), (3.0, 1.0)], 5.0) == 8.0


def test_single_job_exclusive():
    job = JobProfile("solo", 1234.5, power_law_table(0.4))
    r = run_simulation(single_job_trace(job), 1, "nopart", overheads=OverheadSpec.zero())
    assert r.avg_jct_s == 1234.5
    assert r.makespan_s == 1234.5
    assert r.avg_stp == 1.0
    assert all(v == 1.0 for _, v in r.stp_series[:-1])


def test_seven_identical_jobs_share_one_gpu():
    trace = make_trace([(0.5, 1000.0, 0.0)] * 7)
    log = io.StringIO()
    r = run_simulation(trace, 1, "miso", overheads=OverheadSpec.zero(), predictor=ORACLE, event_log=log)
    final = [ln for ln in log.getvalue().splitlines() if "\treconfig-done\t" in ln][-1]
    assert sorted(tok.split(":")[1] for tok in final.split("\t")[3].split()) == ["1g"] * 7
    expected = 7 * (1 / 7) ** 0.5
    assert r.stp_series[0] == (0.0, pytest.approx(expected, rel=1e-12))
    assert r.avg_stp == pytest.approx(2.6458, abs=1e-4)
    assert r.makespan_s == pytest.approx(1000.0 / (1 / 7) ** 0.5)


def test_miso_with_oracle_matches_oracle_policy():
    for seed in range(5):
        trace = generate_trace(TraceSpec(job_count=40, lambda_s=30, seed=seed))
        logs = {}
        reports = {}
        for policy in ("oracle", "miso"):
            logs[policy] = io.StringIO()
            reports[policy] = run_simulation(
                trace, 4, policy, overheads=OverheadSpec.zero(), predictor=ORACLE, event_log=logs[policy]
            )
        assert reports["miso"].comparable() == reports["oracle"].comparable()
        assert logs["miso"].getvalue() == logs["oracle"].getvalue()


@pytest.mark.parametrize("policy", ["nopart", "optsta", "oracle", "miso"])
def test_work_conservation_and_phase_closure(policy):
    trace = generate_trace(TraceSpec(job_count=40, lambda_s=40, seed=11))
    sim = Simulation(trace, 3, policy, static_partition=PartitionConfig([4, 2, 1]), debug=True)
    report = sim.run()
    for job in sim.jobs:
        work = math.fsum((t1 - t0) * rate for t0, t1, rate in job.segments)
        assert work == pytest.approx(job.profile.base_duration_s, rel=1e-6)
        assert math.fsum(job.acct[p] for p in PHASES) == pytest.approx(job.done - job.arrival, abs=1e-9)
    assert sum(report.breakdown.values()) == pytest.approx(1.0, abs=1e-12)


def test_admission_respects_memory():
    trace = make_trace([(0.5, 500.0, 10.0 * i, 20) for i in range(12)])
    log = io.StringIO()
    run_simulation(trace, 2, "miso", predictor=ORACLE, event_log=log, debug=True)
    for line in log.getvalue().splitlines():
        if "\treconfig-done\t" in line:
            for tok in line.split("\t")[3].split():
                assert tok.split(":")[1] in ("7g", "4g", "3g")


def test_partitions_stay_in_catalog_without_bubbles():
    trace = generate_trace(TraceSpec(job_count=60, lambda_s=20, seed=4))
    log = io.StringIO()
    run_simulation(trace, 4, "miso", event_log=log, debug=True)
    cat = default_catalog()
    for line in log.getvalue().splitlines():
        if "\treconfig-done\t" in line:
            kinds = [tok.split(":")[1] for tok in line.split("\t")[3].split()]
            assert PartitionConfig(int(k[:-1]) for k in kinds) in cat


def test_determinism():
    trace = generate_trace(TraceSpec(job_count=50, seed=8))
    for policy in ("nopart", "oracle", "miso"):
        a = run_simulation(trace, 4, policy, predictor=PredictorSpec(rng_seed=8))
        b = run_simulation(trace, 4, policy, predictor=PredictorSpec(rng_seed=8))
        assert a.to_json() == b.to_json()


def test_multi_instance_job_spawns_copies():
    base = JobProfile("mi", 800.0, power_law_table(0.6), instances=3)
    other = JobProfile("x", 400.0, power_law_table(0.3))
    trace = JobTrace([(base, 0.0), (other, 5.0)], TraceSpec(job_count=2, max_duration_s=800.0))
    for policy in ("nopart", "miso"):
        r = run_simulation(trace, 2, policy)
        assert set(r.jct_s) == {"mi", "mi#1", "mi#2", "x"}


def test_optsta_migrates_to_freed_larger_slice():
    # j0 finishes early on the 4g slice; j1 then moves up from 2g.
    trace = make_trace([(1.0, 100.0, 0.0), (1.0, 5000.0, 0.0), (1.0, 5000.0, 0.0)])
    log = io.StringIO()
    r = run_simulation(trace, 1, "optsta", static_partition="4,2,1", event_log=log)
    assert r.migrations >= 1
    assert "\tmigrate\t" in log.getvalue()
    stay = run_simulation(trace, 1, "optsta", static_partition="4,2,1",
                          overheads=OverheadSpec(checkpoint_restart_s=0.0))
    assert stay.avg_jct_s < r.avg_jct_s


def test_optsta_requires_partition_and_fit():
    trace = make_trace([(0.5, 100.0, 0.0, 20)])
    with pytest.raises(ValueError):
        run_simulation(trace, 1, "optsta")
    with pytest.raises(ValueError):
        run_simulation(trace, 1, "optsta", static_partition="1,1,1,1,1,1,1")
    with pytest.raises(ValueError):
        run_simulation(trace, 1, "bogus")


def test_profiling_phases_are_accounted():
    trace = generate_trace(TraceSpec(job_count=30, lambda_s=60, seed=2))
    r = run_simulation(trace, 4, "miso")
    assert r.breakdown["mps"] > 0
    assert r.breakdown["checkpoint"] > 0
    assert r.reconfigurations > 0
    zero = run_simulation(trace, 4, "oracle")
    assert zero.breakdown["mps"] == 0


def test_policy_ordering_typical_seed():
    trace = generate_trace(TraceSpec(seed=0))
    jct = {p: run_simulation(trace, 8, p, static_partition="4,2,1").avg_jct_s for p in ("nopart", "oracle", "miso")}
    assert jct["oracle"] <= jct["miso"] < jct["nopart"]


def test_reprofile_hook_runs():
    trace = generate_trace(TraceSpec(job_count=30, seed=5))
    r = run_simulation(trace, 4, "miso", reprofile_threshold=0.05, debug=True)
    assert len(r.jct_s) == 30


def test_overhead_validation():
    with pytest.raises(ValueError):
        OverheadSpec(mig_reconfig_s=-1)
    with pytest.raises(ValueError):
        OverheadSpec(interference=0)
