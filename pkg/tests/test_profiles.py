import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from misosim.profiles import (
    MPS_LEVELS,
    JobProfile,
    PredictorSpec,
    ProfileMatrix,
    build_mps_matrix,
    default_small_slice_model,
    drop_dummies,
    extrapolate_small_slices,
    fit_small_slice_model,
    pad_to_seven,
    power_law_table,
    predict_mig_speeds,
    prediction_errors,
    r2_score,
    random_profile,
    read_profiles,
    simulate_mps_rates,
    synthetic_corpus,
    truth_mig_matrix,
    write_profiles,
)
from misosim.topology import S1G, S2G, S3G, S4G, S7G


def job(jid="a", alpha=0.5, mem=5, **kw):
    return JobProfile(jid, 100.0, power_law_table(alpha), mem_demand_gb=mem, **kw)


def mixes(n_mats, seed):
    rng = np.random.default_rng(seed)
    for i in range(n_mats):
        k = int(rng.integers(1, 8))
        yield pad_to_seven([random_profile(rng, f"m{i}_{j}", 10.0) for j in range(k)])


def test_profile_validation():
    with pytest.raises(ValueError):
        JobProfile("x", 1.0, (0.9, 0.8, 0.7, 0.6, 0.5))
    with pytest.raises(ValueError):
        JobProfile("x", 1.0, (1.0, 0.5, 0.6, 0.4, 0.3))
    with pytest.raises(ValueError):
        JobProfile("x", 1.0, (1.0, 0.5, 0.4, 0.3, 0.0))
    with pytest.raises(ValueError):
        job(mem=80)


def test_memory_demand_zeroes_small_slices():
    big = job(mem=40)
    assert big.effective_table() == (1.0, 0.0, 0.0, 0.0, 0.0)
    mid = job(mem=20)
    assert mid.effective_speed(S3G) > 0
    assert mid.effective_speed(S2G) == 0 and mid.effective_speed(S1G) == 0


def test_qos_floor():
    j = job(qos_min_slice=S4G)
    assert j.min_slice is S4G
    assert j.fits(S7G) and j.fits(S4G) and not j.fits(S3G)


def test_pad_to_seven():
    seven = [job(f"j{i}") for i in range(7)]
    assert pad_to_seven(seven) == seven
    padded = pad_to_seven([job()])
    assert len(padded) == 7
    assert sum(p.is_dummy for p in padded) == 6
    with pytest.raises(ValueError):
        pad_to_seven([])


@given(st.integers(1, 7))
def test_pad_then_drop_is_identity(n):
    real = [job(f"j{i}", alpha=0.1 * (i + 1)) for i in range(n)]
    assert drop_dummies(pad_to_seven(real)) == real


def test_mps_rate_examples():
    one = job(alpha=0.7)
    assert simulate_mps_rates([one], 100, 1.0)["a"] == 1.0
    assert simulate_mps_rates([one], 100, 0.8)["a"] == pytest.approx(0.8, abs=1e-15)
    seven = [job(f"j{i}", alpha=0.2 + 0.1 * i) for i in range(7)]
    rates = simulate_mps_rates(seven, 14, 0.8)
    for j in seven:
        # 14% of 7 GPCs is 0.98, clamped to one GPC.
        assert rates[j.job_id] == pytest.approx(0.8 * j.speed(S1G), rel=1e-12)


def test_mps_rates_ignore_dummies():
    padded = pad_to_seven([job(alpha=1.0)])
    assert simulate_mps_rates(padded, 50, 1.0)["a"] == pytest.approx(3.5 / 7)
    with pytest.raises(ValueError):
        simulate_mps_rates(padded, 30)


def test_mps_matrix_shape_and_normalization():
    m = build_mps_matrix(pad_to_seven([job("a", 0.3), job("b", 0.9)]))
    assert m.values.shape == (3, 7)
    assert np.all(m.values.max(axis=0) == 1.0)
    assert m.job_ids[:2] == ("a", "b")


def test_profile_matrix_rejects_unnormalized():
    with pytest.raises(ValueError):
        ProfileMatrix(np.full((3, 7), 0.5), "mig", tuple("abcdefg"))


def test_oracle_predictor_is_identity():
    for padded in mixes(20, 3):
        mps = build_mps_matrix(padded)
        pred = predict_mig_speeds(mps, padded, PredictorSpec(mode="oracle"))
        truth = truth_mig_matrix(padded)
        assert np.array_equal(pred.values, truth.values)


def test_noisy_predictor_keeps_contract():
    padded = pad_to_seven([job("a", 0.2), job("b", 0.8)])
    pred = predict_mig_speeds(build_mps_matrix(padded), padded, PredictorSpec(target_mae=0.09, rng_seed=5))
    assert np.all(pred.values[0] == 1.0)
    assert np.all((pred.values > 0) & (pred.values <= 1))


@pytest.mark.parametrize("target,tol", [(0.017, 0.002), (0.05, 0.005), (0.09, 0.01)])
def test_noise_calibration(target, tol):
    spec = PredictorSpec(target_mae=target)
    rng = np.random.default_rng(11)
    errs = []
    for padded in mixes(715, 12):
        pred = predict_mig_speeds(build_mps_matrix(padded), padded, spec, rng=rng)
        errs.append(prediction_errors(pred, truth_mig_matrix(padded)))
    errs = np.concatenate(errs)
    assert errs.size >= 10_000
    se = errs.std(ddof=1) / math.sqrt(errs.size)
    assert abs(errs.mean() - target) <= 2 * se
    assert abs(errs.mean() - target) <= tol


def test_exact_linear_relation_recovered():
    rng = np.random.default_rng(0)
    training = []
    for i in range(50):
        f4 = rng.uniform(0.5, 1.0)
        f3 = rng.uniform(0.3, f4)
        f1 = rng.uniform(0.01, 0.5 * f3)
        training.append(JobProfile(f"t{i}", 1.0, (1.0, f4, f3, 0.5 * f3, f1)))
    model = fit_small_slice_model(training)
    # rows: s7 (folded into intercept), s4, s3, intercept; column 0 predicts s2
    assert model.dropped == (0,)
    assert model.coef[2, 0] == pytest.approx(0.5, abs=1e-9)
    assert model.coef[1, 0] == pytest.approx(0.0, abs=1e-9)
    assert model.coef[3, 0] == pytest.approx(0.0, abs=1e-9)


def test_too_few_training_profiles():
    with pytest.raises(ValueError):
        fit_small_slice_model([job(f"t{i}", 0.1 * (i + 1)) for i in range(3)])


def test_constant_training_predicts_one():
    flat = [JobProfile(f"c{i}", 1.0, (1.0,) * 5) for i in range(12)]
    model = fit_small_slice_model(flat)
    assert model.dropped == (0, 1, 2)
    assert np.allclose(model.predict([[1.0, 1.0, 1.0]]), 1.0, atol=1e-12)
    padded = pad_to_seven([JobProfile("c", 1.0, (1.0,) * 5)])
    small = extrapolate_small_slices(truth_mig_matrix(padded), model)
    assert small["c"][S2G] == pytest.approx(1.0) and small["c"][S1G] == pytest.approx(1.0)


def test_extrapolation_heldout_r2():
    model = fit_small_slice_model(synthetic_corpus(3000, seed=1))
    held = synthetic_corpus(1000, seed=2)
    tables = np.array([j.speed_table for j in held])
    score = r2_score(tables[:, 3:], model.predict(tables[:, :3]))
    assert score >= 0.9


@settings(max_examples=50)
@given(st.lists(st.floats(0.1, 1.0), min_size=1, max_size=7))
def test_extrapolation_bounded_and_monotone(alphas):
    jobs = pad_to_seven([job(f"j{i}", a) for i, a in enumerate(alphas)])
    small = extrapolate_small_slices(truth_mig_matrix(jobs), default_small_slice_model())
    for j in jobs:
        assert 0 < small[j.job_id][S1G] <= small[j.job_id][S2G] <= j.speed(S3G)


def test_r2_perfect_fit():
    y = np.array([[0.1, 0.2], [0.3, 0.5], [0.6, 0.9]])
    assert r2_score(y, y) == 1.0


def test_random_profile_shape():
    rng = np.random.default_rng(4)
    for i in range(200):
        p = random_profile(rng, f"r{i}", 50.0)
        assert p.speed_table[0] == 1.0
        assert p.mem_demand_gb in (5, 10, 20)
        assert len(p.mps_rates) == len(MPS_LEVELS)


def test_profile_records_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    jobs = [random_profile(rng, f"r{i}", 10.0 + i) for i in range(5)]
    jobs.append(job("q", qos_min_slice=S3G))
    path = tmp_path / "profiles.csv"
    write_profiles(jobs, path)
    assert read_profiles(path) == jobs
