import math

import numpy as np
import pytest

from rangelab.deviation import (KAPPA_STAR, TRANSFER_C, DeviationEstimate,
                                calibrate_range_mean,
                                confined_sampler,
                                corollary_decomposition_check, direct_tail,
                                gaussian_mgf_check, intersection_samples,
                                intersection_tail, lower_bound_experiment,
                                rate_coordinate, rate_fit,
                                rejection_confined, smc_confined,
                                transfer_iid_oracle, transfer_kernel_checks,
                                transfer_range_process_audit,
                                window_intersection_series)
from rangelab.errors import ContractError
from rangelab.green import build_green_table
from rangelab.lattice import (RngStream, WalkPath, make_packer,
                              simulate_walk, step_deltas)
from rangelab.range_stats import simulate_pair_intersection
from rangelab.stats import weighted_linear_fit, wilson_ci


def test_constants():
    assert KAPPA_STAR == pytest.approx(math.e - 1)
    assert TRANSFER_C == pytest.approx(0.29099, abs=1e-5)


def test_rate_coordinate():
    assert rate_coordinate(5, 100, 32.0) == pytest.approx(32 ** 0.6)
    assert rate_coordinate(3, 100, 10.0) == pytest.approx(1.0)


def test_wilson_nonzero_for_zero_hits():
    lo, hi = wilson_ci(0, 1000)
    assert lo == 0.0 and 0 < hi < 0.01


def test_rate_fit_synthetic():
    ests = [DeviationEstimate("synthetic", 5, 100, z, 1, 1,
                              math.exp(-2 * rate_coordinate(5, 100, z)),
                              0, 1, rate_coordinate(5, 100, z),
                              -2 * rate_coordinate(5, 100, z), 0.1)
            for z in (10, 20, 40, 80, 160)]
    fit = rate_fit(ests)
    assert fit["slope"] == pytest.approx(-2.0, abs=1e-9)
    assert fit["r2"] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ContractError):
        weighted_linear_fit([1, 1, 1, 1], [1, 2, 3, 4])


def test_direct_tail_median_and_monotone():
    d, n, samples = 5, 4000, 1200
    cal = calibrate_range_mean(d, n, samples, seed=303)
    ests = direct_tail(d, n, [0.0, cal["sd"], 2 * cal["sd"]], samples,
                       seed=303, calibration=cal)
    assert abs(ests[0].p_hat - 0.5) < 0.1
    assert ests[0].p_hat >= ests[1].p_hat >= ests[2].p_hat
    assert ests[2].ci_low <= ests[2].p_hat <= ests[2].ci_high


def brute_window_series(path, T):
    pos = path.positions()
    n = pos.shape[0] - 1
    keys = make_packer(pos).pack(pos)
    out = []
    for i in range(T, n + 1):
        win = set(keys[i - T + 1:i + 1].tolist())
        past = set(keys[:i - T + 1].tolist())
        out.append(len(win & past) / T)
    return np.array(out)


@pytest.mark.parametrize("d,n,T", [(3, 220, 3), (3, 220, 17), (5, 180, 6)])
def test_window_series_exact(d, n, T):
    path = simulate_walk(d, n, RngStream(41, d + T))
    assert np.allclose(window_intersection_series(path, T),
                       brute_window_series(path, T), atol=1e-12)


def test_decomposition_identity_many():
    for seed in range(6):
        path = simulate_walk(3 + 2 * (seed % 2), 700, RngStream(42, seed))
        for T in (2, 9, 100, 700):
            res = corollary_decomposition_check(path, T)
            assert res["holds"], (seed, T, res["max_abs_eps"])


def test_kernel_battery_closed_forms():
    res = transfer_kernel_checks(trials=30000, seed=99)
    assert res["ok"]
    rows = {r["name"]: r for r in res["rows"]}
    assert rows["const_one"]["mean"] == pytest.approx(math.exp(2 - math.e),
                                                      abs=1e-12)
    assert rows["const_zero"]["mean"] == pytest.approx(1.0, abs=1e-12)
    for name, row in rows.items():
        if row["closed_form"] is not None and "bernoulli" in name:
            assert row["closed_within_4se"]


def test_transfer_iid_oracle_grid():
    for q in (0.02, 0.3, 0.8):
        for zeta in (0.5, 4.0, 25.0, 120.0):
            res = transfer_iid_oracle(1500, 25, q, zeta)
            assert res["holds"]


def test_transfer_deterministic_process():
    # X_i = 1 always: LHS indicator vs RHS indicator plus the exponential
    n, T = 400, 10
    count = n - T + 1
    for zeta in (count / T * 0.5, count / T * 2.0):
        lhs = 1.0 if count / T > zeta else 0.0
        rhs = (1.0 if count / T > TRANSFER_C * zeta else 0.0) \
            + math.exp(-TRANSFER_C * zeta)
        assert lhs <= rhs + 1e-12


def test_transfer_range_process_audit():
    T = 8
    table = build_green_table(5, T)
    res = transfer_range_process_audit(5, 1500, T, paths=40, seed=1,
                                       table=table)
    assert res["ok"]


def test_smc_matches_rejection():
    d, m, side = 3, 50, 7
    rej = rejection_confined(d, m, side, RngStream(55, 0), want=500)
    smc = smc_confined(d, m, side, RngStream(56, 0), population=3000)
    p_rej = math.exp(rej.log_p_event)
    p_smc = math.exp(smc.log_p_event)
    assert p_rej == pytest.approx(p_smc, rel=0.25)
    # reconstructed prefixes stay inside the cube
    deltas = step_deltas(d)
    pos = np.zeros((smc.steps.shape[0], d), dtype=np.int64)
    ok = np.ones(smc.steps.shape[0], dtype=bool)
    for t in range(m):
        pos += deltas[smc.steps[:, t]]
        ok &= np.logical_and(2 * pos >= -side, 2 * pos < side).all(axis=1)
    assert ok.all()


def test_confined_trivial_acceptance():
    # cube wide enough to hold any m-step walk
    sample = confined_sampler(3, 5, 11, RngStream(57, 0), population=64)
    assert sample.mode == "rejection"
    assert sample.acceptance == 1.0


def test_confined_acceptance_self_consistent():
    d, m, side = 3, 1000, 15
    a = smc_confined(d, m, side, RngStream(58, 0), population=1500)
    b = smc_confined(d, m, side, RngStream(58, 1), population=1500)
    # two disjoint seed sets agree on the log scale within a few percent
    assert a.log_p_event == pytest.approx(b.log_p_event, rel=0.10)


def test_confinement_cost_linear_in_m():
    # at fixed side the log acceptance decays about linearly in m
    d, side = 3, 9
    logs = {}
    for m in (300, 600, 1200):
        logs[m] = smc_confined(d, m, side, RngStream(59, m),
                               population=1200).log_p_event
    slope_a = (logs[600] - logs[300]) / 300
    slope_b = (logs[1200] - logs[600]) / 600
    assert slope_a < 0 and slope_b < 0
    assert slope_b == pytest.approx(slope_a, rel=0.25)


def test_lower_bound_below_direct():
    d, n = 5, 3000
    cal = calibrate_range_mean(d, n, 1500, seed=60)
    zeta = 2.0 * cal["sd"]
    direct = direct_tail(d, n, [zeta], 1500, seed=60, calibration=cal)[0]
    lower = lower_bound_experiment(d, n, zeta, seed=61, population=400,
                                   replicates=4, calibration=cal)
    assert lower.log_p <= math.log(direct.ci_high) + 1e-9
    assert lower.extras["m"] == min(int(3 * zeta / 0.8648), int(0.9 * n))


def test_intersection_engine_exact_vs_direct():
    # the versioned-hash join must agree with plain set intersection
    d, horizon = 5, 3000
    vals = intersection_samples(d, horizon, pairs=40, seed=71)
    for r in range(40):
        direct = simulate_pair_intersection(d, horizon,
                                            RngStream(71, 2 * r),
                                            RngStream(71, 2 * r + 1))
        assert vals[r] == direct
    assert vals.min() >= 1  # both ranges contain the origin


def test_intersection_tail_report():
    res = intersection_tail(5, 2000, pairs=4000, seed=72)
    assert res["tail"][0] == 1.0
    assert res["mean"] > 1
    if res["fit"] is not None:
        assert res["fit"]["slope"] < 0
    with pytest.raises(ContractError):
        intersection_tail(3, 100, 10, 1)


def test_gaussian_mgf_theta_zero_and_symmetry():
    d, n = 5, 20000
    zeta = n ** 0.6
    cal = calibrate_range_mean(d, n, 1500, seed=80)
    res = gaussian_mgf_check(d, n, zeta, [-0.5, 0.0, 0.5], 1500, seed=80,
                             calibration=cal)
    by_theta = {r["theta"]: r for r in res["rows"]}
    assert by_theta[0.0]["scaled_log_mgf"] == pytest.approx(0.0, abs=1e-12)
    plus, minus = by_theta[0.5], by_theta[-0.5]
    assert plus["scaled_log_mgf"] == pytest.approx(
        minus["scaled_log_mgf"], abs=4 * 0.5 * res["sigma2"])
    assert res["sigma2"] > 0
