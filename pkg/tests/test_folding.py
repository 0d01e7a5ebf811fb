import math

import numpy as np
import pytest

from rangelab.errors import ContractError
from rangelab.folding import (compute_Cn_Vn, compute_Kn, compute_Kn_star,
                              core_cardinality_bound, folding_event_check,
                              hat_partition, hat_sizes_with_L,
                              kn_nesting_check, scale_schedule,
                              separated_core, sigma_budget, typical_params,
                              vn_sites)
from rangelab.green import build_green_table
from rangelab.lattice import RngStream, WalkPath, simulate_walk
from rangelab.range_stats import occupancy_bruteforce


def osc_path(n=10):
    return WalkPath(d=3, steps=np.array([0, 1] * (n // 2), dtype=np.uint8))


def test_typical_params_table():
    t5 = typical_params(5, 1000, 64.0)
    assert t5["rho_typ"] == 1.0 and t5["tau_typ"] == 64.0
    assert t5["chi"] == pytest.approx(5 / 7)
    t3 = typical_params(3, 10**4, 500.0)
    assert t3["rho_typ"] == pytest.approx(0.05)
    assert t3["tau_typ"] == 10**4
    assert t3["chi"] == pytest.approx(5 / 7)
    n = 2980  # log n sits just under 8, so ceil(8^(1/3)) = 2 applies
    t = typical_params(5, n, 100.0)
    assert t["r_n"] == 2
    with pytest.raises(ContractError):
        typical_params(4, 100, 10.0)


def test_schedule_arithmetic():
    n = int(round(math.exp(8)))
    sch = scale_schedule(5, n, zeta=1000.0, C0=8.0 / math.log(n))
    assert sch.level(1).rho == 1.0
    assert sch.level(3).rho == 0.25
    assert sch.level(2).r == 3  # ceil(16^(1/3))
    assert sch.level(2).L == pytest.approx(1000 * 2 ** (2 / 3), rel=1e-9)
    assert all(sch.levels[i + 1].r >= sch.levels[i].r
               for i in range(sch.nlevels - 1))
    sch3 = scale_schedule(3, 10**4, 6630.0)
    assert sch3.terminal is not None
    assert sch3.level(sch3.terminal).rho <= 0.125 * 6630.0 / 10**4
    assert sch3.level(sch3.terminal - 1).rho > 0.125 * 6630.0 / 10**4


def test_kn_oscillation_harness():
    path = osc_path(10)
    kn = compute_Kn(path, 4, 0.15)
    assert kn.size == 11  # occupation 11 >= 0.15 * 64 everywhere
    assert compute_Kn(path, 4, (11.5) / 64).size == 0
    star = compute_Kn_star(path, 4, 0.15)
    assert star.size == 11  # 11 sits inside the band [9.6, 19.2]
    star2 = compute_Kn_star(path, 4, 0.08)
    assert star2.size == 0  # 2 rho r^d = 10.24 < 11 fails the upper band


def test_kn_empty_when_time_insufficient():
    path = simulate_walk(3, 50, RngStream(1, 1))
    assert compute_Kn(path, 5, (52.0) / 125).size == 0


def test_kn_star_subset_and_dyadic_cover(rng):
    for seed in range(6):
        path = simulate_walk(3, 600, RngStream(2, seed))
        occ = occupancy_bruteforce(path, 3)
        for rho in (0.1, 0.25, 0.5):
            kn = compute_Kn(path, 3, rho, occupancy=occ)
            star = compute_Kn_star(path, 3, rho, occupancy=occ)
            assert np.isin(star, kn).all()
            cover = [compute_Kn_star(path, 3, (2.0 ** i) * rho,
                                     occupancy=occ)
                     for i in range(12)]
            union = np.unique(np.concatenate(cover)) if cover else []
            assert np.array_equal(union, kn)


def test_separated_core_bounds():
    for seed in range(5):
        path = simulate_walk(3, 1500, RngStream(3, seed))
        occ = occupancy_bruteforce(path, 3)
        rho = 0.25
        star = compute_Kn_star(path, 3, rho, occupancy=occ)
        if star.size == 0:
            continue
        core = separated_core(path, star, 3)
        bound = core_cardinality_bound(star.size, 3, 3, rho)
        assert core["size"] >= bound - 1e-9
        if core["size"] > 1:
            assert core["min_separation"] >= 3
        # every band index sits within the 2r-cube of some chosen center
        pos = path.positions()
        pts = pos[star]
        covered = np.zeros(star.size, dtype=bool)
        for c in core["centers"]:
            delta = pts - c
            covered |= np.logical_and(delta >= -3, delta < 3).all(axis=1)
        assert covered.all()


def test_cn_vn_consistency():
    path = simulate_walk(3, 800, RngStream(4, 0))
    cn = compute_Cn_Vn(path, 3, 1e-9)
    from rangelab.range_stats import occupancy_field
    assert cn["num_cubes"] == occupancy_field(path, 3).centers.shape[0]
    cn2 = compute_Cn_Vn(path, 3, 0.3)
    assert cn2["local_time"] >= 0.3 * 27 * cn2["num_cubes"]
    if cn2["num_cubes"]:
        sites = vn_sites(cn2)
        assert sites.shape[0] == cn2["volume"]


def test_hat_partition_cover_and_def(rng):
    n = 3000
    sch = scale_schedule(5, n, n ** 0.85)
    for seed in range(4):
        path = simulate_walk(5, n, RngStream(5, seed))
        part = hat_partition(path, sch)
        sizes = sum(part.level_sizes.values()) + part.leftover_size
        assert sizes == n + 1
        # membership at level i >= 2 requires failing the previous scale
        for i, cnt in part.level_sizes.items():
            if i < 2 or cnt == 0:
                continue
            lvl_prev = sch.level(i - 1)
            occ_prev = occupancy_bruteforce(path, lvl_prev.r)
            members = np.nonzero(part.labels == i)[0]
            tau_prev = lvl_prev.rho * float(lvl_prev.r) ** 5
            assert np.all(occ_prev[members] < tau_prev)


def test_sigma_budget_leftover_equality():
    n = 1500
    sch = scale_schedule(5, n, n ** 0.85)
    table = build_green_table(5, sch.T)
    path = simulate_walk(5, n, RngStream(6, 0))
    part = hat_partition(path, sch)
    res = sigma_budget(path, sch, table, part)
    assert res.holds
    if part.leftover_size == n + 1:
        assert res.sigma[0] == res.sigma[1] == res.sigma[2] == res.sigma[3] == 0
        assert res.total == pytest.approx(res.corrector, rel=1e-12)


def test_sigma_budget_with_dense_path():
    # oscillating path has every index in the first-level bucket
    n = 400
    path = osc_path(n)
    sch = scale_schedule(3, n, 80.0)
    table = build_green_table(3, sch.T)
    part = hat_partition(path, sch)
    res = sigma_budget(path, sch, table, part)
    assert res.holds
    assert res.corrector <= res.total + 1e-9


def test_hat_mass_concentrates_in_leftover():
    # undisturbed d=5 walks put essentially every index past all scales
    n = 4000
    sch = scale_schedule(5, n, n ** 0.85)
    good = 0
    for seed in range(20):
        path = simulate_walk(5, n, RngStream(8, seed))
        part = hat_partition(path, sch)
        good += part.leftover_size >= 0.99 * (n + 1)
    assert good >= 19


def test_event_check_and_nesting():
    n = 3000
    sch = scale_schedule(5, n, n ** 0.85)
    table = build_green_table(5, sch.T)
    path = simulate_walk(5, n, RngStream(7, 0))
    res = folding_event_check(path, sch, A=1.0, delta=0.125, I=1,
                              table=table)
    assert not res["counterexample"]
    nest = kn_nesting_check(path, sch, 1)
    assert nest["included"]

    sch3 = scale_schedule(3, 2000, 2000 ** (5 / 7) * math.log(2000))
    table3 = build_green_table(3, sch3.T)
    path3 = simulate_walk(3, 2000, RngStream(7, 1))
    res3 = folding_event_check(path3, sch3, A=1.0, delta=0.125,
                               I=max(sch3.terminal - 1, 1), table=table3)
    assert not res3["counterexample"]
    rows = hat_sizes_with_L(sch3, hat_partition(path3, sch3))
    assert rows[-1]["level"] == sch3.terminal
