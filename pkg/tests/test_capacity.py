import math

import numpy as np
import pytest

from rangelab.capacity import (EquilibriumSolution, SeparatedSet,
                               as_site_array, capacity_exact, capacity_mc,
                               capacity_time_inequality,
                               capacity_volume_lower,
                               extract_high_capacity_subset,
                               filling_probability_check, random_site_set,
                               union_of_cubes)
from rangelab.errors import ContractError, ResourceError
from rangelab.lattice import RngStream, cube_sites


def test_singleton_is_escape_probability(oracle3, oracle5):
    for oracle, d in ((oracle3, 3), (oracle5, 5)):
        sol = capacity_exact(np.zeros((1, d), dtype=np.int64), oracle)
        assert sol.cap == pytest.approx(1.0 / oracle.g0, rel=1e-10)
        assert sol.residual < 1e-8


def test_pair_closed_form(oracle3):
    z = np.array([3, -2, 1])
    sol = capacity_exact(np.stack([np.zeros(3, dtype=np.int64), z]), oracle3)
    gz = oracle3.values(z[None, :])[0]
    assert sol.cap == pytest.approx(2.0 / (oracle3.g0 + gz), abs=1e-8)
    assert np.all(sol.e >= -1e-10) and np.all(sol.e <= 1 + 1e-10)


def test_distant_pair_doubles(oracle3):
    z = np.array([50, 0, 0])
    sol = capacity_exact(np.stack([np.zeros(3, dtype=np.int64), z]), oracle3)
    single = 1.0 / oracle3.g0
    assert sol.cap == pytest.approx(2 * single, rel=0.01)


def test_equilibrium_range_and_monotonicity(oracle3):
    big = random_site_set(3, 30, 6, RngStream(21, 0))
    small = big[:15]
    cap_small = capacity_exact(small, oracle3).cap
    cap_big = capacity_exact(big, oracle3).cap
    assert cap_small <= cap_big + 1e-9
    a = random_site_set(3, 12, 5, RngStream(21, 1))
    b = random_site_set(3, 12, 5, RngStream(21, 2))
    union = np.unique(np.concatenate([a, b]), axis=0)
    cap_u = capacity_exact(union, oracle3).cap
    assert cap_u <= capacity_exact(a, oracle3).cap \
        + capacity_exact(b, oracle3).cap + 1e-9


def test_time_inequality_edge_and_random(oracle3):
    single = capacity_time_inequality(np.zeros((1, 3), dtype=np.int64),
                                      oracle3)
    assert single["product"] == pytest.approx(1.0, rel=1e-9)
    pair = capacity_time_inequality(
        np.array([[0, 0, 0], [2, 1, 0]]), oracle3)
    assert pair["product"] == pytest.approx(2.0, rel=1e-9)
    for seed in range(5):
        sites = random_site_set(3, 15, 5, RngStream(22, seed))
        res = capacity_time_inequality(sites, oracle3)
        assert res["holds"]


def test_capacity_mc_agrees(oracle5):
    sites = random_site_set(5, 8, 3, RngStream(23, 0))
    ex = capacity_exact(sites, oracle5)
    mc = capacity_mc(sites, trials=500, oracle=oracle5, rng=RngStream(23, 1))
    assert abs(ex.cap - mc.cap) < 3 * mc.error + 1e-9
    assert mc.bias_bound > 0
    with pytest.raises(ContractError):
        capacity_mc(sites, trials=0, oracle=oracle5, rng=RngStream(0, 0))
    with pytest.raises(ContractError):
        capacity_mc(sites, trials=10, oracle=oracle5, rng=RngStream(0, 0),
                    escape_radius=1)


def test_cube_capacity_slope(oracle3):
    caps = []
    for r in range(2, 9):
        caps.append((r, capacity_exact(cube_sites((0, 0, 0), r, 3),
                                       oracle3).cap))
    xs = np.log([r for r, _ in caps])
    ys = np.log([c for _, c in caps])
    slope = np.polyfit(xs, ys, 1)[0]
    assert abs(slope - 1.0) < 0.25
    ratios = [capacity_volume_lower(cube_sites((0, 0, 0), r, 3),
                                    oracle3)["ratio"] for r in (2, 5, 8)]
    assert min(ratios) > 0
    assert max(ratios) / min(ratios) < 2


def test_separated_set_validation():
    with pytest.raises(ContractError):
        SeparatedSet(r=3, centers=np.array([[0, 0, 0], [6, 0, 0]]))
    ok = SeparatedSet(r=3, centers=np.array([[0, 0, 0], [7, 0, 0]]))
    assert ok.size == 2


def test_extraction_bracket_and_coverage(oracle3):
    grid = np.array([[7 * i, 7 * j, 7 * k]
                     for i in range(4) for j in range(4) for k in range(4)])
    sep = SeparatedSet(r=3, centers=grid)
    res = extract_high_capacity_subset(sep, oracle3)
    lo, hi = res["bracket"]
    assert lo <= res["size"] <= hi + 1e-9
    assert res["covered"]
    # deterministic under the fixed scan order
    again = extract_high_capacity_subset(sep, oracle3,
                                         with_certificate=False)
    assert np.array_equal(res["U"], again["U"])
    cap_u = capacity_exact(res["union_sites"], oracle3).cap
    kappa = cap_u / (3 ** 1 * res["size"])
    assert kappa > 0
    assert res["occupation_over_r2"] > 0


def test_extraction_singleton():
    sep = SeparatedSet(r=2, centers=np.zeros((1, 3), dtype=np.int64))
    res = extract_high_capacity_subset(sep, None, with_certificate=False)
    assert res["size"] == 1 and res["covered"]


def test_filling_probability_trivial(oracle3):
    centers = np.zeros((1, 3), dtype=np.int64)
    rep = filling_probability_check(centers, r=3, rho_grid=[0.0, 0.2, 0.6],
                                    n=400, samples=400, seed=5, d=3,
                                    oracle=oracle3)
    rows = rep["rows"]
    assert rows[0]["p_hat"] == 1.0  # rho = 0 is certain
    assert rows[0]["p_hat"] >= rows[1]["p_hat"] >= rows[2]["p_hat"]
    assert rep["cap_union"] > 0
    with pytest.raises(ContractError):
        filling_probability_check(random_site_set(3, 5, 9, RngStream(1, 1)),
                                  3, [0.1], 100, 10, 1, 3)


def test_exact_envelope_guard(oracle3):
    sites = np.stack([np.arange(5001), np.zeros(5001), np.zeros(5001)],
                     axis=1).astype(np.int64)
    with pytest.raises(ResourceError):
        capacity_exact(sites, oracle3)
    with pytest.raises(ContractError):
        as_site_array(np.zeros((2, 3), dtype=np.int64))
