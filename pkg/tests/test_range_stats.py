import math

import numpy as np
import pytest

from rangelab.errors import ContractError
from rangelab.lattice import Cube, RngStream, WalkPath, simulate_walk
from rangelab.range_stats import (dyadic_decompose, estimate_gamma,
                                  intersect_ranges, local_time,
                                  moment_report, occupancy_bruteforce,
                                  occupancy_field, range_curve, range_volume,
                                  sample_walk_statistics,
                                  simulate_pair_intersection,
                                  verify_inclusion_exclusion,
                                  walker_cube_bound, walker_cube_bound_at,
                                  walker_cube_occupancy,
                                  walker_cube_occupancy_at)


def osc_path(n=10):
    return WalkPath(d=3, steps=np.array([0, 1] * (n // 2), dtype=np.uint8))


def test_range_volume_edges():
    path = simulate_walk(3, 100, RngStream(1, 1))
    assert range_volume(path, 0) == 1
    assert range_volume(osc_path(), 2) == 2
    curve = range_curve(path)
    assert curve[0] == 1
    assert np.all(np.diff(curve) >= 0)
    assert np.all(np.diff(curve) <= 1)
    assert curve[-1] == range_volume(path)


def test_local_time_regions():
    path = simulate_walk(3, 500, RngStream(2, 1))
    # whole lattice: a giant cube holds every site
    assert local_time(path, Cube((0, 0, 0), 10000), 123) == 124
    assert local_time(osc_path(), Cube((0, 0, 0), 4), 10) == 11
    pos = path.positions()
    a = pos[10]
    b = a + np.array([50, 0, 0])
    la = local_time(path, np.array([a]))
    lb = local_time(path, np.array([b]))
    lab = local_time(path, np.array([a, b]))
    assert la + lb == lab


def test_occupancy_field_mass(rng):
    for seed in range(5):
        r = int(rng.integers(1, 8))
        path = simulate_walk(4, int(rng.integers(1, 2000)), RngStream(3, seed))
        field = occupancy_field(path, r)
        assert field.total() == path.n + 1
        assert np.all(field.counts > 0)
    single = WalkPath(d=3, steps=np.zeros(0, dtype=np.uint8))
    field = occupancy_field(single, 5)
    assert field.total() == 1 and field.centers.shape[0] == 1


@pytest.mark.parametrize("d,n,r", [(3, 300, 1), (3, 300, 4), (3, 300, 9),
                                   (4, 200, 5), (5, 200, 3), (5, 200, 6)])
def test_walker_occupancy_exact(d, n, r):
    path = simulate_walk(d, n, RngStream(4, d * 10 + r))
    ref = occupancy_bruteforce(path, r)
    assert np.array_equal(walker_cube_occupancy(path, r), ref)
    idx = np.arange(0, n + 1, 3)
    assert np.array_equal(walker_cube_occupancy_at(path.positions(), r, idx),
                          ref[idx])
    assert np.all(walker_cube_bound(path, r) >= ref)
    assert np.all(walker_cube_bound_at(path.positions(), r,
                                       np.arange(n + 1)) >= ref)


def test_inclusion_exclusion_exact(rng):
    path = simulate_walk(3, 2000, RngStream(5, 0))
    for _ in range(60):
        n = int(rng.integers(0, 1500))
        m = int(rng.integers(0, 2000 - n))
        res = verify_inclusion_exclusion(path, n, m)
        assert res["lhs"] == res["rhs"]
    tiny = osc_path(2)
    res = verify_inclusion_exclusion(tiny, 1, 1)
    assert res["lhs"] == 2 and res["parts"]["intersection"] == 2


def test_dyadic_identity(rng):
    for seed in range(20):
        n = int(rng.integers(40, 3000))
        L = int(rng.integers(1, 4))
        path = simulate_walk(3 + seed % 2, n, RngStream(6, seed))
        res = dyadic_decompose(path, L)
        assert res["lhs"] == res["rhs"]
    # L = 1 reduces to the two-block inclusion-exclusion identity
    path = simulate_walk(3, 999, RngStream(6, 100))
    res = dyadic_decompose(path, 1)
    king = verify_inclusion_exclusion(path, (0 + 999) // 2,
                                      999 - (0 + 999) // 2)
    assert res["lhs"] == king["lhs"]
    # block lengths differ by at most one unit off powers of two
    res3 = dyadic_decompose(path, 3)
    lengths = res3["block_lengths"]
    assert max(lengths) - min(lengths) <= 1


def test_intersect_ranges_properties():
    a = simulate_walk(5, 400, RngStream(7, 0))
    b = simulate_walk(5, 400, RngStream(7, 1))
    iab = intersect_ranges(a, b)
    iba = intersect_ranges(b, a)
    assert iab == iba
    assert iab <= min(range_volume(a), range_volume(b))
    assert intersect_ranges(a, a) == range_volume(a)
    assert iab == simulate_pair_intersection(5, 400, RngStream(7, 0),
                                             RngStream(7, 1))
    with pytest.raises(ContractError):
        intersect_ranges(a, simulate_walk(3, 10, RngStream(0, 0)))


def test_gamma_estimators_agree():
    res = estimate_gamma(5, 20000, 250, seed=77)
    assert res["consistent_2se"]
    assert res["gamma_return"] == pytest.approx(0.865, abs=0.05)
    assert res["gamma_range"] == pytest.approx(0.865, abs=0.02)


def test_moment_report_shapes():
    sizes = sample_walk_statistics(5, 5000, 300, seed=88)
    rep = moment_report(5, 5000, 300, seed=88, sizes=sizes)
    assert rep.variance > 0
    assert rep.se_mean == pytest.approx(math.sqrt(rep.variance / 300),
                                        rel=1e-9)
    assert abs(rep.skewness) < 1.0
    assert rep.mean / 5000 == pytest.approx(0.865, abs=0.03)


def test_lln_window_d3():
    # |R_n|/n concentrates in [0.62, 0.70] near the escape constant
    sizes = sample_walk_statistics(3, 10**5, 30, seed=89)
    frac = sizes / 10**5
    inside = np.logical_and(frac >= 0.62, frac <= 0.70).mean()
    assert inside >= 0.95


def test_variance_scaling():
    # d=5: var/n stable; d=3: var/(n log n) stable across a 16x n-range
    ratios5 = []
    for i, n in enumerate((4000, 16000, 64000)):
        sizes = sample_walk_statistics(5, n, 500, seed=90,
                                       stream_start=10000 * i)
        ratios5.append(sizes.var(ddof=1) / n)
    assert max(ratios5) / min(ratios5) < 1.5
    ratios3 = []
    for i, n in enumerate((4000, 16000, 64000)):
        sizes = sample_walk_statistics(3, n, 500, seed=91,
                                       stream_start=10000 * i)
        ratios3.append(sizes.var(ddof=1) / (n * math.log(n)))
    assert max(ratios3) / min(ratios3) < 1.8


def test_intersection_scaling():
    # d=5: intersections stay O(1); d=3: mean grows like sqrt(n)
    vals5 = np.array([simulate_pair_intersection(
        5, 20000, RngStream(92, 2 * i), RngStream(92, 2 * i + 1))
        for i in range(200)])
    assert np.quantile(vals5, 0.99) <= 20
    means3 = {}
    for n in (2500, 10000):
        vals = np.array([simulate_pair_intersection(
            3, n, RngStream(93 + n, 2 * i), RngStream(93 + n, 2 * i + 1))
            for i in range(250)])
        means3[n] = vals.mean()
    ratio = means3[10000] / means3[2500]
    assert 1.5 <= ratio <= 2.5
