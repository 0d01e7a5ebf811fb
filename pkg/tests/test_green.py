import math

import numpy as np
import pytest

from rangelab.errors import ContractError, ResourceError
from rangelab.green import (GreenOracle, build_green_table, corrector,
                            corrector_bruteforce, corrector_per_step,
                            check_density_green_bound, green_infinite,
                            load_table, save_table)
from rangelab.lattice import RngStream, WalkPath, simulate_walk


def test_g2_value_d3():
    table = build_green_table(3, 2, method="dp")
    assert table.octant[0, 0, 0] == pytest.approx(7 / 6, abs=1e-12)


@pytest.mark.parametrize("d,T", [(3, 0), (3, 1), (3, 13), (4, 6), (5, 5)])
def test_mass_conservation(d, T):
    table = build_green_table(d, T)
    assert abs(table.mass() - (T + 1)) <= max(1e-9 * T, 1e-12)


@pytest.mark.parametrize("d,T", [(3, 16), (4, 8), (5, 6)])
def test_dp_equals_spectral(d, T):
    a = build_green_table(d, T, method="dp")
    b = build_green_table(d, T, method="spectral")
    assert np.abs(a.octant - b.octant).max() < 1e-11


def test_support_and_symmetry(rng):
    table = build_green_table(3, 9, method="dp")
    zs = rng.integers(-12, 13, size=(500, 3))
    vals = table.value(zs)
    outside = np.abs(zs).sum(axis=1) > 9
    assert np.all(vals[outside] == 0.0)
    # signed permutation invariance
    for _ in range(50):
        z = rng.integers(-6, 7, size=3)
        perm = rng.permutation(3)
        signs = rng.choice([-1, 1], size=3)
        hit = table.value(np.array([z]))[0]
        img = table.value(np.array([signs * z[perm]]))[0]
        assert hit == pytest.approx(img, rel=1e-12)


def test_monotone_in_horizon():
    t1 = build_green_table(3, 8, method="dp")
    t2 = build_green_table(3, 9, method="dp")
    assert np.all(t2.octant[:9, :9, :9] - t1.octant >= -1e-14)


def test_parity_zeros():
    # p_k(z) = 0 unless |z|_1 = k mod 2, so G_T keeps only reachable mass
    table = build_green_table(3, 6, method="dp")
    # site at l1-distance 5 with T=6: only k=5 contributes among k<=6
    probe = table.value(np.array([[5, 0, 0], [4, 1, 0]]))
    assert probe[0] > 0 and probe[1] > 0
    single = build_green_table(3, 4, method="dp")
    assert single.value(np.array([[5, 0, 0]]))[0] == 0.0


def test_infinite_values_match_known_scale(oracle3, oracle5):
    # derived from the walk itself: escape probability 1/G(0)
    assert oracle3.g0 == pytest.approx(1.5164, rel=0.02)
    assert oracle5.g0 == pytest.approx(1.156, rel=0.02)
    assert oracle3.asymptote.mismatch_at_rstar < 0.02


def test_green_monotone_axis_decay(oracle3):
    ks = np.arange(0, 21)
    zs = np.zeros((21, 3), dtype=np.int64)
    zs[:, 0] = ks
    vals = oracle3.values(zs)
    assert np.all(np.diff(vals) < 0)


def test_green_infinite_entry_point(green3):
    v = green_infinite(3, (1, 0, 0), green3)
    assert 0 < v < green_infinite(3, (0, 0, 0), green3)


def test_monte_carlo_visit_oracle_matches_table():
    # empirical visit counts at small sites vs the tabulated kernel
    d, T, walks = 3, 20, 30000
    table = build_green_table(d, T)
    from rangelab.lattice import batch_positions, simulate_steps_batch
    counts = {}
    batch = 3000
    probes = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 1), (3, 0, 0)]
    sums = {z: [] for z in probes}
    for start in range(0, walks, batch):
        steps = simulate_steps_batch(d, T, 999, start, batch)
        pos = batch_positions(d, steps, dtype=np.int16)
        for z in probes:
            hits = np.all(pos == np.array(z, dtype=np.int16), axis=2)
            sums[z].append(hits.sum(axis=1))
    for z in probes:
        visits = np.concatenate(sums[z])
        mean = visits.mean()
        se = visits.std(ddof=1) / math.sqrt(walks)
        assert abs(mean - table.value(np.array([z]))[0]) < 4 * se + 1e-9


def test_corrector_trivial_and_oracle(green3):
    # single-position path: R_0 = {0}
    path = WalkPath(d=3, steps=np.zeros(0, dtype=np.uint8))
    table = build_green_table(3, 7, method="dp")
    val = corrector(path, 7, table)
    assert val == pytest.approx(table.value(np.array([[0, 0, 0]]))[0] / 7,
                                rel=1e-12)
    for seed in (0, 1):
        p = simulate_walk(3, 400, RngStream(31, seed))
        fast = corrector(p, 7, table)
        slow = corrector_bruteforce(p, 7, table)
        assert fast == pytest.approx(slow, abs=1e-10)


def test_corrector_horizon_mismatch(green3):
    p = simulate_walk(3, 10, RngStream(0, 0))
    with pytest.raises(ContractError):
        corrector(p, green3.T + 1, green3)


def test_density_green_bound_contract(green3):
    p = simulate_walk(3, 800, RngStream(5, 5))
    r, rho = 3, 2.0
    out = check_density_green_bound(p, np.array([], dtype=np.int64), r, rho,
                                    green3.T, green3, (0, 0, 0))
    assert out["lhs"] == 0.0
    # a single index whose walker cube holds the probe point contributes 0
    pos = p.positions()
    out = check_density_green_bound(p, np.array([10]), r, 10.0, green3.T,
                                    green3, tuple(pos[10]))
    assert out["lhs"] == 0.0
    with pytest.raises(ContractError):
        check_density_green_bound(p, np.arange(p.n + 1), 3, 1e-9, green3.T,
                                  green3, (0, 0, 0))


def test_density_green_bound_measures_constant(green5):
    p = simulate_walk(5, 3000, RngStream(6, 1))
    r, rho = 3, 0.5
    from rangelab.range_stats import walker_cube_occupancy
    occ = walker_cube_occupancy(p, r)
    K = np.nonzero(occ <= rho * r ** 5)[0][:500]
    out = check_density_green_bound(p, K, r, rho, green5.T, green5,
                                    (0, 0, 0, 0, 0), occupancy=occ)
    assert out["lhs"] >= 0
    assert math.isfinite(out["bound_ratio"])


def test_cache_roundtrip(tmp_path, green5):
    fname = tmp_path / "g.bin"
    save_table(green5, fname)
    back = load_table(fname)
    assert back.d == green5.d and back.T == green5.T
    assert np.array_equal(back.octant, green5.octant)


def test_memory_budget_guard():
    with pytest.raises(ResourceError):
        build_green_table(5, 80, method="dp", mem_budget=2**28)
