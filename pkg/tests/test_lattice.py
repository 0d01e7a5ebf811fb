import math

import numpy as np
import pytest

from rangelab.errors import ContractError, ResourceError
from rangelab.lattice import (Cube, KeyPacker, RngStream, WalkPath,
                              chebyshev_distance, cube_contains,
                              cube_contains_points, cube_index, cube_sites,
                              dump_path_ndjson, first_visit_mask, make_packer,
                              read_path, simulate_walk, steps_to_positions,
                              write_path)


def test_empty_walk_single_position():
    path = simulate_walk(3, 0, RngStream(1, 0))
    assert path.n == 0
    assert np.array_equal(path.positions(), np.zeros((1, 3), dtype=np.int64))


def test_determinism_bitwise():
    a = simulate_walk(3, 10**6, RngStream(42, 0))
    b = simulate_walk(3, 10**6, RngStream(42, 0))
    assert np.array_equal(a.steps, b.steps)
    c = simulate_walk(3, 1000, RngStream(42, 1))
    assert not np.array_equal(a.steps[:1000], c.steps)


def test_step_legality_and_start():
    path = simulate_walk(4, 5000, RngStream(7, 3))
    pos = path.positions()
    assert np.all(pos[0] == 0)
    steps = np.abs(np.diff(pos, axis=0)).sum(axis=1)
    assert np.all(steps == 1)


def test_direction_uniformity_five_se():
    n = 10**6
    d = 3
    path = simulate_walk(d, n, RngStream(11, 0))
    counts = np.bincount(path.steps, minlength=2 * d)
    p = 1.0 / (2 * d)
    se = math.sqrt(p * (1 - p) * n)
    assert np.all(np.abs(counts - n * p) < 5 * se)


def test_dimension_below_three_rejected():
    with pytest.raises(ContractError):
        simulate_walk(2, 10, RngStream(0, 0))


def test_step_budget_rejected():
    with pytest.raises(ResourceError):
        simulate_walk(3, 10**7, RngStream(0, 0), max_steps=10**6)


def test_cube_membership_half_open():
    assert cube_contains(Cube((0, 0, 0), 3), (1, 1, 1))
    # per-coordinate half-open rule: -1 in [-1, 1), +1 not
    assert cube_contains(Cube((0, 0, 0), 2), (-1, -1, -1))
    assert not cube_contains(Cube((0, 0, 0), 2), (1, 0, 0))


@pytest.mark.parametrize("d", [3, 4, 5])
@pytest.mark.parametrize("r", [1, 2, 3, 4, 5])
def test_cube_cardinality_by_enumeration(d, r, rng):
    center = rng.integers(-7, 8, size=d)
    sites = cube_sites(center, r, d)
    assert sites.shape[0] == r ** d
    assert cube_contains_points(center, r, sites).all()
    # ring just outside is excluded
    outside = center + np.array([r, 0] + [0] * (d - 2))
    assert not cube_contains(Cube(tuple(center), r), outside)


def test_cube_index_examples():
    assert cube_index(np.array([0, 0, 0]), 5).tolist() == [0, 0, 0]
    assert cube_index(np.array([7, 0, 0]), 5).tolist() == [5, 0, 0]
    # derived by enumerating x in 5Z: 7 lies in [5 - 2.5, 5 + 2.5)
    for x in range(-20, 21, 5):
        inside = -5 / 2 <= 7 - x < 5 / 2
        assert inside == (x == 5)


def test_cube_index_roundtrip_and_partition(rng):
    for _ in range(200):
        r = int(rng.integers(1, 9))
        y = rng.integers(-50, 51, size=3)
        x = cube_index(y, r)
        assert np.all(x % r == 0)
        assert cube_contains(Cube(tuple(x), r), y)
        # uniqueness: no neighboring grid center also contains y
        for axis in range(3):
            for step in (-r, r):
                other = x.copy()
                other[axis] += step
                assert not cube_contains(Cube(tuple(other), r), y)


def test_chebyshev_examples(rng):
    assert chebyshev_distance((0, 0, 0), (0, 0, 0)) == 0
    assert chebyshev_distance((1, 2, 3), (4, 2, 1)) == 3
    for _ in range(300):
        a, b, c = rng.integers(-9, 10, size=(3, 4))
        assert chebyshev_distance(a, b) == chebyshev_distance(b, a)
        assert (chebyshev_distance(a, c)
                <= chebyshev_distance(a, b) + chebyshev_distance(b, c))


def test_packer_injective(rng):
    pts = rng.integers(-300, 301, size=(5000, 4))
    packer = make_packer(pts)
    keys = packer.pack(pts)
    uniq_pts = np.unique(pts, axis=0).shape[0]
    assert np.unique(keys).size == uniq_pts


def test_first_visit_mask():
    keys = np.array([5, 7, 5, 9, 7, 5])
    mask = first_visit_mask(keys)
    assert mask.tolist() == [True, True, False, True, False, False]


def test_path_file_roundtrip(tmp_path):
    path = simulate_walk(5, 1234, RngStream(9, 2))
    fname = tmp_path / "walk.bin"
    write_path(path, fname)
    back = read_path(fname)
    assert back.d == path.d and back.seed == 9 and back.stream_id == 2
    assert np.array_equal(back.steps, path.steps)
    jname = tmp_path / "walk.ndjson"
    dump_path_ndjson(path, jname)
    lines = jname.read_text().strip().split("\n")
    assert len(lines) == path.n + 1
    assert lines[0] == "[0, 0, 0, 0, 0]"


def test_return_probability_d3():
    # long-run return frequency near 1 - 1/G(0) ~ 0.3405
    hits = 0
    trials = 400
    for rep in range(trials):
        path = simulate_walk(3, 20000, RngStream(1234, rep))
        pos = path.positions()
        hits += bool(np.any(np.all(pos[1:] == 0, axis=1)))
    rate = hits / trials
    assert abs(rate - 0.34) < 0.07
