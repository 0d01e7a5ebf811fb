"""Range volume, local times, occupation fields and exact set identities.

Everything here is exact counting on integer lattices; Monte Carlo enters
only through the sampling helpers at the bottom (gamma and moment
estimation).  The visited-set primitives work on packed int64 coordinate
keys so the hot loops are sorts and searchsorted calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .lattice import (Cube, RngStream, WalkPath, batch_positions,
                      cube_contains_points, first_visit_mask, grid_coords,
                      make_packer, simulate_steps_batch, steps_to_positions)


def _positions_of(path_or_positions) -> np.ndarray:
    if isinstance(path_or_positions, WalkPath):
        return path_or_positions.positions()
    return np.asarray(path_or_positions, dtype=np.int64)


def path_keys(positions: np.ndarray) -> np.ndarray:
    packer = make_packer(positions)
    return packer.pack(positions)


def range_volume(path, upto: int | None = None) -> int:
    """|R_k| = number of distinct sites among S_0 .. S_k."""
    pos = _positions_of(path)
    n = pos.shape[0] - 1
    k = n if upto is None else int(upto)
    if not 0 <= k <= n:
        raise ContractError(f"upto={k} outside [0, {n}]")
    keys = path_keys(pos[:k + 1])
    return int(np.unique(keys).size)


def range_curve(path) -> np.ndarray:
    """|R_k| for every k, via the first-visit indicator cumsum."""
    pos = _positions_of(path)
    fv = first_visit_mask(path_keys(pos))
    return np.cumsum(fv)


def local_time(path, region, upto: int | None = None) -> int:
    """ell_k(region): number of times the walk sits in the region."""
    pos = _positions_of(path)
    n = pos.shape[0] - 1
    k = n if upto is None else int(upto)
    if not 0 <= k <= n:
        raise ContractError(f"upto={k} outside [0, {n}]")
    pts = pos[:k + 1]
    if isinstance(region, Cube):
        return int(cube_contains_points(region.center, region.side,
                                        pts).sum())
    sites = np.asarray(region, dtype=np.int64)
    if sites.size == 0:
        return 0
    packer = make_packer(pts, sites)
    skeys = np.unique(packer.pack(sites))
    return int(np.isin(packer.pack(pts), skeys).sum())


@dataclass
class LocalTimeField:
    """Occupation counts on the r-grid: cell center -> ell_n(Q(x, r))."""

    r: int
    d: int
    n: int
    centers: np.ndarray  # (m, d) cell centers in r Z^d
    counts: np.ndarray   # (m,) occupation counts

    def total(self) -> int:
        return int(self.counts.sum())

    def as_dict(self) -> dict:
        return {tuple(map(int, c)): int(v)
                for c, v in zip(self.centers, self.counts)}


def occupancy_field(path, r: int) -> LocalTimeField:
    """Counts per grid-aligned cube; total mass is n + 1."""
    if r < 1:
        raise ContractError("r must be >= 1")
    pos = _positions_of(path)
    cells = grid_coords(pos, r)
    packer = make_packer(cells)
    keys = packer.pack(cells)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    boundaries = np.empty(sk.shape[0], dtype=bool)
    boundaries[:1] = True
    np.not_equal(sk[1:], sk[:-1], out=boundaries[1:])
    starts = np.nonzero(boundaries)[0]
    counts = np.diff(np.append(starts, sk.shape[0]))
    centers = cells[order[starts]] * r
    return LocalTimeField(r=r, d=pos.shape[1], n=pos.shape[0] - 1,
                          centers=centers, counts=counts)


# ---------------------------------------------------------------------------
# walker-centered cube occupancy (exact sliding box sums)


def walker_cube_bound(path, r: int) -> np.ndarray:
    """Cheap per-index upper bound on ell_n(Q(S_k, r)): occupation of the
    <= 2^d grid cells the walker window straddles (a valid bound because
    occupation counts carry visit multiplicity, so no volume cap applies).
    """
    pos = _positions_of(path)
    n1, d = pos.shape
    u = pos + r // 2
    dcells = u // r
    wcells = pos // r
    packer = make_packer(dcells, wcells, wcells + 1)
    ucells, tot = np.unique(packer.pack(dcells), return_counts=True)
    offsets = np.stack(np.meshgrid(*([np.array([0, 1])] * d),
                                   indexing="ij"), axis=-1).reshape(-1, d)
    bound = np.zeros(n1, dtype=np.int64)
    last = max(len(ucells) - 1, 0)
    for off in offsets:
        qk = packer.pack(wcells + off)
        slot = np.minimum(np.searchsorted(ucells, qk), last)
        hit = ucells[slot] == qk
        bound += np.where(hit, tot[slot], 0)
    return bound


def walker_cube_bound_at(path, r: int, indices: np.ndarray) -> np.ndarray:
    """Refined upper bound at a subset of indices: cover the window with
    <= 3^d cells of side ~r/2, which tightens the plain 2^d-cell bound."""
    pos = _positions_of(path)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return np.zeros(0, dtype=np.int64)
    d = pos.shape[1]
    s2 = max(1, (r + 1) // 2)
    cells = pos // s2
    anchors = (pos[indices] - r // 2)
    base = anchors // s2
    reach = (anchors + r - 1) // s2 - base  # 0..2 cells per axis
    packer = make_packer(cells, base, base + 2)
    ucells, tot = np.unique(packer.pack(cells), return_counts=True)
    bound = np.zeros(indices.size, dtype=np.int64)
    last = max(len(ucells) - 1, 0)
    offsets = np.stack(np.meshgrid(*([np.arange(3)] * d), indexing="ij"),
                       axis=-1).reshape(-1, d)
    for off in offsets:
        inside = (off <= reach).all(axis=1)
        if not inside.any():
            continue
        qk = packer.pack(base + off)
        slot = np.minimum(np.searchsorted(ucells, qk), last)
        hit = (ucells[slot] == qk) & inside
        bound += np.where(hit, tot[slot], 0)
    return bound


def walker_cube_occupancy_at(path, r: int, indices: np.ndarray) -> np.ndarray:
    """Exact ell_n(Q(S_k, r)) for a subset of indices only.

    Small windows sum their r^d offsets through packed-key lookups; for
    larger windows a direct membership count over all positions is
    cheaper and radius independent.
    """
    pos = _positions_of(path)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return np.zeros(0, dtype=np.int64)
    d = pos.shape[1]
    if r ** d <= 2048:
        return _occupancy_at_by_offsets(pos, r, d, indices)
    out = np.empty(indices.size, dtype=np.int64)
    p32 = pos.astype(np.int32, copy=False)
    for row, k in enumerate(indices):
        delta = p32 - p32[k]
        out[row] = np.logical_and(2 * delta >= -r,
                                  2 * delta < r).all(axis=1).sum()
    return out


def _occupancy_at_by_offsets(pos, r, d, indices) -> np.ndarray:
    lo = -(r // 2)
    packer = make_packer(pos, margin=r + 1)
    site_keys, site_counts = np.unique(packer.pack(pos), return_counts=True)
    shifts = np.cumsum([0] + list(packer.bits[:-1]))
    axis_strides = np.array([1 << int(s) for s in shifts], dtype=np.int64)
    base = packer.pack(pos[indices] + lo)
    grid = np.meshgrid(*([np.arange(r, dtype=np.int64)] * d), indexing="ij")
    deltas = np.zeros(r ** d, dtype=np.int64)
    for g, stride in zip(grid, axis_strides):
        deltas += g.ravel() * stride
    out = np.zeros(indices.size, dtype=np.int64)
    last = len(site_keys) - 1
    for delta in deltas:
        qk = base + delta
        slot = np.minimum(np.searchsorted(site_keys, qk), last)
        hit = site_keys[slot] == qk
        out += np.where(hit, site_counts[slot], 0)
    return out


def walker_cube_occupancy(path, r: int,
                          threshold: float | None = None) -> np.ndarray | None:
    """ell_n(Q(S_k, r)) for every k, exactly.

    In coordinates shifted by floor(r/2), the walker cube becomes the
    window [S_k, S_k + r - 1]^d, which straddles at most two r-grid cells
    per axis.  Small windows are summed directly over their r^d offsets;
    larger ones go through per-cell prefix sums with inclusion-exclusion
    corners.  When ``threshold`` is given and a cheap cell-total bound
    already rules out any k reaching it, returns None (meaning: no index
    qualifies, the exact pass was skipped).
    """
    pos = _positions_of(path)
    n1, d = pos.shape
    if threshold is not None and threshold > n1:
        return None
    # data cells: shifted site coordinates u = y + floor(r/2), cell = u // r
    u = pos + r // 2
    dcells = u // r
    local = u - dcells * r
    # query window anchor: base cell b0 = floor(S_k / r), split t = S_k mod r
    wcells = pos // r if r > 1 else pos
    t_split = pos - wcells * r
    packer = make_packer(dcells, wcells, wcells + 1)
    dkeys = packer.pack(dcells)
    ucells, inv, tot = np.unique(dkeys, return_inverse=True,
                                 return_counts=True)
    offsets = np.stack(np.meshgrid(*([np.array([0, 1])] * d),
                                   indexing="ij"), axis=-1).reshape(-1, d)

    if threshold is not None:
        bound = np.zeros(n1, dtype=np.int64)
        for off in offsets:
            qk = packer.pack(wcells + off)
            slot = np.searchsorted(ucells, qk)
            slot = np.minimum(slot, max(len(ucells) - 1, 0))
            hit = ucells[slot] == qk
            bound += np.where(hit, tot[slot], 0)
        if bound.max() < threshold:
            return None

    if r ** d <= 4 ** d:
        return _occupancy_by_offsets(pos, r, d)
    return _occupancy_by_prefix(pos, r, d, local, packer, ucells, inv,
                                wcells, t_split, offsets)


def _occupancy_by_offsets(pos: np.ndarray, r: int, d: int) -> np.ndarray:
    """Window sum as r^d shifted lookups in packed-key arithmetic."""
    lo = -(r // 2)
    packer = make_packer(pos, margin=r + 1)
    site_keys, site_counts = np.unique(packer.pack(pos), return_counts=True)
    out = np.zeros(pos.shape[0], dtype=np.int64)
    shifts = np.cumsum([0] + list(packer.bits[:-1]))
    axis_strides = np.array([1 << int(s) for s in shifts], dtype=np.int64)
    base = packer.pack(pos + lo)
    grid = np.meshgrid(*([np.arange(r, dtype=np.int64)] * d), indexing="ij")
    deltas = np.zeros(r ** d, dtype=np.int64)
    for g, stride in zip(grid, axis_strides):
        deltas += g.ravel() * stride
    last = len(site_keys) - 1
    for delta in deltas:
        qk = base + delta
        slot = np.minimum(np.searchsorted(site_keys, qk), last)
        hit = site_keys[slot] == qk
        out += np.where(hit, site_counts[slot], 0)
    return out


def _occupancy_by_prefix(pos, r, d, local, packer, ucells, inv,
                         wcells, t_split, offsets) -> np.ndarray:
    """Window sum via per-cell d-dimensional exclusive prefix tables."""
    ncells = len(ucells)
    brick = np.zeros((ncells,) + (r + 1,) * d, dtype=np.int64)
    idx = (inv,) + tuple(local[:, j] + 1 for j in range(d))
    np.add.at(brick, idx, 1)
    for axis in range(d):
        np.cumsum(brick, axis=axis + 1, out=brick)
    flat = brick.reshape(ncells, -1)
    strides = np.array([(r + 1) ** (d - 1 - j) for j in range(d)],
                       dtype=np.int64)

    n1 = pos.shape[0]
    out = np.zeros(n1, dtype=np.int64)
    zero = np.zeros(n1, dtype=np.int64)
    full_hi = np.full(n1, r - 1, dtype=np.int64)
    for cell_off in offsets:
        qk = packer.pack(wcells + cell_off)
        slot = np.searchsorted(ucells, qk)
        slot = np.minimum(slot, max(ncells - 1, 0))
        hit = ucells[slot] == qk
        if not hit.any():
            continue
        # the window's part inside this cell, in local coordinates:
        # base cell (off 0): [t, r-1]; next cell (off 1): [0, t-1]
        total = np.zeros(n1, dtype=np.int64)
        for corner in offsets:
            sign = (-1) ** (d - int(corner.sum()))
            index = np.zeros(n1, dtype=np.int64)
            for j in range(d):
                if cell_off[j] == 0:
                    lo_j, hi_j = t_split[:, j], full_hi
                else:
                    lo_j, hi_j = zero, t_split[:, j] - 1
                pick = hi_j + 1 if corner[j] == 1 else lo_j
                index += np.maximum(pick, 0) * strides[j]
            total += sign * flat[slot, index]
        out += np.where(hit, total, 0)
    return out


def occupancy_bruteforce(path, r: int) -> np.ndarray:
    """Reference O(n^2) walker-cube occupancy used as a test oracle."""
    pos = _positions_of(path)
    out = np.empty(pos.shape[0], dtype=np.int64)
    for k in range(pos.shape[0]):
        delta = pos - pos[k]
        out[k] = np.logical_and(2 * delta >= -r, 2 * delta < r).all(axis=1).sum()
    return out


# ---------------------------------------------------------------------------
# intersections and exact decomposition identities


def _segment_unique_keys(keys: np.ndarray, a: int, b: int) -> np.ndarray:
    """Distinct keys of R[a, b] (both endpoints included)."""
    return np.unique(keys[a:b + 1])


def intersect_ranges(path_a, path_b) -> int:
    """|R_A cap R_B| for two walks in the same dimension."""
    pos_a = _positions_of(path_a)
    pos_b = _positions_of(path_b)
    if pos_a.shape[1] != pos_b.shape[1]:
        raise ContractError("dimension mismatch between walks")
    packer = make_packer(pos_a, pos_b)
    ka = np.unique(packer.pack(pos_a))
    kb = np.unique(packer.pack(pos_b))
    return int(np.intersect1d(ka, kb, assume_unique=True).size)


def verify_inclusion_exclusion(path, n: int, m: int) -> dict:
    """Both sides of |R_{n+m}| = |R_n| + |R[n,n+m]| - |R_n cap R[n,n+m]|."""
    pos = _positions_of(path)
    if n + m > pos.shape[0] - 1:
        raise ContractError("n + m exceeds the path length")
    keys = path_keys(pos)
    left = _segment_unique_keys(keys, 0, n + m).size
    first = _segment_unique_keys(keys, 0, n)
    second = _segment_unique_keys(keys, n, n + m)
    inter = np.intersect1d(first, second, assume_unique=True).size
    right = first.size + second.size - inter
    return {"lhs": int(left), "rhs": int(right),
            "parts": {"first": int(first.size), "second": int(second.size),
                      "intersection": int(inter)}}


def dyadic_decompose(path, levels: int) -> dict:
    """Uncentered dyadic range decomposition.

    |R_n| = sum over level-L blocks of |R_i^L| minus, for every level, the
    intersections of sibling blocks.  Blocks share endpoints, so the
    identity is an exact telescoping of the two-block identity.  Block
    step-lengths differ by at most one unit at every level.
    """
    pos = _positions_of(path)
    n = pos.shape[0] - 1
    if 2 ** levels > max(n, 1):
        raise ContractError(f"2^{levels} exceeds the path length {n}")
    keys = path_keys(pos)
    intervals = [(0, n)]
    cross_terms = []
    per_level = []
    for _ in range(levels):
        nxt = []
        lvl_cross = 0
        for a, b in intervals:
            mid = (a + b) // 2
            left = _segment_unique_keys(keys, a, mid)
            right = _segment_unique_keys(keys, mid, b)
            lvl_cross += int(np.intersect1d(left, right,
                                            assume_unique=True).size)
            nxt += [(a, mid), (mid, b)]
        intervals = nxt
        cross_terms.append(lvl_cross)
        per_level.append([b - a for a, b in intervals])
    leaf_sum = sum(int(_segment_unique_keys(keys, a, b).size)
                   for a, b in intervals)
    lhs = int(np.unique(keys).size)
    rhs = leaf_sum - sum(cross_terms)
    return {"lhs": lhs, "rhs": rhs, "leaf_sum": leaf_sum,
            "cross_terms": cross_terms,
            "block_lengths": per_level[-1] if per_level else [n]}


# ---------------------------------------------------------------------------
# sampling helpers


def sample_walk_statistics(d: int, n: int, samples: int, seed: int,
                           stream_start: int = 0,
                           want_return: bool = False,
                           byte_budget: int = 2**28):
    """Per-walk |R_n| (and optionally a returned-to-origin flag).

    One independent stream per replicate; results are identical however
    the internal batching chunks the work.
    """
    per_walk = 4 * (n + 1) * d + 16 * (n + 1)
    chunk = max(1, min(samples, byte_budget // max(per_walk, 1)))
    sizes = np.empty(samples, dtype=np.int64)
    returned = np.zeros(samples, dtype=bool) if want_return else None
    done = 0
    while done < samples:
        cnt = min(chunk, samples - done)
        steps = simulate_steps_batch(d, n, seed, stream_start + done, cnt)
        pos = batch_positions(d, steps, dtype=np.int32)
        lo = pos.min(axis=1)
        spans = pos.max(axis=1) - lo + 1
        bits = np.ceil(np.log2(spans + 1)).astype(np.int64)
        if bits.sum(axis=1).max() > 62:
            raise ContractError("coordinate span too large to pack")
        keys = np.zeros((cnt, n + 1), dtype=np.int64)
        for j in range(d):
            shift = bits[:, :j].sum(axis=1) if j else np.zeros(cnt,
                                                               dtype=np.int64)
            keys |= (pos[:, :, j].astype(np.int64)
                     - lo[:, j, None]) << shift[:, None]
        keys.sort(axis=1)
        new = np.ones((cnt, n + 1), dtype=bool)
        np.not_equal(keys[:, 1:], keys[:, :-1], out=new[:, 1:])
        sizes[done:done + cnt] = new.sum(axis=1)
        if want_return and n > 0:
            at_origin = (pos[:, 1:, :] == 0).all(axis=2)
            returned[done:done + cnt] = at_origin.any(axis=1)
        done += cnt
    return (sizes, returned) if want_return else sizes


def estimate_gamma(d: int, n: int, samples: int, seed: int,
                   stream_start: int = 0) -> dict:
    """Two estimators of the escape constant: |R_n|/n and no-return."""
    if d < 3:
        raise ContractError("gamma estimation requires d >= 3")
    sizes, returned = sample_walk_statistics(d, n, samples, seed,
                                             stream_start, want_return=True)
    g_range = float(sizes.mean() / n)
    se_range = float(sizes.std(ddof=1) / math.sqrt(samples) / n)
    p_ret = float(returned.mean())
    g_return = 1.0 - p_ret
    se_return = float(math.sqrt(max(p_ret * (1 - p_ret), 1e-12) / samples))
    joint = math.hypot(se_range, se_return)
    return {
        "d": d, "n": n, "samples": samples,
        "gamma_range": g_range, "se_range": se_range,
        "gamma_return": g_return, "se_return": se_return,
        "joint_se": joint,
        "consistent_2se": abs(g_range - g_return) < 2 * joint + 1e-12,
        "mean_minus_gamma_n": float(sizes.mean() - g_return * n),
    }


@dataclass
class MomentReport:
    d: int
    n: int
    samples: int
    mean: float
    variance: float
    skewness: float
    se_mean: float
    se_variance: float
    se_skewness: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("d", "n", "samples", "mean", "variance", "skewness",
                 "se_mean", "se_variance", "se_skewness")}


def moment_report(d: int, n: int, samples: int, seed: int,
                  stream_start: int = 0,
                  sizes: np.ndarray | None = None) -> MomentReport:
    """Sample moments of |R_n| with standard errors."""
    if sizes is None:
        sizes = sample_walk_statistics(d, n, samples, seed, stream_start)
    m = sizes.shape[0]
    mean = float(sizes.mean())
    var = float(sizes.var(ddof=1)) if m > 1 else 0.0
    sd = math.sqrt(var) if var > 0 else 1.0
    centered = sizes - mean
    m3 = float((centered ** 3).mean())
    m4 = float((centered ** 4).mean())
    skew = m3 / sd ** 3 if var > 0 else 0.0
    se_mean = sd / math.sqrt(m)
    se_var = math.sqrt(max(m4 - var ** 2 * (m - 3) / (m - 1), 0.0) / m) \
        if m > 3 else float("inf")
    se_skew = math.sqrt(6.0 * m * (m - 1) / ((m - 2) * (m + 1) * (m + 3))) \
        if m > 3 else float("inf")
    return MomentReport(d=d, n=n, samples=m, mean=mean, variance=var,
                        skewness=skew, se_mean=se_mean, se_variance=se_var,
                        se_skewness=se_skew)


def simulate_pair_intersection(d: int, n: int, rng_a: RngStream,
                               rng_b: RngStream) -> int:
    """|R_n cap R'_n| for two independent walks (test-scale helper)."""
    steps_a = rng_a.generator().integers(0, 2 * d, size=n, dtype=np.uint8)
    steps_b = rng_b.generator().integers(0, 2 * d, size=n, dtype=np.uint8)
    pos_a = steps_to_positions(d, steps_a)
    pos_b = steps_to_positions(d, steps_b)
    return intersect_ranges(pos_a, pos_b)
