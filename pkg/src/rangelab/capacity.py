"""Discrete Newtonian capacity of finite lattice sets.

Cap(A) = sum over x in A of the probability that a walk from x never
returns to A.  For small sets this is computed exactly through the
last-exit linear system sum_y G(y - x) e(y) = 1 (x in A): the solution e
is the equilibrium measure and its total mass is the capacity.  A direct
Monte Carlo estimator simulates the definition and is used as the
independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError, ResourceError
from .green import GreenOracle
from .lattice import RngStream, cube_sites, make_packer, step_deltas
from .stats import wilson_ci

EXACT_SOLVE_LIMIT = 5000


def as_site_array(sites) -> np.ndarray:
    """Normalize to a unique (m, d) int64 site array."""
    arr = np.asarray(sites, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ContractError("a site set must be a nonempty (m, d) array")
    uniq = np.unique(arr, axis=0)
    if uniq.shape[0] != arr.shape[0]:
        raise ContractError("duplicate sites in set")
    return arr


def set_diameter(sites: np.ndarray) -> int:
    lo = sites.min(axis=0)
    hi = sites.max(axis=0)
    return int(np.abs(hi - lo).max())


@dataclass
class EquilibriumSolution:
    sites: np.ndarray
    e: np.ndarray
    cap: float
    method: str
    error: float = 0.0
    residual: float = 0.0
    condition: float | None = None
    bias_bound: float = 0.0
    extras: dict = field(default_factory=dict)


def _green_matrix(sites: np.ndarray, oracle: GreenOracle,
                  block: int = 512) -> np.ndarray:
    m = sites.shape[0]
    M = np.empty((m, m))
    for lo in range(0, m, block):
        hi = min(lo + block, m)
        diffs = sites[lo:hi, None, :] - sites[None, :, :]
        M[lo:hi] = oracle.values(diffs)
    return M


def capacity_exact(sites, oracle: GreenOracle,
                   residual_tol: float = 1e-8) -> EquilibriumSolution:
    """Solve the last-exit system G e = 1 for the equilibrium measure."""
    sites = as_site_array(sites)
    m = sites.shape[0]
    if m > EXACT_SOLVE_LIMIT:
        raise ResourceError(f"|set| = {m} beyond the dense solve envelope "
                            f"({EXACT_SOLVE_LIMIT})")
    if oracle.d != sites.shape[1]:
        raise ContractError("green oracle dimension mismatch")
    M = _green_matrix(sites, oracle)
    if not np.allclose(M, M.T, atol=1e-12):
        raise ContractError("inconsistent green oracle: matrix not symmetric")
    ones = np.ones(m)
    factor = cho_factor(M, lower=False, check_finite=False)
    e = cho_solve(factor, ones, check_finite=False)
    for _ in range(3):
        resid = ones - M @ e
        if np.abs(resid).max() < residual_tol:
            break
        e = e + cho_solve(factor, resid, check_finite=False)
    residual = float(np.abs(ones - M @ e).max())
    condition = float(np.linalg.cond(M)) if m <= 2000 else None
    extras = {}
    if condition is not None and condition > 1e10:
        extras["warning"] = f"ill-conditioned last-exit system: cond={condition:.3e}"
    if residual >= residual_tol:
        extras["warning"] = f"residual {residual:.2e} above {residual_tol}"
    cap = float(e.sum())
    if cap <= 0:
        raise ContractError("capacity came out nonpositive; oracle broken")
    return EquilibriumSolution(sites=sites, e=e, cap=cap, method="exact",
                               residual=residual, condition=condition,
                               extras=extras)


def capacity_mc(sites, trials: int, oracle: GreenOracle,
                rng: RngStream, escape_radius: int | None = None,
                correct_exits: bool = True,
                max_step_factor: int = 64) -> EquilibriumSolution:
    """Monte Carlo capacity: escape frequencies from every site.

    A walk from x fails when it revisits the set, and is stopped once it
    leaves the ball of radius R around the set's center.  Stopping early
    is unbiased after the exit correction: by last exit,
    P_y(hit set) = sum_x G(y - x) e(x), so the raw escape frequencies are
    corrected through a fixed-point pass over the recorded exit points.
    The uncorrected sphere-return mass is also reported as a bias bound.
    """
    sites = as_site_array(sites)
    m, d = sites.shape
    if trials <= 0:
        raise ContractError("trials must be positive")
    diam = set_diameter(sites)
    R = escape_radius if escape_radius is not None else max(4 * diam, 64)
    if R < 2 * diam:
        raise ContractError(f"escape radius {R} below twice the diameter")
    center = np.rint((sites.min(axis=0) + sites.max(axis=0)) / 2).astype(np.int64)

    packer = make_packer(sites, margin=2)
    site_keys = np.sort(packer.pack(sites))
    bbox_lo = sites.min(axis=0) - 1
    bbox_hi = sites.max(axis=0) + 1
    deltas = step_deltas(d)

    walkers = m * trials
    start = np.repeat(np.arange(m), trials)
    pos = sites[start].copy()
    alive = np.ones(walkers, dtype=bool)
    failed = np.zeros(walkers, dtype=bool)
    exit_pos = np.zeros((walkers, d), dtype=np.int64)
    exited = np.zeros(walkers, dtype=bool)

    gen = rng.generator()
    r2 = float(R) * float(R)
    max_steps = max_step_factor * R * R
    check_every = max(R // 2, 8)
    step = 0
    idx = np.arange(walkers)
    while alive.any() and step < max_steps:
        live_idx = idx[alive]
        sub = pos[live_idx]
        for _ in range(check_every):
            codes = gen.integers(0, 2 * d, size=live_idx.size, dtype=np.uint8)
            sub += deltas[codes]
            step += 1
            inside_box = np.logical_and(sub >= bbox_lo, sub <= bbox_hi).all(axis=1)
            if inside_box.any():
                keys = packer.pack(sub[inside_box])
                slot = np.minimum(np.searchsorted(site_keys, keys),
                                  site_keys.size - 1)
                hit = site_keys[slot] == keys
                if hit.any():
                    hit_rows = live_idx[np.nonzero(inside_box)[0][hit]]
                    failed[hit_rows] = True
                    alive[hit_rows] = False
        pos[live_idx] = sub
        # lazy exit check: stopping anywhere outside radius R is valid
        # because the fixed-point correction uses the recorded exit point
        far = ((pos[live_idx] - center) ** 2).sum(axis=1) >= r2
        far &= alive[live_idx]
        if far.any():
            rows = live_idx[far]
            exited[rows] = True
            exit_pos[rows] = pos[rows]
            alive[rows] = False
    leftovers = int(alive.sum())
    if leftovers:
        rows = idx[alive]
        exited[rows] = True
        exit_pos[rows] = pos[rows]
        alive[rows] = False

    per_trial = exited.astype(np.float64)
    if correct_exits and exited.any():
        rows = np.nonzero(exited)[0]
        diffs = exit_pos[rows][:, None, :] - sites[None, :, :]
        gvals = oracle.values(diffs)
        e_vec = per_trial.reshape(m, trials).mean(axis=1)
        for _ in range(6):
            p_hit = np.clip(gvals @ e_vec, 0.0, 1.0)
            v = np.zeros(walkers)
            v[rows] = 1.0 - p_hit
            e_vec = v.reshape(m, trials).mean(axis=1)
        per_trial = np.zeros(walkers)
        per_trial[rows] = 1.0 - np.clip(gvals @ e_vec, 0.0, 1.0)
        residual_b = float(np.max(np.clip(gvals @ e_vec, 0.0, 1.0)) ** 2)
    else:
        residual_b = 0.0

    values = per_trial.reshape(m, trials)
    e = values.mean(axis=1)
    cap = float(e.sum())
    se_sites = values.std(axis=1, ddof=1) / math.sqrt(trials) if trials > 1 \
        else np.full(m, np.inf)
    se = float(np.sqrt((se_sites ** 2).sum()))

    sphere_bias = _sphere_return_bound(sites, center, R, oracle)
    extras = {"leftover_walkers": leftovers,
              "escape_radius": int(R),
              "second_order_bias": residual_b,
              "uncorrected_cap": float(exited.reshape(m, trials)
                                       .mean(axis=1).sum())}
    return EquilibriumSolution(sites=sites, e=e, cap=cap, method="monte-carlo",
                               error=se, bias_bound=sphere_bias,
                               extras=extras)


def _sphere_return_bound(sites, center, R, oracle, probes: int = 256) -> float:
    """sup over the sphere of sum_x G(x - y), from the fitted far law."""
    d = sites.shape[1]
    rng = np.random.Generator(np.random.Philox(key=np.array([17, 29],
                                                            dtype=np.uint64)))
    dirs = rng.normal(size=(probes, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = np.rint(center + R * dirs).astype(np.int64)
    vals = oracle.values(pts[:, None, :] - sites[None, :, :]).sum(axis=1)
    return float(vals.max())


def capacity_volume_lower(sites, oracle: GreenOracle) -> dict:
    """The scale-free ratio cap(set) / |set|^(1 - 2/d)."""
    sites = as_site_array(sites)
    d = sites.shape[1]
    sol = capacity_exact(sites, oracle)
    denom = sites.shape[0] ** (1.0 - 2.0 / d)
    return {"cap": sol.cap, "size": sites.shape[0],
            "ratio": sol.cap / denom, "solution": sol}


def capacity_time_inequality(sites, oracle: GreenOracle) -> dict:
    """cap(set) * sup_y E_y[time in set] >= |set|.

    The sup is evaluated over the set plus a one-cube ring around it;
    restricting the probe set can only lower the left side, so a PASS is
    trustworthy.
    """
    sites = as_site_array(sites)
    m, d = sites.shape
    sol = capacity_exact(sites, oracle)
    ring_offsets = np.stack(np.meshgrid(*([np.array([-1, 0, 1])] * d),
                                        indexing="ij"), axis=-1).reshape(-1, d)
    probes = np.unique((sites[:, None, :] + ring_offsets[None, :, :])
                       .reshape(-1, d), axis=0)
    total = np.zeros(probes.shape[0])
    block = max(1, 2**22 // max(m, 1))
    for lo in range(0, probes.shape[0], block):
        hi = min(lo + block, probes.shape[0])
        diffs = probes[lo:hi, None, :] - sites[None, :, :]
        total[lo:hi] = oracle.values(diffs).sum(axis=1)
    sup_occ = float(total.max())
    product = sol.cap * sup_occ
    return {"cap": sol.cap, "sup_occupation": sup_occ, "product": product,
            "size": m, "holds": product >= m * (1 - 1e-6),
            "product_ratio": product / m}


# ---------------------------------------------------------------------------
# separated sets and the high-capacity subset extraction


@dataclass
class SeparatedSet:
    """Finite centers with pairwise sup-distance strictly above 2r."""

    r: int
    centers: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.int64)
        if self.centers.ndim != 2 or self.centers.shape[0] == 0:
            raise ContractError("centers must be a nonempty (m, d) array")
        m = self.centers.shape[0]
        if m > 1:
            sep = _min_pairwise_sup(self.centers)
            if sep <= 2 * self.r:
                raise ContractError(
                    f"separation {sep} not above 2r = {2 * self.r}")

    @property
    def size(self) -> int:
        return int(self.centers.shape[0])


def _min_pairwise_sup(centers: np.ndarray) -> int:
    m = centers.shape[0]
    best = np.inf
    block = max(1, 2**22 // max(m, 1))
    for lo in range(0, m, block):
        hi = min(lo + block, m)
        diff = np.abs(centers[lo:hi, None, :] - centers[None, :, :]).max(axis=2)
        rows = np.arange(lo, hi)
        diff[rows - lo, rows] = np.iinfo(np.int64).max
        best = min(best, diff.min())
    return int(best)


def union_of_cubes(centers: np.ndarray, r: int) -> np.ndarray:
    parts = [cube_sites(c, r) for c in centers]
    return np.unique(np.concatenate(parts, axis=0), axis=0)


def extract_high_capacity_subset(sep: SeparatedSet,
                                 oracle: GreenOracle | None = None,
                                 with_certificate: bool = True) -> dict:
    """Packing extraction of a subset with near-maximal capacity.

    Scans the centers in lexicographic order, keeping those whose
    R/2-cubes stay disjoint from all kept ones (R = floor(r |C|^(2/d^2))),
    then truncates to N0 = min(kept, floor(|C|^(1-2/d))).  Guarantees
    2^-d |C|^(1-2/d) <= |U| <= |C|^(1-2/d) and that the kept R-cubes cover
    the input.  The certificate reports the sup over probes of the Green
    mass of the union of r-cubes, whose ratio to r^2 is the measured
    constant.
    """
    C = sep.centers
    r = sep.r
    mC, d = C.shape
    R = int(r * mC ** (2.0 / d ** 2))
    order = np.lexsort(C.T[::-1])
    picked: list[int] = []
    for row in order:
        z = C[row]
        ok = True
        for prow in picked:
            if 2 * int(np.abs(C[prow] - z).max()) < R:
                ok = False
                break
        if ok:
            picked.append(int(row))
    n_picked = len(picked)
    target = mC ** (1.0 - 2.0 / d)
    n0 = min(n_picked, max(int(math.floor(target)), 1))
    U = C[np.array(picked[:n0], dtype=np.int64)]

    covered = True
    for row in order:
        z = C[row]
        if not any(2 * int(np.abs(C[p] - z).max()) < R for p in picked):
            covered = False
            break
    bracket_lo = target / 2 ** d
    result = {
        "U": U, "size": n0, "R": R, "picked_total": n_picked,
        "bracket": (bracket_lo, target),
        "bracket_ok": bracket_lo <= n0 <= target + 1e-9,
        "covered": covered,
    }
    if with_certificate and oracle is not None:
        union = union_of_cubes(U, r)
        ring_offsets = np.stack(np.meshgrid(*([np.array([-1, 0, 1])] * d),
                                            indexing="ij"),
                                axis=-1).reshape(-1, d)
        probes = np.unique((union[:, None, :] + ring_offsets[None, :, :])
                           .reshape(-1, d), axis=0)
        occ = np.zeros(probes.shape[0])
        block = max(1, 2**22 // max(union.shape[0], 1))
        for lo in range(0, probes.shape[0], block):
            hi = min(lo + block, probes.shape[0])
            diffs = probes[lo:hi, None, :] - union[None, :, :]
            occ[lo:hi] = oracle.values(diffs).sum(axis=1)
        sup_occ = float(occ.max())
        result["union_sites"] = union
        result["sup_occupation"] = sup_occ
        result["occupation_over_r2"] = sup_occ / r ** 2
    return result


def filling_probability_check(centers, r: int, rho_grid, n: int,
                              samples: int, seed: int, d: int,
                              oracle: GreenOracle | None = None,
                              stream_start: int = 0) -> dict:
    """Monte Carlo estimate of filling every cube to density rho.

    Estimates P(ell_n(Q(x, r)) >= rho r^d for all x in centers) on a rho
    grid, reporting log-probabilities against rho * cap(union of cubes)
    to exhibit the exponential decay trend.  Zero-hit entries carry a
    one-sided Wilson upper bound and are flagged.
    """
    from .lattice import batch_positions, simulate_steps_batch

    centers = as_site_array(centers)
    if centers.shape[0] > 3 or r > 4:
        raise ContractError("filling check is restricted to tiny instances")
    rho_grid = sorted(float(x) for x in rho_grid)
    counts = np.zeros((samples, centers.shape[0]), dtype=np.int64)
    chunk = max(1, 2**26 // (4 * (n + 1) * d))
    done = 0
    while done < samples:
        cnt = min(chunk, samples - done)
        steps = simulate_steps_batch(d, n, seed, stream_start + done, cnt)
        pos = batch_positions(d, steps, dtype=np.int32)
        for ci, c in enumerate(centers):
            delta = pos - c.astype(np.int32)
            inside = np.logical_and(2 * delta >= -r, 2 * delta < r).all(axis=2)
            counts[done:done + cnt, ci] = inside.sum(axis=1)
        done += cnt
    cap_union = None
    if oracle is not None:
        cap_union = capacity_exact(union_of_cubes(centers, r), oracle).cap
    rows = []
    for rho in rho_grid:
        threshold = rho * r ** d
        hits = int((counts >= threshold).all(axis=1).sum())
        lo, hi = wilson_ci(hits, samples)
        rows.append({
            "rho": rho, "hits": hits, "samples": samples,
            "p_hat": hits / samples, "ci_low": lo, "ci_high": hi,
            "one_sided": hits == 0,
            "log_p": math.log(hits / samples) if hits else math.log(hi),
            "rho_cap": rho * cap_union if cap_union is not None else None,
        })
    return {"rows": rows, "cap_union": cap_union, "r": r,
            "centers": centers}


def random_site_set(d: int, size: int, spread: int, rng: RngStream) -> np.ndarray:
    """A random set of `size` distinct sites in a box of the given spread."""
    gen = rng.generator()
    seen = {}
    out = []
    while len(out) < size:
        cand = gen.integers(-spread, spread + 1, size=(4 * size, d))
        for row in cand:
            key = tuple(int(v) for v in row)
            if key not in seen:
                seen[key] = True
                out.append(row)
                if len(out) == size:
                    break
    return np.array(out, dtype=np.int64)
