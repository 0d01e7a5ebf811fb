"""Multi-scale occupation machinery: dense-index sets, scale ladders,
hat partitions and the corrector budget.

The central objects, for a walk of length n:

* K_n(r, rho): indices k whose walker-centered cube Q(S_k, r) carries
  occupation at least rho r^d.
* K*_n(r, rho): the band version, occupation in [rho r^d, 2 rho r^d].
* C_n(r, rho) / V_n(r, rho): grid cubes of density rho and their union.
* the scale ladder rho_i = 2^(1-i) with r_i tied through
  rho_i r_i^(d-2) = C0 log n (d >= 5) or rho_i r_i = C0 log n (d = 3),
  the hat partition K^_i, and the five-term budget that dominates the
  corrector double sum.

The budget decomposition is implemented so the inequality

    corrector <= S1 + S2 + S3 + 2 S4 + S5

holds pathwise by construction: far pairs use the symmetrized
separation predicate (one endpoint outside the other's cube, either
order), which is monotone in the radius and covers every term the
near/far split produces.  See sigma_budget for the bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .green import GreenTable, _iter_ball_pairs
from .lattice import WalkPath, first_visit_mask, make_packer
from .range_stats import occupancy_field, walker_cube_occupancy

TRANSFER_C = 1.0 / (2.0 * (math.e - 1.0))  # the adapted-sum transfer constant
DEFAULT_C0 = 1.0
DEFAULT_C0_SMALL = 1.0 / 8.0  # c0 in the d=3 terminal-level rule
# measured stand-ins for the existential lower-bound rate constants; they
# set the corrector horizon T and are recorded in every manifest
DEFAULT_KAPPA_LOWER = {3: 4.0, "high": 0.25}


def typical_params(d: int, n: int, zeta: float) -> dict:
    """The (rho_typ, tau_typ, chi_d) table plus the probing scale r_n."""
    if d == 4:
        raise ContractError("the folding table excludes d = 4")
    if d < 3:
        raise ContractError("d must be >= 3")
    if d == 3:
        rho_typ = zeta / n
        tau_typ = float(n)
        chi = 5.0 / 7.0
    else:
        rho_typ = 1.0
        tau_typ = float(zeta)
        chi = d / (d + 2.0)
    r_n = math.ceil((DEFAULT_C0 * math.log(n) / rho_typ) ** (1.0 / (d - 2)))
    return {"rho_typ": rho_typ, "tau_typ": tau_typ, "chi": chi,
            "r_n": int(max(r_n, 1))}


@dataclass
class ScaleLevel:
    i: int
    rho: float
    r: int
    L: float


@dataclass
class ScaleSchedule:
    d: int
    n: int
    zeta: float
    C0: float
    c0: float
    kappa_lower: float
    T: int
    levels: list  # of ScaleLevel
    terminal: int | None  # d=3 cutoff level I; None for d >= 5
    in_window: bool
    window: tuple

    def level(self, i: int) -> ScaleLevel:
        return self.levels[i - 1]

    @property
    def nlevels(self) -> int:
        return len(self.levels)


def scale_schedule(d: int, n: int, zeta: float, C0: float = DEFAULT_C0,
                   c0: float = DEFAULT_C0_SMALL,
                   kappa_lower: float | None = None,
                   max_levels: int = 64) -> ScaleSchedule:
    """The (rho_i, r_i, L_i) ladder, the horizon T and the d=3 cutoff."""
    if n < 2:
        raise ContractError("need n >= 2")
    if d == 4 or d < 3:
        raise ContractError("schedules exist for d = 3 and d >= 5")
    if zeta <= 0:
        raise ContractError("zeta must be positive")
    if kappa_lower is None:
        kappa_lower = DEFAULT_KAPPA_LOWER[3] if d == 3 else \
            DEFAULT_KAPPA_LOWER["high"]
    logn = math.log(n)
    chi = 5.0 / 7.0 if d == 3 else d / (d + 2.0)
    window = (n ** chi * logn, 0.2 * n)
    in_window = window[0] <= zeta <= window[1]

    if d == 3:
        T = math.ceil(TRANSFER_C / (2 * kappa_lower) * (zeta * n) ** (1.0 / 3))
    else:
        T = math.ceil(TRANSFER_C / (2 * kappa_lower) * zeta ** (2.0 / d))
    T = max(T, 2)

    levels = []
    terminal = None
    i = 1
    while i <= max_levels:
        rho = 2.0 ** (1 - i)
        if d == 3:
            r = math.ceil(C0 * logn / rho)
            L = zeta ** 2 / (n * rho ** 2)
        else:
            r = math.ceil((C0 * logn / rho) ** (1.0 / (d - 2)))
            L = zeta / rho ** (2.0 / (d - 2))
        r = max(r, 1)
        if r > n:
            break
        levels.append(ScaleLevel(i=i, rho=rho, r=int(r), L=float(L)))
        if d == 3 and rho <= c0 * zeta / n:
            terminal = i
            break
        i += 1
    if d == 3 and terminal is None:
        terminal = len(levels)
    return ScaleSchedule(d=d, n=n, zeta=float(zeta), C0=C0, c0=c0,
                         kappa_lower=kappa_lower, T=int(T), levels=levels,
                         terminal=terminal, in_window=in_window,
                         window=window)


# ---------------------------------------------------------------------------
# dense-index sets


def compute_Kn(path, r: int, rho: float,
               occupancy: np.ndarray | None = None,
               upto: int | None = None) -> np.ndarray:
    """Indices k <= n with ell_n(Q(S_k, r)) >= rho r^d.

    Uses a two-stage evaluation: a cheap per-index cell-total bound first,
    then exact window sums only where the bound allows qualification.
    """
    if r < 1 or rho <= 0:
        raise ContractError("need r >= 1 and rho > 0")
    d = _dim_of(path)
    tau = rho * float(r) ** d
    if occupancy is not None:
        occ = occupancy if upto is None else occupancy[:upto + 1]
        return np.nonzero(occ >= tau)[0]
    from .range_stats import (walker_cube_bound, walker_cube_bound_at,
                              walker_cube_occupancy_at)
    pos = path.positions() if isinstance(path, WalkPath) else path
    n1 = pos.shape[0]
    if tau > n1:
        return np.empty(0, dtype=np.int64)
    suspicious = np.nonzero(walker_cube_bound(pos, r) >= tau)[0]
    if suspicious.size and r >= 4:
        refined = walker_cube_bound_at(pos, r, suspicious)
        suspicious = suspicious[refined >= tau]
    if suspicious.size == 0:
        return np.empty(0, dtype=np.int64)
    occ_sub = walker_cube_occupancy_at(pos, r, suspicious)
    hits = suspicious[occ_sub >= tau]
    if upto is not None:
        hits = hits[hits <= upto]
    return hits


def compute_Kn_star(path, r: int, rho: float,
                    occupancy: np.ndarray | None = None) -> np.ndarray:
    """Band version: rho r^d <= ell_n(Q(S_k, r)) <= 2 rho r^d."""
    occ = occupancy if occupancy is not None else walker_cube_occupancy(path, r)
    if occ is None:
        return np.empty(0, dtype=np.int64)
    tau = rho * float(r) ** _dim_of(path)
    return np.nonzero((occ >= tau) & (occ <= 2 * tau))[0]


def _dim_of(path) -> int:
    if isinstance(path, WalkPath):
        return path.d
    return np.asarray(path).shape[-1]


def separated_core(path, kstar: np.ndarray, r: int) -> dict:
    """Greedy core of the band set: earliest surviving indices.

    Scans K* in time order; each pick removes every index whose position
    lies in the 2r-cube around it.  Tiling that cube by 4^d half-open
    r/2-cubes, each carrying at most 2 rho r^d band indices, gives the
    cardinality guarantee |C| >= |K*| / (2 4^d rho r^d) with
    rho r^d = min band occupancy; the actual minimum separation of the
    chosen centers is measured and returned (it is at least r).
    """
    kstar = np.asarray(kstar, dtype=np.int64)
    pos = path.positions() if isinstance(path, WalkPath) else np.asarray(path)
    if kstar.size == 0:
        return {"centers": np.empty((0, pos.shape[1]), dtype=np.int64),
                "times": np.empty(0, dtype=np.int64),
                "min_separation": None, "r": r, "size": 0}
    pts = pos[kstar]
    remaining = np.ones(kstar.size, dtype=bool)
    picks = []
    while remaining.any():
        j = int(np.nonzero(remaining)[0][0])
        picks.append(j)
        delta = pts - pts[j]
        inside = np.logical_and(delta >= -r, delta < r).all(axis=1)
        remaining &= ~inside
    centers = pts[picks]
    times = kstar[np.array(picks)]
    if len(picks) > 1:
        sep = _min_sep(centers)
    else:
        sep = None
    # every removed index sits within the 2r-cube of some center
    return {"centers": centers, "times": times, "min_separation": sep,
            "r": r, "size": len(picks)}


def _min_sep(centers: np.ndarray) -> int:
    diff = np.abs(centers[:, None, :] - centers[None, :, :]).max(axis=2)
    m = centers.shape[0]
    diff[np.arange(m), np.arange(m)] = np.iinfo(np.int64).max
    return int(diff.min())


def core_cardinality_bound(kstar_size: int, d: int, r: int,
                           rho: float) -> float:
    return kstar_size / (2.0 * 4 ** d * rho * float(r) ** d)


def compute_Cn_Vn(path, r: int, rho: float) -> dict:
    """Dense grid cubes C_n(r, rho) and their union V_n(r, rho)."""
    field_ = occupancy_field(path, r)
    tau = rho * float(r) ** field_.d
    dense = field_.counts >= tau
    centers = field_.centers[dense]
    counts = field_.counts[dense]
    return {
        "r": r, "rho": rho,
        "centers": centers,
        "cube_counts": counts,
        "num_cubes": int(dense.sum()),
        "volume": int(dense.sum()) * r ** field_.d,
        "local_time": int(counts.sum()),
    }


def vn_sites(cn: dict) -> np.ndarray:
    from .capacity import union_of_cubes
    if cn["num_cubes"] == 0:
        raise ContractError("V_n is empty")
    return union_of_cubes(cn["centers"], cn["r"])


# ---------------------------------------------------------------------------
# hat partition and the corrector budget


@dataclass
class HatPartition:
    labels: np.ndarray       # per index: 1..nlev finite, 0 = leftover
    leftover_is_terminal: bool  # d=3: leftover carries label I semantics
    level_sizes: dict
    leftover_size: int
    terminal: int | None


def hat_partition(path, schedule: ScaleSchedule,
                  occupancies: dict | None = None) -> HatPartition:
    """Disjoint cover of {0..n}: first scale at which an index is dense.

    For d >= 5 the leftover bucket is K^_infinity.  For d = 3 levels stop
    at the cutoff I and the leftover *is* K^_I by definition.
    """
    pos = path.positions() if isinstance(path, WalkPath) else path
    n1 = pos.shape[0]
    labels = np.zeros(n1, dtype=np.int32)
    top = (schedule.terminal - 1) if schedule.terminal is not None \
        else schedule.nlevels
    for lvl in schedule.levels[:top]:
        occ = None if occupancies is None else occupancies.get(lvl.i)
        members = compute_Kn(pos, lvl.r, lvl.rho, occupancy=occ)
        fresh = members[labels[members] == 0]
        labels[fresh] = lvl.i
    sizes = {int(i): int((labels == i).sum())
             for i in range(1, top + 1)}
    leftover = int((labels == 0).sum())
    return HatPartition(labels=labels,
                        leftover_is_terminal=schedule.terminal is not None,
                        level_sizes=sizes, leftover_size=leftover,
                        terminal=schedule.terminal)


def hat_sizes_with_L(schedule: ScaleSchedule, part: HatPartition) -> list:
    """(level, |K^_i|, L_i) rows including the leftover bucket."""
    rows = []
    top = (schedule.terminal - 1) if schedule.terminal is not None \
        else schedule.nlevels
    for lvl in schedule.levels[:top]:
        rows.append({"level": lvl.i, "size": part.level_sizes.get(lvl.i, 0),
                     "L": lvl.L, "r": lvl.r, "rho": lvl.rho})
    if schedule.terminal is not None:
        lvl = schedule.level(schedule.terminal)
        rows.append({"level": schedule.terminal, "size": part.leftover_size,
                     "L": lvl.L, "r": lvl.r, "rho": lvl.rho})
    else:
        rows.append({"level": None, "size": part.leftover_size,
                     "L": math.inf, "r": None, "rho": None})
    return rows


def _near_mask(delta: np.ndarray, radii: np.ndarray) -> np.ndarray:
    r = radii[:, None]
    return np.logical_and(2 * delta >= -r, 2 * delta < r).all(axis=1)


def _far_sym_mask(delta: np.ndarray, radii: np.ndarray) -> np.ndarray:
    r = radii[:, None]
    in_fwd = np.logical_and(2 * delta >= -r, 2 * delta < r).all(axis=1)
    in_bwd = np.logical_and(-2 * delta >= -r, -2 * delta < r).all(axis=1)
    return ~(in_fwd & in_bwd)


@dataclass
class SigmaBudget:
    sigma: tuple  # (S1, S2, S3, S4, S5)
    corrector: float
    per_step: np.ndarray = field(repr=False, default=None)
    holds: bool = True

    @property
    def total(self) -> float:
        s1, s2, s3, s4, s5 = self.sigma
        return s1 + s2 + s3 + 2 * s4 + s5


def sigma_budget(path, schedule: ScaleSchedule, table: GreenTable,
                 part: HatPartition | None = None) -> SigmaBudget:
    """The five budget terms and the exact corrector they dominate.

    S1, S5 are the full per-index Green sums over the first and leftover
    buckets; S3 collects the near cubes at each index's previous scale;
    S2 and S4 account for the far mass through index pairs with the
    symmetrized separation predicate.  The inequality
    corrector <= S1 + S2 + S3 + 2 S4 + S5 then holds pathwise.
    """
    if table.T != schedule.T:
        raise ContractError("table horizon differs from the schedule's T")
    pos = path.positions() if isinstance(path, WalkPath) else path
    n1, d = pos.shape
    if part is None:
        part = hat_partition(path, schedule)
    labels = part.labels
    T = schedule.T

    # ranks order the buckets: finite levels by index, leftover above all
    if schedule.terminal is not None:
        top = schedule.terminal
        ranks = np.where(labels == 0, top, labels).astype(np.int64)
    else:
        top = schedule.nlevels + 1
        ranks = np.where(labels == 0, top, labels).astype(np.int64)
    r_prev = np.zeros(n1, dtype=np.int64)
    split = ranks >= 2
    if schedule.terminal is not None:
        split &= ranks <= schedule.terminal
    else:
        split &= ranks <= schedule.nlevels
    prev_levels = np.maximum(ranks - 1, 1)
    r_table = np.array([0] + [lvl.r for lvl in schedule.levels],
                       dtype=np.int64)
    r_prev[split] = r_table[prev_levels[split]]

    from .green import corrector_per_step

    packer = make_packer(pos)
    keys = packer.pack(pos)
    fv = first_visit_mask(keys)
    sites = pos[fv]
    site_time = np.nonzero(fv)[0]

    per_k, _ = corrector_per_step(path, T, table, per_query=True)

    s1 = float(per_k[ranks == 1].sum())
    if schedule.terminal is None:
        s5 = float(per_k[labels == 0].sum())
    else:
        s5 = 0.0

    s3 = 0.0
    s2 = 0.0
    s4 = 0.0
    split_idx = np.nonzero(split)[0]
    if split_idx.size:
        # near part of the split indices (S3), over visited sites
        for qi, di in _iter_ball_pairs(pos[split_idx], sites, T):
            gq = split_idx[qi]
            keep = site_time[di] <= gq
            qi, di, gq = qi[keep], di[keep], gq[keep]
            if qi.size == 0:
                continue
            delta = sites[di] - pos[gq]
            nm = _near_mask(delta, r_prev[gq])
            if nm.any():
                s3 += float(table.value(delta[nm]).sum())
        # far parts (S2, S4), over index pairs
        for qi, di in _iter_ball_pairs(pos[split_idx], pos, T):
            gq = split_idx[qi]
            delta = pos[di] - pos[gq]
            far = _far_sym_mask(delta, r_prev[gq])
            if not far.any():
                continue
            gq, di, delta = gq[far], di[far], delta[far]
            g = table.value(delta)
            to_first = ranks[di] == 1
            s2 += float(g[to_first].sum())
            upward = ranks[di] >= ranks[gq]
            s4 += float(g[upward].sum())
    s2 /= T
    s3 /= T
    s4 /= T

    corrector = float(per_k.sum())
    budget = s1 + s2 + s3 + 2 * s4 + s5
    return SigmaBudget(sigma=(s1, s2, s3, s4, s5), corrector=corrector,
                       per_step=per_k / T,
                       holds=corrector <= budget * (1 + 1e-12) + 1e-9)


def folding_event_check(path, schedule: ScaleSchedule, A: float,
                        delta: float, I: int,
                        table: GreenTable | None = None,
                        part: HatPartition | None = None,
                        corrector_value: float | None = None) -> dict:
    """Evaluate the hat-size event E(A, delta, I) and audit the implication
    E => corrector <= zeta.

    d >= 5: levels i <= I must stay under delta L_i, later ones under
    A L_i.  d = 3 (the E(A, delta, J) variant): the J levels before the
    terminal one are held to delta L_i, earlier ones to A L_i, and the
    terminal bucket is unconstrained.
    """
    if part is None:
        part = hat_partition(path, schedule)
    rows = hat_sizes_with_L(schedule, part)
    holds = True
    table_rows = []
    if schedule.terminal is None:
        for row in rows:
            if row["level"] is None:
                continue
            bound = (delta if row["level"] <= I else A) * row["L"]
            ok = row["size"] <= bound
            holds &= ok
            table_rows.append({**row, "bound": bound, "ok": ok})
    else:
        term = schedule.terminal
        J = I
        if not 1 <= J <= term - 1:
            raise ContractError(f"J must lie in [1, {term - 1}]")
        for row in rows:
            lvl = row["level"]
            if lvl == term:
                table_rows.append({**row, "bound": math.inf, "ok": True})
                continue
            bound = (delta if term - J <= lvl <= term - 1 else A) * row["L"]
            ok = row["size"] <= bound
            holds &= ok
            table_rows.append({**row, "bound": bound, "ok": ok})
    corr = corrector_value
    if corr is None:
        if table is None:
            raise ContractError("need a green table or a corrector value")
        from .green import corrector as _corr
        corr = _corr(path, schedule.T, table)
    implied = corr <= schedule.zeta
    return {"event_holds": bool(holds), "corrector": float(corr),
            "zeta": schedule.zeta, "corrector_within_zeta": bool(implied),
            "counterexample": bool(holds and not implied),
            "levels": table_rows}


def folding_audit_batch(paths: list, schedule: ScaleSchedule,
                        table: GreenTable, A: float, delta: float,
                        I: int) -> list:
    """Run folding_event_check over many paths."""
    from .green import corrector_per_step

    out = []
    for path in paths:
        _, corr = corrector_per_step(path, schedule.T, table,
                                     per_query=False)
        part = hat_partition(path, schedule)
        out.append(folding_event_check(path, schedule, A, delta, I,
                                       part=part, corrector_value=corr))
    return out


def kn_nesting_check(path, schedule: ScaleSchedule, i: int,
                     occ_i: np.ndarray | None = None,
                     occ_I: np.ndarray | None = None) -> dict:
    """Exact inclusion across scales with integer-rounded thresholds.

    K_n(r_i, rho_i) is contained in K_n(r_I, rho_i r_i^d / r_I^d) exactly;
    the idealized threshold rho_I 2^(2(i-I)/(d-2)) rho-form differs by the
    rounding ratio, which is reported.
    """
    term = schedule.terminal if schedule.terminal is not None \
        else schedule.nlevels
    lvl_i = schedule.level(i)
    lvl_I = schedule.level(term)
    k_small = compute_Kn(path, lvl_i.r, lvl_i.rho, occupancy=occ_i)
    rho_exact = lvl_i.rho * float(lvl_i.r) ** schedule.d \
        / float(lvl_I.r) ** schedule.d
    k_big = compute_Kn(path, lvl_I.r, rho_exact, occupancy=occ_I)
    included = np.isin(k_small, k_big).all() if k_small.size else True
    rho_ideal = lvl_I.rho * 2.0 ** (2.0 * (i - term) / (schedule.d - 2))
    return {"included": bool(included), "rho_exact": rho_exact,
            "rho_idealized": rho_ideal,
            "rounding_ratio": rho_exact / rho_ideal if rho_ideal else None,
            "sizes": (int(k_small.size), int(k_big.size))}
