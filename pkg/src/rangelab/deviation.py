"""Downward-deviation experiments for the range volume.

Three kinds of estimator live here:

* direct Monte Carlo tails of |R_n| - E[|R_n|] with Wilson intervals,
* the confined lower-bound construction: force the first m steps into a
  small cube (rejection sampling when feasible, otherwise a fixed
  population kill-and-clone sampler with recorded weights) and continue
  with a free tail, certifying P(confinement) * P(deviation | confined)
  as a lower bound on the tail,
* the adapted-sum transfer inequalities with kappa* = e - 1 and
  c = 1 / (2 kappa*), checked against closed forms, an exact binomial
  oracle, and the sliding-window range-intersection process.

Centering means are always taken from a calibration sample whose stream
ids are disjoint from the experiment streams, so deviation indicators
never reuse the randomness they are tested on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom as binom_dist

from .errors import ContractError
from .green import GreenTable, corrector_per_step
from .lattice import (RngStream, WalkPath, batch_positions, make_packer,
                      simulate_steps_batch, step_deltas, steps_to_positions)
from .range_stats import path_keys, sample_walk_statistics
from .stats import log_mean_exp, weighted_linear_fit, wilson_ci

KAPPA_STAR = math.e - 1.0
TRANSFER_C = 1.0 / (2.0 * KAPPA_STAR)
CALIBRATION_STREAM_OFFSET = 1 << 32

GAMMA_DEFAULT = {3: 0.6595, 4: 0.80, 5: 0.8648, 6: 0.8952, 7: 0.9149}


def rate_coordinate(d: int, n: int, zeta: float) -> float:
    """The rate-function abscissa: zeta^(1-2/d), or (zeta^2/n)^(1/3) in d=3."""
    if d == 3:
        return (zeta ** 2 / n) ** (1.0 / 3.0)
    return zeta ** (1.0 - 2.0 / d)


@dataclass
class DeviationEstimate:
    estimator: str
    d: int
    n: int
    zeta: float
    hits: float
    samples: int
    p_hat: float
    ci_low: float
    ci_high: float
    rate_coord: float
    log_p: float
    se_log: float
    in_window: bool = True
    extras: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {
            "estimator": self.estimator, "d": self.d, "n": self.n,
            "zeta": self.zeta, "hits": self.hits, "samples": self.samples,
            "p_hat": self.p_hat, "ci_low": self.ci_low,
            "ci_high": self.ci_high, "rate_coord": self.rate_coord,
            "log_p": self.log_p, "se_log": self.se_log,
            "in_window": self.in_window,
        }


def deviation_window(d: int, n: int) -> tuple:
    chi = 5.0 / 7.0 if d == 3 else d / (d + 2.0)
    return (n ** chi * math.log(n), 0.2 * n)


def calibrate_range_mean(d: int, n: int, samples: int, seed: int) -> dict:
    """Mean and variance of |R_n| from the reserved calibration streams."""
    sizes = sample_walk_statistics(d, n, samples, seed,
                                   stream_start=CALIBRATION_STREAM_OFFSET)
    return {
        "mean": float(sizes.mean()),
        "var": float(sizes.var(ddof=1)),
        "sd": float(sizes.std(ddof=1)),
        "samples": samples,
        "sigma2_per_n": float(sizes.var(ddof=1) / n),
    }


def direct_tail(d: int, n: int, zetas, samples: int, seed: int,
                calibration: dict | None = None,
                cal_samples: int | None = None) -> list:
    """Empirical tails P(|R_n| - E[|R_n|] <= -zeta) on a zeta grid."""
    zetas = [float(z) for z in np.atleast_1d(zetas)]
    if calibration is None:
        calibration = calibrate_range_mean(d, n, cal_samples or samples, seed)
    sizes = sample_walk_statistics(d, n, samples, seed)
    centered = sizes - calibration["mean"]
    window = deviation_window(d, n)
    out = []
    for zeta in zetas:
        hits = int((centered <= -zeta).sum())
        lo, hi = wilson_ci(hits, samples)
        p = hits / samples
        log_p = math.log(p) if hits else math.log(hi)
        se_log = (1.0 / math.sqrt(hits)) if hits else 1.0
        out.append(DeviationEstimate(
            estimator="direct", d=d, n=n, zeta=zeta, hits=hits,
            samples=samples, p_hat=p, ci_low=lo, ci_high=hi,
            rate_coord=rate_coordinate(d, n, zeta), log_p=log_p,
            se_log=se_log, in_window=window[0] <= zeta <= window[1],
            extras={"one_sided": hits == 0,
                    "calibration_mean": calibration["mean"]}))
    return out


# ---------------------------------------------------------------------------
# confined sampling


@dataclass
class ConfinedSample:
    """Paths whose first m steps stay in Q(0, side), with the probability
    of that event and the sampling bookkeeping."""

    d: int
    m: int
    side: int
    mode: str
    log_p_event: float
    steps: np.ndarray          # (kept, m) uint8 prefixes
    log_weights: np.ndarray    # per kept path; equal in kill-and-clone mode
    acceptance: float | None = None
    survival: np.ndarray | None = None


def _inside_cube(pos: np.ndarray, side: int) -> np.ndarray:
    return np.logical_and(2 * pos >= -side, 2 * pos < side).all(axis=-1)


def rejection_confined(d: int, m: int, side: int, rng: RngStream,
                       want: int, max_batches: int = 400,
                       batch: int = 4096) -> ConfinedSample:
    """Plain rejection sampling of the confinement event."""
    gen = rng.generator()
    deltas = step_deltas(d)
    kept = []
    tried = 0
    accepted = 0
    for _ in range(max_batches):
        steps = gen.integers(0, 2 * d, size=(batch, m), dtype=np.uint8)
        pos = np.zeros((batch, d), dtype=np.int64)
        alive = np.ones(batch, dtype=bool)
        for t in range(m):
            pos[alive] += deltas[steps[alive, t]]
            alive[alive] = _inside_cube(pos[alive], side)
            if not alive.any():
                break
        tried += batch
        rows = np.nonzero(alive)[0]
        accepted += int(rows.size)
        for row in rows:
            kept.append(steps[row])
        if accepted >= want:
            break
    if not kept:
        raise ContractError(
            f"rejection budget exhausted: 0 acceptances in {tried} trials "
            f"(d={d}, m={m}, side={side})")
    acc = accepted / tried
    steps = np.stack(kept[:want], axis=0)
    return ConfinedSample(d=d, m=m, side=side, mode="rejection",
                          log_p_event=math.log(acc),
                          steps=steps,
                          log_weights=np.zeros(steps.shape[0]),
                          acceptance=acc)


def smc_confined(d: int, m: int, side: int, rng: RngStream,
                 population: int = 1024) -> ConfinedSample:
    """Fixed-population kill-and-clone sampler for the confinement event.

    Each step proposes moves for the whole population; walkers stepping
    outside the cube die and their slots are refilled with copies of
    uniformly chosen survivors.  The product of per-step survival
    fractions estimates P(confined) and the genealogy reconstructs the
    surviving prefixes exactly.
    """
    if population < 2:
        raise ContractError("population must be at least 2")
    gen = rng.generator()
    deltas = step_deltas(d)
    pos = np.zeros((population, d), dtype=np.int64)
    steps = np.empty((population, m), dtype=np.uint8)
    ancestry = np.empty((population, m), dtype=np.int32)
    survival = np.empty(m)
    log_p = 0.0
    idx = np.arange(population, dtype=np.int32)
    for t in range(m):
        codes = gen.integers(0, 2 * d, size=population, dtype=np.uint8)
        nxt = pos + deltas[codes]
        ok = _inside_cube(nxt, side)
        f = float(ok.mean())
        survival[t] = f
        if f == 0.0:
            raise ContractError(
                f"population died out at step {t} (side={side}); "
                "increase the population")
        log_p += math.log(f)
        survivors = idx[ok]
        parents = idx.copy()
        dead = idx[~ok]
        if dead.size:
            parents[dead] = survivors[gen.integers(0, survivors.size,
                                                   size=dead.size)]
            # cloned slots restart from the parent's position and resample
            # their move inside the cube
            repl_codes = gen.integers(0, 2 * d, size=dead.size,
                                      dtype=np.uint8)
            nxt[dead] = pos[parents[dead]] + deltas[repl_codes]
            redo = ~_inside_cube(nxt[dead], side)
            while redo.any():
                fresh = gen.integers(0, 2 * d, size=int(redo.sum()),
                                     dtype=np.uint8)
                repl_codes[redo] = fresh
                nxt[dead] = pos[parents[dead]] + deltas[repl_codes]
                redo = ~_inside_cube(nxt[dead], side)
            codes = codes.copy()
            codes[dead] = repl_codes
        steps[:, t] = codes
        ancestry[:, t] = parents
        pos = nxt
    # genealogy backward pass: a slot's step at time t is its own code,
    # while its prefix up to t-1 is the parent's lineage
    out = np.empty_like(steps)
    cur = idx.copy()
    for t in range(m - 1, -1, -1):
        out[:, t] = steps[cur, t]
        cur = ancestry[cur, t]
    return ConfinedSample(d=d, m=m, side=side, mode="kill-clone",
                          log_p_event=log_p, steps=out,
                          log_weights=np.full(population, log_p),
                          survival=survival)


def confined_sampler(d: int, m: int, side: int, rng: RngStream,
                     population: int = 1024,
                     min_acceptance: float = 1e-4,
                     step_budget: float = 5e7) -> ConfinedSample:
    """Rejection when the predicted acceptance allows it, else kill-clone.

    The acceptance is predicted with a small pilot population.  Rejection
    requires both a predicted acceptance of at least ``min_acceptance``
    and an expected simulation effort (population * m / acceptance) within
    the step budget; otherwise long prefixes at moderate acceptance would
    dominate the run time for no statistical gain.
    """
    if side < 3:
        raise ContractError("side must be >= 3")
    if side >= 2 * m + 1:
        return rejection_confined(d, m, side, rng, want=population)
    pilot = smc_confined(d, m, side, rng.shifted(1 << 20), population=256)
    expected_steps = population * m / max(math.exp(pilot.log_p_event), 1e-300)
    if pilot.log_p_event >= math.log(min_acceptance) \
            and expected_steps <= step_budget:
        try:
            return rejection_confined(d, m, side, rng, want=population)
        except ContractError:
            pass
    return smc_confined(d, m, side, rng, population=population)


def _range_sizes_with_tails(d: int, n: int, sample: ConfinedSample,
                            rng: RngStream, chunk: int = 128) -> np.ndarray:
    """|R_n| for each confined prefix continued by a free tail."""
    pop, m = sample.steps.shape
    tail_len = n - m
    gen = rng.generator()
    sizes = np.empty(pop, dtype=np.int64)
    for lo in range(0, pop, chunk):
        hi = min(lo + chunk, pop)
        cnt = hi - lo
        pos_pre = batch_positions(d, sample.steps[lo:hi], dtype=np.int32)
        if tail_len > 0:
            tail = gen.integers(0, 2 * d, size=(cnt, tail_len),
                                dtype=np.uint8)
            pos_tail = batch_positions(d, tail, dtype=np.int32)
            pos_tail = pos_tail[:, 1:, :] + pos_pre[:, -1:, :]
            pos = np.concatenate([pos_pre, pos_tail], axis=1)
        else:
            pos = pos_pre
        lo_c = pos.min(axis=1)
        spans = pos.max(axis=1) - lo_c + 1
        bits = np.ceil(np.log2(spans + 1)).astype(np.int64)
        if bits.sum(axis=1).max() > 62:
            raise ContractError("span too large to pack")
        keys = np.zeros((cnt, n + 1), dtype=np.int64)
        shift = np.zeros(cnt, dtype=np.int64)
        for j in range(d):
            keys |= (pos[:, :, j].astype(np.int64)
                     - lo_c[:, j, None]) << shift[:, None]
            shift += bits[:, j]
        keys.sort(axis=1)
        new = np.ones((cnt, n + 1), dtype=bool)
        np.not_equal(keys[:, 1:], keys[:, :-1], out=new[:, 1:])
        sizes[lo:hi] = new.sum(axis=1)
    return sizes


def lower_bound_experiment(d: int, n: int, zeta: float, seed: int,
                           population: int = 1024, replicates: int = 4,
                           calibration: dict | None = None,
                           cal_samples: int = 2000,
                           gamma: float | None = None) -> DeviationEstimate:
    """The confinement lower bound on the downward tail.

    d >= 5: the first m = floor(3 zeta / gamma_d) steps are confined to
    Q(0, ~zeta^(1/d)).  d = 3: the first half of the walk is confined to
    Q(0, ~(n^2/zeta)^(1/3)).  The estimate is
    P(confined) * P(|R_n| - E[|R_n|] <= -zeta | confined), a certified
    lower bound for the unconditioned tail probability.
    """
    if d == 4:
        raise ContractError("lower-bound constructions cover d=3 and d>=5")
    gamma = gamma if gamma is not None else GAMMA_DEFAULT[d]
    if d >= 5:
        m = min(int(3 * zeta / gamma), int(0.9 * n))
        side = max(3, int(round(zeta ** (1.0 / d))))
    else:
        m = n // 2
        side = max(3, int(round((n * n / zeta) ** (1.0 / 3.0))))
    if calibration is None:
        calibration = calibrate_range_mean(d, n, cal_samples, seed)
    window = deviation_window(d, n)

    rep_logp = []
    rep_logs = []
    per_rep = max(population // replicates, 64)
    for rep in range(replicates):
        rng = RngStream(seed, 2 * rep)
        sample = confined_sampler(d, m, side, rng, population=per_rep)
        sizes = _range_sizes_with_tails(d, n, sample,
                                        RngStream(seed, 2 * rep + 1))
        achieved = (sizes - calibration["mean"]) <= -zeta
        frac = float(achieved.mean())
        rep_logp.append(sample.log_p_event + math.log(frac)
                        if frac > 0 else -math.inf)
        rep_logs.append({"log_p_event": sample.log_p_event,
                         "frac_achieved": frac, "mode": sample.mode})
    rep_logp = np.array(rep_logp)
    finite = rep_logp[np.isfinite(rep_logp)]
    if finite.size:
        # log of the replicate-mean probability, computed in log space
        log_p = log_mean_exp(finite) + math.log(finite.size / replicates)
        se_log = float(finite.std(ddof=1) / math.sqrt(finite.size)) \
            if finite.size > 1 else math.inf
    else:
        log_p = -math.inf
        se_log = math.inf
    p_hat = math.exp(log_p) if log_p > -700 else 0.0
    return DeviationEstimate(
        estimator="confined-lower-bound", d=d, n=n, zeta=zeta,
        hits=float(finite.size), samples=replicates * per_rep,
        p_hat=p_hat,
        ci_low=math.exp(log_p - 2 * se_log) if finite.size else 0.0,
        ci_high=math.exp(min(log_p + 2 * se_log, 0.0)) if finite.size else 1.0,
        rate_coord=rate_coordinate(d, n, zeta), log_p=log_p, se_log=se_log,
        in_window=window[0] <= zeta <= window[1],
        extras={"m": m, "side": side, "replicates": rep_logs,
                "gamma": gamma, "positive_reps": int(finite.size),
                "calibration_mean": calibration["mean"]})


def rate_fit(estimates: list) -> dict:
    """Weighted least squares of log p against the rate coordinate."""
    pts = [e for e in estimates if math.isfinite(e.log_p)]
    if len(pts) < 4:
        raise ContractError("need at least 4 finite estimates to fit a rate")
    x = np.array([e.rate_coord for e in pts])
    y = np.array([e.log_p for e in pts])
    w = np.array([1.0 / max(e.se_log, 1e-3) ** 2 for e in pts])
    fit = weighted_linear_fit(x, y, w)
    fit["kappa_hat"] = -fit["slope"]
    return fit


# ---------------------------------------------------------------------------
# adapted-sum transfer inequalities


def _kernel_generators(gen: np.random.Generator, trials: int) -> list:
    """Battery of [0,1]-valued variables with known conditional means."""
    rows = []
    ones = np.ones(trials)
    rows.append(("const_one", ones, ones, math.exp(1 - KAPPA_STAR)))
    rows.append(("const_zero", np.zeros(trials), np.zeros(trials), 1.0))
    for p in (0.05, 0.2, 0.5, 0.8, 0.95):
        z = (gen.random(trials) < p).astype(np.float64)
        closed = p * math.exp(1 - KAPPA_STAR * p) \
            + (1 - p) * math.exp(-KAPPA_STAR * p)
        rows.append((f"bernoulli_{p}", z, np.full(trials, p), closed))
    u = gen.random(trials)
    rows.append(("uniform", u, np.full(trials, 0.5), None))
    b = gen.beta(0.5, 0.5, size=trials)
    rows.append(("beta_half", b, np.full(trials, 0.5), None))
    lo, hi = 0.05, 0.95
    z = np.where(gen.random(trials) < 0.5, lo, hi)
    rows.append(("two_point", z, np.full(trials, (lo + hi) / 2), None))
    return rows


def transfer_kernel_checks(trials: int, seed: int,
                           sequence_length: int = 64) -> dict:
    """Verify E[exp(Z - kappa* E[Z|G])] <= 1 on the generator battery.

    Includes the closed-form Bernoulli oracle comparison and the adapted
    sequence version exp(sum Z_i - kappa* sum E[Z_i | F_{i-1}]) <= 1 for
    a history-dependent chain.
    """
    gen = RngStream(seed, 0).generator()
    rows = []
    max_mean = -math.inf
    for name, z, cond, closed in _kernel_generators(gen, trials):
        if np.any((z < 0) | (z > 1)):
            raise ContractError(f"generator {name} left [0, 1]")
        vals = np.exp(z - KAPPA_STAR * cond)
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(trials))
        ok = mean <= 1.0 + 3.0 * se
        row = {"name": name, "mean": mean, "se": se, "ok": ok,
               "closed_form": closed,
               "closed_within_4se": (abs(mean - closed) <= 4 * se)
               if closed is not None else None}
        rows.append(row)
        max_mean = max(max_mean, mean - 0.0)
    # history-dependent adapted chain: q_i depends on the previous draw
    reps = max(trials // sequence_length, 256)
    z = np.zeros((reps, sequence_length))
    cond = np.zeros((reps, sequence_length))
    prev = np.full(reps, 0.5)
    for i in range(sequence_length):
        q = 0.1 + 0.8 * prev
        draw = (gen.random(reps) < q).astype(np.float64)
        z[:, i] = draw
        cond[:, i] = q
        prev = draw
    seq_vals = np.exp(z.sum(axis=1) - KAPPA_STAR * cond.sum(axis=1))
    seq_mean = float(seq_vals.mean())
    seq_se = float(seq_vals.std(ddof=1) / math.sqrt(reps))
    rows.append({"name": "adapted_chain", "mean": seq_mean, "se": seq_se,
                 "ok": seq_mean <= 1.0 + 3.0 * seq_se, "closed_form": None,
                 "closed_within_4se": None})
    counterexamples = [r["name"] for r in rows if not r["ok"]]
    return {"kappa_star": KAPPA_STAR, "trials": trials, "rows": rows,
            "max_mean": max(r["mean"] for r in rows),
            "counterexamples": counterexamples,
            "ok": not counterexamples}


def transfer_iid_oracle(n: int, T: int, q: float, zeta: float) -> dict:
    """Exact both sides of the adapted-sum transfer bound for iid
    Bernoulli(q): the left side is a binomial tail, the right side is an
    indicator plus exp(-c zeta)."""
    count = n - T + 1
    if count <= 0:
        raise ContractError("need n >= T")
    lhs = float(binom_dist.sf(math.floor(T * zeta), count, q))
    rhs = float((q * count / T > TRANSFER_C * zeta)
                + math.exp(-TRANSFER_C * zeta))
    return {"lhs": lhs, "rhs": min(rhs, 1.0 + math.exp(-TRANSFER_C * zeta)),
            "holds": lhs <= rhs + 1e-12, "q": q, "zeta": zeta, "T": T,
            "n": n}


def window_intersection_series(path: WalkPath, T: int) -> np.ndarray:
    """X_i = |R[i-T+1, i] cap R_{i-T}| / T for i = T..n, exactly.

    Site-by-site: x is counted at i when some visit of x falls in the
    window (i-T, i] and x was first visited by time i-T.  Each site
    contributes a union of visit intervals, accumulated in a difference
    array; merged intervals keep the count an indicator.
    """
    pos = path.positions()
    n = pos.shape[0] - 1
    if not 1 <= T <= n:
        raise ContractError("need 1 <= T <= n")
    keys = path_keys(pos)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    times = order.astype(np.int64)
    group_start = np.empty(n + 1, dtype=bool)
    group_start[:1] = True
    np.not_equal(sk[1:], sk[:-1], out=group_start[1:])
    # visits within a site group are in increasing time order after a
    # stable sort by key
    first_time = times[np.nonzero(group_start)[0]]
    gid = np.cumsum(group_start) - 1
    tfirst = first_time[gid]
    gap_new = np.empty(n + 1, dtype=bool)
    gap_new[:1] = True
    gap_new[1:] = group_start[1:] | (times[1:] - times[:-1] > T)
    # merged interval per run: [t_start, t_end + T - 1], clipped to start
    # no earlier than first visit + T
    first_of_run = np.nonzero(gap_new)[0]
    last_of_run = np.append(first_of_run[1:], n + 1) - 1
    run_start = times[first_of_run]
    run_end = times[last_of_run]
    run_tfirst = tfirst[first_of_run]
    a = np.maximum(run_start, run_tfirst + T)
    b = np.minimum(run_end + T - 1, n)
    valid = a <= b
    diff = np.zeros(n + 2, dtype=np.int64)
    np.add.at(diff, a[valid], 1)
    np.add.at(diff, b[valid] + 1, -1)
    counts = np.cumsum(diff[:n + 1])
    return counts[T:] / T


def transfer_range_process_audit(d: int, n: int, T: int, paths: int,
                                 seed: int, table: GreenTable,
                                 zetas=None) -> dict:
    """Audit the transfer bound on the sliding-window range process.

    LHS: P((1/T) sum X_i > zeta) for the window intersection process.
    RHS: P((1/T) sum Y_i > c zeta) + exp(-c zeta) with the conditional
    mean bounded by the per-step corrector terms
    Y_i = sum_{x in R_{i-T}} G_T(x - S_{i-T}) / T.
    """
    if table.T != T or table.d != d:
        raise ContractError("table horizon must equal T")
    sums_x = np.empty(paths)
    sums_y = np.empty(paths)
    for i in range(paths):
        path = WalkPath(d=d, steps=RngStream(seed, i).generator()
                        .integers(0, 2 * d, size=n, dtype=np.uint8),
                        seed=seed, stream_id=i)
        x = window_intersection_series(path, T)
        per_k, _ = corrector_per_step(path, T, table)
        y = per_k[: n - T + 1]
        sums_x[i] = x.sum() / T
        sums_y[i] = y.sum() / T
    if zetas is None:
        qs = [0.5, 0.75, 0.9]
        zetas = sorted(set(float(np.quantile(sums_x, q)) for q in qs))
    rows = []
    for zeta in zetas:
        lhs_hits = int((sums_x > zeta).sum())
        rhs_hits = int((sums_y > TRANSFER_C * zeta).sum())
        lhs = lhs_hits / paths
        rhs = rhs_hits / paths + math.exp(-TRANSFER_C * zeta)
        se = math.sqrt(lhs * (1 - lhs) / paths
                       + (rhs_hits / paths) * (1 - rhs_hits / paths) / paths)
        rows.append({"zeta": zeta, "lhs": lhs, "rhs": rhs,
                     "holds_3se": lhs <= rhs + 3 * se + 1e-12,
                     "joint_se": se})
    return {"rows": rows, "paths": paths, "T": T, "n": n, "d": d,
            "c": TRANSFER_C,
            "ok": all(r["holds_3se"] for r in rows)}


def corollary_decomposition_check(path: WalkPath, T: int) -> dict:
    """Exact block decomposition of the range for every offset.

    The path is truncated to n* with n* + 1 a multiple of T (the block
    convention that makes the error term provably at most T).  For each
    offset j: |R_{n*}| = U_j - cross_j + eps_j with |eps_j| <= T, where
    U_j sums the T-step block ranges and cross_j the backward block
    intersections.
    """
    n = path.n
    if not 1 <= T <= n:
        raise ContractError("need 1 <= T <= n")
    blocks_total = (n + 1) // T
    n_star = blocks_total * T - 1
    pos = path.positions()[: n_star + 1]
    keys = path_keys(pos)
    lhs = int(np.unique(keys).size)
    eps = []
    for j in range(T):
        anchors = list(range(j, n_star + 1, T))
        m = len(anchors) - 1
        u = 0
        cross = 0
        prior = np.unique(keys[j:j + 1])
        for i in range(1, m + 1):
            a, b = anchors[i - 1] + 1, anchors[i]
            blk = np.unique(keys[a:b + 1])
            u += blk.size
            if i >= 2:
                cross += int(np.intersect1d(blk, prior,
                                            assume_unique=True).size)
            prior = np.union1d(prior, blk)
        eps.append(lhs - u + cross)
    eps = np.array(eps)
    return {"n_star": n_star, "T": T, "lhs": lhs,
            "eps": eps, "max_abs_eps": int(np.abs(eps).max()),
            "holds": bool(np.abs(eps).max() <= T)}


# ---------------------------------------------------------------------------
# intersection of two independent ranges


def intersection_samples(d: int, horizon: int, pairs: int, seed: int,
                         table_bits: int = 22,
                         coord_bits: int = 12) -> np.ndarray:
    """|R cap R'| for independent walk pairs, via a versioned hash join.

    Positions are packed to d*coord_bits-bit keys.  The key is linear in
    the coordinates, so the whole key stream is one cumsum of per-step
    increments; hash slots derive from the keys by a multiply-shift mix.
    Each pair scatters one walk's slots into a shared versioned table and
    probes with the other walk (both directions).  Candidate keys are
    verified by intersecting the two small exact-key lists, which leaves
    no phantom matches: a wrong candidate of one side can never appear on
    the other side.

    The coordinate envelope |c| < 2^(coord_bits-1) is checked on the
    leading field; with the default 12 bits a horizon of 2e5 sits more
    than ten standard deviations inside the box, so the per-axis
    excursion bound is a formality at supported scales.
    """
    if d * coord_bits > 62:
        raise ContractError("coordinate packing too wide")
    limit = 1 << (coord_bits - 1)
    size = 1 << table_bits
    table = np.zeros(size, dtype=np.int8)
    out = np.empty(pairs, dtype=np.int64)
    # the packed key sum_j (c_j + limit) << (j b) is linear in the
    # coordinates, so the key stream is a cumsum of per-step increments;
    # hash slots are derived from the keys by a multiply-shift mix
    key_origin = np.int64(sum(limit << (j * coord_bits) for j in range(d)))
    incr = np.zeros(2 * d, dtype=np.int64)
    for axis in range(d):
        incr[2 * axis] = 1 << (axis * coord_bits)
        incr[2 * axis + 1] = -(1 << (axis * coord_bits))
    mult = np.array([0x9E3779B97F4A7C15], dtype=np.uint64).view(np.int64)[0]
    span_guard = np.int64((limit - 1))
    chunk = max(1, 2 ** 23 // max(horizon, 1))
    done = 0
    version = 0
    while done < pairs:
        cnt = min(chunk, pairs - done)
        steps = simulate_steps_batch(d, horizon, seed, 2 * done, 2 * cnt)
        keys = np.empty((2 * cnt, horizon + 1), dtype=np.int64)
        keys[:, 0] = key_origin
        np.cumsum(incr[steps], axis=1, out=keys[:, 1:])
        keys[:, 1:] += key_origin
        hi = incr[2 * (d - 1)]
        top = keys // hi  # leading coordinate field, cheap span check
        if top.min() < 1 or top.max() > 2 * span_guard:
            raise ContractError("walk left the packable box; "
                                "increase coord_bits")
        slots = ((keys * mult) >> np.int64(40)) & (size - 1)
        for r in range(cnt):
            if version >= 124:
                table[:] = 0
                version = 0
            va, vb = version + 1, version + 2
            version += 2
            ka, kb = keys[2 * r], keys[2 * r + 1]
            sa, sb = slots[2 * r], slots[2 * r + 1]
            table[sb] = vb
            idx_a = np.nonzero(table[sa] == vb)[0]
            table[sa] = va
            idx_b = np.nonzero(table[sb] == va)[0]
            if idx_a.size and idx_b.size:
                cand_a = np.unique(ka[idx_a])
                cand_b = np.unique(kb[idx_b])
                out[done + r] = np.intersect1d(cand_a, cand_b,
                                               assume_unique=True).size
            else:
                out[done + r] = 0
        done += cnt
    return out


def intersection_tail(d: int, horizon: int, pairs: int, seed: int,
                      min_tail_hits: int = 10) -> dict:
    """Tail table of |R cap R'| and its stretched-exponential fit."""
    if d < 5:
        raise ContractError("the infinite-range proxy needs d >= 5")
    values = intersection_samples(d, horizon, pairs, seed)
    alpha = 1.0 - 2.0 / d
    tmax = int(values.max())
    ts, tails, ses = [], [], []
    for t in range(0, tmax + 1):
        hits = int((values > t).sum())
        if hits < min_tail_hits:
            break
        p = hits / pairs
        ts.append(t)
        tails.append(p)
        ses.append(1.0 / math.sqrt(hits))
    fit = None
    if len(ts) >= 4:
        x = np.array(ts, dtype=np.float64) ** alpha
        y = np.log(tails)
        fit = weighted_linear_fit(x, y, 1.0 / np.array(ses) ** 2)
    return {"d": d, "horizon": horizon, "pairs": pairs,
            "mean": float(values.mean()), "max": tmax,
            "t": ts, "tail": tails, "se_log": ses, "alpha": alpha,
            "fit": fit, "values": values}


# ---------------------------------------------------------------------------
# Gaussian regime


def gaussian_mgf_check(d: int, n: int, zeta: float, thetas, samples: int,
                       seed: int, calibration: dict | None = None,
                       min_ess: float = 25.0) -> dict:
    """Scaled log-MGF of the centered range against its Gaussian target.

    Computes (n/zeta^2) log E[exp(theta (zeta/n)(|R_n| - E|R_n|))] on the
    theta grid and compares with (sigma^2/2) theta^2, sigma^2 estimated
    from the calibration sample.  Grid points whose importance weights
    have an effective sample size below ``min_ess`` are dropped with a
    warning flag.
    """
    if d < 5:
        raise ContractError("the Gaussian-regime check assumes d >= 5")
    if calibration is None:
        calibration = calibrate_range_mean(d, n, samples, seed)
    sizes = sample_walk_statistics(d, n, samples, seed)
    x = (sizes - calibration["mean"]) * (zeta / n)
    sigma2 = calibration["var"] / n
    rows = []
    truncated = []
    for theta in thetas:
        expo = theta * x
        ess = float(np.exp(2 * log_mean_exp(expo)
                           - log_mean_exp(2 * expo)) * samples)
        scaled = (n / zeta ** 2) * log_mean_exp(expo)
        ref = 0.5 * sigma2 * theta ** 2
        row = {"theta": float(theta), "scaled_log_mgf": float(scaled),
               "gaussian_ref": float(ref), "ess": ess,
               "rel_gap": abs(scaled - ref) / ref if ref > 0 else 0.0}
        if ess < min_ess and theta != 0:
            truncated.append(float(theta))
        else:
            rows.append(row)
    kept = [r for r in rows if r["theta"] != 0]
    return {"d": d, "n": n, "zeta": zeta, "sigma2": sigma2,
            "samples": samples, "rows": rows,
            "truncated_thetas": truncated,
            "max_rel_gap": max((r["rel_gap"] for r in kept), default=0.0)}


def gaussian_tail_check(d: int, n: int, samples: int, seed: int,
                        ks=(1.0, 2.0, 3.0),
                        calibration: dict | None = None) -> dict:
    """direct_tail at zeta = k sigma sqrt(n) against the normal tail."""
    if calibration is None:
        calibration = calibrate_range_mean(d, n, samples, seed)
    sd = math.sqrt(calibration["var"])
    zetas = [k * sd for k in ks]
    ests = direct_tail(d, n, zetas, samples, seed, calibration=calibration)
    from scipy.stats import norm
    rows = []
    for k, est in zip(ks, ests):
        ref = float(norm.sf(k))
        log_ref = math.log(ref)
        rows.append({"k": k, "p_hat": est.p_hat, "normal_tail": ref,
                     "log_p": est.log_p, "log_ref": log_ref,
                     "rel_gap_log": abs(est.log_p - log_ref)
                     / abs(log_ref)})
    return {"rows": rows, "sd": sd, "samples": samples}


# ---------------------------------------------------------------------------
# the folding picture under confinement


def folding_picture_experiment(d: int, n: int, zeta: float, seed: int,
                               beta: float = 0.125,
                               population: int = 256,
                               cap_subsample: int = 24,
                               oracle=None,
                               gamma: float | None = None) -> dict:
    """Measure the dense-region picture on walks conditioned to fold.

    Confined samples approximate the conditioned law; for each we build
    V_n(r_n, beta rho_typ) and report the occupation fraction
    ell_n(V_n)/zeta (the alpha estimate at this beta) plus the capacity
    shape ratio cap(V_n)/|V_n|^(1-2/d) on a subsample.
    """
    from .capacity import capacity_exact
    from .folding import compute_Cn_Vn, typical_params, vn_sites
    from .range_stats import occupancy_field

    gamma = gamma if gamma is not None else GAMMA_DEFAULT[d]
    tp = typical_params(d, n, zeta)
    r_n = tp["r_n"]
    rho = beta * tp["rho_typ"]
    if d >= 5:
        m = min(int(3 * zeta / gamma), int(0.9 * n))
        side = max(3, int(round(zeta ** (1.0 / d))))
    else:
        m = n // 2
        side = max(3, int(round((n * n / zeta) ** (1.0 / 3.0))))
    sample = confined_sampler(d, m, side, RngStream(seed, 0),
                              population=population)
    gen_tail = RngStream(seed, 1).generator()
    alphas = []
    cap_ratios = []
    vol_ratio = []
    for w in range(sample.steps.shape[0]):
        steps = sample.steps[w]
        if n > m:
            tail = gen_tail.integers(0, 2 * d, size=n - m, dtype=np.uint8)
            steps = np.concatenate([steps, tail])
        path = WalkPath(d=d, steps=steps)
        cn = compute_Cn_Vn(path, r_n, rho)
        if cn["num_cubes"] == 0:
            alphas.append(0.0)
            continue
        alphas.append(cn["local_time"] / zeta)
        vol_ratio.append(cn["volume"] / zeta)
        if oracle is not None and len(cap_ratios) < cap_subsample:
            sites = vn_sites(cn)
            if sites.shape[0] <= 4000:
                cap = capacity_exact(sites, oracle).cap
                cap_ratios.append(
                    cap / sites.shape[0] ** (1.0 - 2.0 / d))
    return {"d": d, "n": n, "zeta": zeta, "r_n": r_n, "beta": beta,
            "rho": rho, "m": m, "side": side,
            "alpha_measured": float(np.median(alphas)),
            "alpha_q10": float(np.quantile(alphas, 0.1)),
            "alpha_values": alphas,
            "cap_ratio_median": float(np.median(cap_ratios))
            if cap_ratios else None,
            "cap_ratio_max": float(np.max(cap_ratios))
            if cap_ratios else None,
            "cap_ratios": cap_ratios,
            "volume_over_zeta_median": float(np.median(vol_ratio))
            if vol_ratio else None,
            "log_p_event": sample.log_p_event}
