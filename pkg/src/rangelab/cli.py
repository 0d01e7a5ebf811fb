"""Experiment orchestration: subcommands, manifests, machine-readable CSV.

Every run writes its outputs plus a JSON manifest recording the tool
version, the full argument set, the master seed and stream ranges, the
derived constants, wall time and the sha256 of each output file.
Re-running the argv recorded in a manifest byte-reproduces the outputs.

Exit codes: 0 success, 2 contract violation, 3 resource budget exceeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractError, ResourceError


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        return out.stdout.strip() or None
    except Exception:
        return None


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path, header, rows) -> None:
    """RFC-4180 CSV, UTF-8, '.' decimal, shortest-roundtrip floats."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


class ManifestWriter:
    def __init__(self, args: argparse.Namespace, subcommand: str):
        self.t0 = time.time()
        self.subcommand = subcommand
        self.args = {k: v for k, v in vars(args).items() if k != "func"}
        self.outputs: dict = {}
        self.constants: dict = {}
        self.streams: dict = {}

    def add_output(self, path) -> None:
        path = Path(path)
        self.outputs[path.name] = _sha256(path)

    def write(self, path) -> None:
        doc = {
            "tool": "rangelab",
            "tool_version": __version__,
            "git_describe": _git_describe(),
            "subcommand": self.subcommand,
            "args": self.args,
            "constants": self.constants,
            "stream_ranges": self.streams,
            "wall_time_s": round(time.time() - self.t0, 3),
            "outputs": self.outputs,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def green_cache_dir() -> Path | None:
    env = os.environ.get("RANGELAB_CACHE_DIR")
    return Path(env) if env else None


def get_green_table(d: int, T: int, method: str = "auto"):
    """Build or load-from-cache a truncated Green table."""
    from .green import build_green_table, load_table, save_table

    cache = green_cache_dir()
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        fname = cache / f"green_d{d}_T{T}.bin"
        if fname.exists():
            table = load_table(fname)
            if table.d == d and table.T == T:
                return table
    table = build_green_table(d, T, method=method)
    if cache is not None:
        save_table(table, cache / f"green_d{d}_T{T}.bin")
    return table


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    from .lattice import RngStream, dump_path_ndjson, simulate_walk, write_path

    out = _out_dir(args)
    manifest = ManifestWriter(args, "simulate")
    rows = []
    for rep in range(args.samples):
        path = simulate_walk(args.d, args.n, RngStream(args.seed, rep))
        fname = out / f"path_{rep:04d}.bin"
        write_path(path, fname)
        manifest.add_output(fname)
        if args.ndjson:
            jname = out / f"path_{rep:04d}.ndjson"
            dump_path_ndjson(path, jname)
            manifest.add_output(jname)
        end = path.positions()[-1]
        rows.append([rep, args.d, args.n,
                     int(np.abs(end).sum()), " ".join(map(str, end))])
    summary = out / "paths.csv"
    write_csv(summary, ["stream_id", "d", "n", "end_l1", "end_point"], rows)
    manifest.add_output(summary)
    manifest.streams = {"paths": [0, args.samples]}
    manifest.write(out / "manifest.json")
    return 0


def cmd_green(args) -> int:
    table = get_green_table(args.d, args.T, method=args.method)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = ManifestWriter(args, "green")
    profile = table.axis_profile()
    rows = [["axis", k, v] for k, v in enumerate(profile)]
    mass = table.mass()
    rows.append(["mass_total", "", mass])
    rows.append(["mass_expected", "", float(args.T + 1)])
    rows.append(["mass_abs_error", "", abs(mass - (args.T + 1))])
    write_csv(out_path, ["quantity", "k", "value"], rows)
    manifest.add_output(out_path)
    manifest.constants = {"d": args.d, "T": args.T, "method": table.method}
    manifest.write(out_path.with_suffix(".manifest.json"))
    return 0


def cmd_capacity(args) -> int:
    from .capacity import (capacity_exact, capacity_mc, random_site_set)
    from .green import GreenOracle
    from .lattice import RngStream, cube_sites

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = ManifestWriter(args, "capacity")
    table = get_green_table(args.d, args.green_T)
    oracle = GreenOracle(table)
    rows = []
    sets = []
    if args.set == "cube":
        sets = [(f"cube_r{args.r}", cube_sites([0] * args.d, args.r, args.d))]
    else:
        for i in range(args.count):
            sites = random_site_set(args.d, args.size, args.spread,
                                    RngStream(args.seed, 1000 + i))
            sets.append((f"random_{i}", sites))
    ndjson = out_path.with_suffix(".sets.ndjson")
    with open(ndjson, "w", encoding="ascii") as fh:
        for set_id, sites in sets:
            fh.write(json.dumps({"set_id": set_id,
                                 "sites": sites.tolist()}))
            fh.write("\n")
    for i, (set_id, sites) in enumerate(sets):
        ex = capacity_exact(sites, oracle)
        mc = capacity_mc(sites, trials=args.trials, oracle=oracle,
                         rng=RngStream(args.seed, 2000 + i))
        d = args.d
        ratio = ex.cap / sites.shape[0] ** (1 - 2 / d)
        rows.append([set_id, sites.shape[0], ex.cap, mc.cap, mc.error,
                     ratio, ex.residual, mc.bias_bound])
    write_csv(out_path, ["set_id", "size", "cap_exact", "cap_mc", "se_mc",
                         "ratio_to_volume_power", "residual", "bias_bound"],
              rows)
    manifest.add_output(out_path)
    manifest.add_output(ndjson)
    manifest.constants = {"green_T": args.green_T, "g0": oracle.g0,
                          "a_d": oracle.asymptote.a_d}
    manifest.write(out_path.with_suffix(".manifest.json"))
    return 0


def cmd_folding(args) -> int:
    from .folding import (folding_event_check, hat_partition, hat_sizes_with_L,
                          scale_schedule, sigma_budget)
    from .lattice import RngStream, simulate_walk

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = ManifestWriter(args, "folding")
    schedule = scale_schedule(args.d, args.n, args.zeta, C0=args.c0,
                              c0=args.c0_small)
    table = get_green_table(args.d, schedule.T)
    if schedule.terminal is not None:
        I = args.event_I if args.event_I is not None else schedule.terminal - 1
    else:
        I = args.event_I if args.event_I is not None else 1
    rows = []
    reports = out_path.with_suffix(".reports.ndjson")
    vn_rows = []
    with open(reports, "w", encoding="ascii") as fh:
        for rep in range(args.samples):
            path = simulate_walk(args.d, args.n, RngStream(args.seed, rep))
            if args.vn_out and rep == 0:
                from .folding import compute_Cn_Vn, typical_params
                from .range_stats import occupancy_field
                params = typical_params(args.d, args.n, args.zeta)
                rho = args.vn_beta * params["rho_typ"]
                cn = compute_Cn_Vn(path, params["r_n"], rho)
                field = occupancy_field(path, params["r_n"])
                dense = {tuple(map(int, c)) for c in cn["centers"]}
                proj = {}
                for center, count in zip(field.centers, field.counts):
                    if tuple(map(int, center)) not in dense:
                        continue
                    key = (int(center[0]), int(center[1]))
                    proj[key] = proj.get(key, 0) + int(count)
                vn_rows = [[x, y, c] for (x, y), c in sorted(proj.items())]
            part = hat_partition(path, schedule)
            if args.budget:
                budget = sigma_budget(path, schedule, table, part)
                corr = budget.corrector
            else:
                budget = None
                from .green import corrector_per_step
                _, corr = corrector_per_step(path, schedule.T, table,
                                             per_query=False)
            check = folding_event_check(path, schedule, args.event_A,
                                        args.event_delta, I, part=part,
                                        corrector_value=corr)
            for lvl in check["levels"]:
                rows.append([rep, lvl["level"], lvl["size"], lvl["L"],
                             lvl["bound"], not lvl["ok"]])
            doc = {"seed": args.seed, "stream": rep,
                   "event_holds": check["event_holds"],
                   "corrector": check["corrector"],
                   "zeta": check["zeta"],
                   "counterexample": check["counterexample"],
                   "levels": hat_sizes_with_L(schedule, part)}
            if budget is not None:
                doc["sigma"] = list(budget.sigma)
                doc["budget_total"] = budget.total
                doc["budget_holds"] = budget.holds
            fh.write(json.dumps(doc))
            fh.write("\n")
    write_csv(out_path, ["stream", "level", "hat_size", "L", "bound",
                         "exceeded"], rows)
    manifest.add_output(out_path)
    manifest.add_output(reports)
    if args.vn_out:
        write_csv(args.vn_out, ["x", "y", "count"], vn_rows)
        manifest.add_output(args.vn_out)
    manifest.constants = {
        "C0": args.c0, "c0": args.c0_small, "T": schedule.T,
        "terminal": schedule.terminal,
        "levels": [(lvl.i, lvl.rho, lvl.r, lvl.L)
                   for lvl in schedule.levels],
        "A": args.event_A, "delta": args.event_delta, "I": I,
    }
    manifest.streams = {"paths": [0, args.samples]}
    manifest.write(out_path.with_suffix(".manifest.json"))
    return 0


def _rate_csv(out_path, estimates, fit) -> None:
    rows = []
    for e in estimates:
        fitted = fit["intercept"] + fit["slope"] * e.rate_coord \
            if fit else ""
        rows.append([e.estimator, e.d, e.n, e.zeta, e.rate_coord, e.log_p,
                     e.se_log, e.p_hat, e.ci_low, e.ci_high, e.hits,
                     e.samples, e.in_window, fitted,
                     fit["slope"] if fit else "",
                     fit["intercept"] if fit else "",
                     fit["r2"] if fit else ""])
    write_csv(out_path,
              ["estimator", "d", "n", "zeta", "rate_coord", "log_p",
               "se_log", "p_hat", "ci_low", "ci_high", "hits", "samples",
               "in_window", "fit_y", "slope", "intercept", "r2"], rows)


def cmd_deviation(args) -> int:
    from .deviation import (calibrate_range_mean, direct_tail,
                            gaussian_mgf_check, intersection_tail,
                            lower_bound_experiment, rate_fit,
                            transfer_kernel_checks)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = ManifestWriter(args, f"deviation:{args.mode}")
    zetas = [float(z) for z in args.zeta] if args.zeta else []

    if args.mode == "direct":
        cal = calibrate_range_mean(args.d, args.n, args.samples, args.seed)
        ests = direct_tail(args.d, args.n, zetas, args.samples, args.seed,
                           calibration=cal)
        fit = rate_fit(ests) if len(ests) >= 4 else None
        _rate_csv(out_path, ests, fit)
        manifest.constants = {"calibration_mean": cal["mean"],
                              "sigma2_per_n": cal["sigma2_per_n"]}
        if args.per_sample_out or args.moments_out:
            from .range_stats import moment_report, sample_walk_statistics
            sizes = sample_walk_statistics(args.d, args.n, args.samples,
                                           args.seed)
            if args.per_sample_out:
                write_csv(args.per_sample_out,
                          ["seed", "stream_id", "n", "range_volume"],
                          [[args.seed, i, args.n, int(v)]
                           for i, v in enumerate(sizes)])
                manifest.add_output(args.per_sample_out)
            if args.moments_out:
                rep = moment_report(args.d, args.n, args.samples, args.seed,
                                    sizes=sizes)
                row = rep.as_dict()
                write_csv(args.moments_out, list(row.keys()),
                          [list(row.values())])
                manifest.add_output(args.moments_out)
    elif args.mode == "lower":
        cal = calibrate_range_mean(args.d, args.n, args.cal_samples,
                                   args.seed)
        ests = [lower_bound_experiment(args.d, args.n, z, seed=args.seed
                                       + int(z), population=args.population,
                                       replicates=args.replicates,
                                       calibration=cal)
                for z in zetas]
        fit = rate_fit(ests) if len(ests) >= 4 else None
        _rate_csv(out_path, ests, fit)
        manifest.constants = {"calibration_mean": cal["mean"]}
    elif args.mode == "transfer":
        res = transfer_kernel_checks(args.samples, args.seed)
        rows = [[r["name"], r["mean"], r["se"], r["ok"],
                 r["closed_form"], r["closed_within_4se"]]
                for r in res["rows"]]
        write_csv(out_path, ["generator", "mean", "se", "ok",
                             "closed_form", "closed_within_4se"], rows)
        manifest.constants = {"kappa_star": res["kappa_star"],
                              "ok": res["ok"]}
    elif args.mode == "intersection":
        res = intersection_tail(args.d, args.n, args.samples, args.seed)
        rows = [[t, p, se] for t, p, se in
                zip(res["t"], res["tail"], res["se_log"])]
        write_csv(out_path, ["t", "tail_p", "se_log"], rows)
        manifest.constants = {"alpha": res["alpha"], "mean": res["mean"],
                              "fit": res["fit"]}
    elif args.mode == "gaussian":
        thetas = np.linspace(-1, 1, args.theta_points)
        cal = calibrate_range_mean(args.d, args.n, args.cal_samples,
                                   args.seed)
        res = gaussian_mgf_check(args.d, args.n, args.zeta_n, thetas,
                                 args.samples, args.seed, calibration=cal)
        rows = [[r["theta"], r["scaled_log_mgf"], r["gaussian_ref"],
                 r["ess"]] for r in res["rows"]]
        write_csv(out_path, ["theta", "scaled_log_mgf", "gaussian_ref",
                             "ess"], rows)
        manifest.constants = {"sigma2": res["sigma2"],
                              "max_rel_gap": res["max_rel_gap"],
                              "truncated": res["truncated_thetas"]}
        if args.hist_out:
            from scipy.stats import norm
            from .range_stats import sample_walk_statistics
            sizes = sample_walk_statistics(args.d, args.n, args.samples,
                                           args.seed)
            std = (sizes - cal["mean"]) / math.sqrt(cal["var"])
            edges = np.linspace(-4, 4, 33)
            counts, _ = np.histogram(std, bins=edges)
            masses = np.diff(norm.cdf(edges))
            hist_rows = [[edges[i], edges[i + 1], int(counts[i]),
                          len(std), masses[i]]
                         for i in range(len(counts))]
            write_csv(args.hist_out,
                      ["bin_lo", "bin_hi", "count", "total", "normal_mass"],
                      hist_rows)
            manifest.add_output(args.hist_out)
    else:
        raise ContractError(f"unknown deviation mode {args.mode}")
    manifest.add_output(out_path)
    manifest.write(out_path.with_suffix(".manifest.json"))
    return 0


def cmd_report(args) -> int:
    """Join compatible CSV outputs from several manifests."""
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = None
    sub = None
    rows = []
    for mpath in args.manifests:
        with open(mpath, encoding="utf-8") as fh:
            doc = json.load(fh)
        if sub is None:
            sub = doc["subcommand"]
        elif sub != doc["subcommand"]:
            raise ContractError(
                f"cannot join {doc['subcommand']} with {sub}: "
                "mixed-subcommand report")
        base = Path(mpath).parent
        for name in doc["outputs"]:
            if not name.endswith(".csv"):
                continue
            with open(base / name, encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                head = next(reader)
                if header is None:
                    header = ["manifest"] + head
                elif header[1:] != head:
                    raise ContractError(
                        f"schema mismatch in {name}: {head} vs {header[1:]}")
                for row in reader:
                    rows.append([Path(mpath).name] + row)
    if header is None:
        raise ContractError("no CSV outputs found in the manifests")
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rangelab",
        description="random-walk range laboratory: exact kernels plus "
                    "Monte Carlo deviation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample and store walk paths")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--ndjson", action="store_true",
                   help="also dump one position per line")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("green", help="tabulate G_T and export the axis profile")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--method", default="auto",
                   choices=["auto", "dp", "spectral"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_green)

    p = sub.add_parser("capacity", help="exact and Monte Carlo capacities")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--set", default="random", choices=["cube", "random"])
    p.add_argument("--r", type=int, default=4, help="cube side for --set cube")
    p.add_argument("--size", type=int, default=20)
    p.add_argument("--spread", type=int, default=8)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--trials", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--green-T", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("folding", help="scale ladder, hat partition, budget")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--zeta", type=float, required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--c0", type=float, default=1.0,
                   help="density-scale constant C0")
    p.add_argument("--c0-small", type=float, default=0.125,
                   help="terminal-level constant (d=3)")
    p.add_argument("--event-A", type=float, default=1.0)
    p.add_argument("--event-delta", type=float, default=0.125)
    p.add_argument("--event-I", type=int, default=None)
    p.add_argument("--budget", action="store_true",
                   help="also evaluate the five-term budget")
    p.add_argument("--vn-out", default=None,
                   help="write the projected occupancy of the dense region "
                        "of the first path (columns x, y, count)")
    p.add_argument("--vn-beta", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_folding)

    p = sub.add_parser("deviation", help="tail estimators and checks")
    p.add_argument("mode", choices=["direct", "lower", "transfer",
                                    "intersection", "gaussian"])
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--zeta", type=float, nargs="*", default=None)
    p.add_argument("--zeta-n", type=float, default=None,
                   help="moderate-deviation scale for the gaussian mode")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--cal-samples", type=int, default=1000)
    p.add_argument("--population", type=int, default=600)
    p.add_argument("--replicates", type=int, default=4)
    p.add_argument("--theta-points", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schedule-c0", type=float, default=1.0)
    p.add_argument("--hist-out", default=None,
                   help="also write a standardized-range histogram CSV "
                        "(gaussian mode)")
    p.add_argument("--per-sample-out", default=None,
                   help="per-sample (seed, stream, n, |R_n|) rows "
                        "(direct mode)")
    p.add_argument("--moments-out", default=None,
                   help="moment summary row for |R_n| (direct mode)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_deviation)

    p = sub.add_parser("report", help="join compatible experiment CSVs")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "green_T", 0) is None:
        args.green_T = {3: 48, 4: 24}.get(args.d, 12)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return 2
    except ResourceError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
