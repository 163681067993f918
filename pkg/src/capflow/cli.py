"""Scenario runner: background -> capital -> dynamics -> transitions -> abm.

Every run writes a deterministic artifact directory:

    background.csv   X, firm_density, K_X, A, p, f, g
    scalars.json     D, M, C, p_bar (+ sweep/convergence info)
    branches.csv     sector, K, residual, B, stability, regime
    dynamics.csv     sector, G, ReOmega, ImOmega, label
    transitions.csv  id, value, drift, decay
    abm_stats.csv    sector, firm_count, mean_K, mean_Khat, se_K, se_count
    compare.json     per-sector field-vs-ABM verdicts
    manifest.json    input hash, package version, seeds, backend

Exit codes: 0 success, 2 configuration/solver failure, 3 comparison failure.
"""

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from . import abm as abm_mod
from . import capital, dynamics
from . import transitions as trans_mod
from ._accel import USE_NUMBA
from .background import BackgroundError
from .capital import CapitalError
from .config import ConfigError, Scenario
from .transitions import TransitionQuery


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if not isinstance(v, str) else v
                              for v in row) + "\n")


def _json_dump(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


class RunFailure(RuntimeError):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def run_scenario(scenario, out_dir, seed=None, threads=1, plot_data=False):
    """Execute the scenario stages into out_dir; returns the manifest dict."""
    os.makedirs(out_dir, exist_ok=True)
    model = scenario.model()
    seeds = [seed] if seed is not None else scenario.seeds
    stages = scenario.stages

    state = None
    branches = []
    if "background" in stages or "capital" in stages or "dynamics" in stages \
            or "transitions" in stages or "abm" in stages:
        bgopt = scenario.background
        try:
            k0 = np.full(model.grid.n_points, bgopt["k_init"])
            state, sweeps = capital.self_consistent_sweep(
                model, k0, damping=bgopt["damping"],
                max_sweeps=bgopt["max_sweeps"], tol=bgopt["tol"],
                use_backreaction=bgopt["use_backreaction"],
                mode=bgopt["mode"])
        except (BackgroundError, CapitalError) as exc:
            raise RunFailure(f"background solve failed: {exc}", 2) from exc
        if sweeps >= bgopt["max_sweeps"]:
            raise RunFailure("background solve failed: no convergence within "
                             f"{bgopt['max_sweeps']} sweeps", 2)
        g = model.grid
        _write_csv(os.path.join(out_dir, "background.csv"),
                   ["X", "firm_density", "K_X", "A", "p", "f", "g"],
                   [(g.positions[j], state.firm_density[j],
                     state.avg_capital[j], state.A_field[j], state.p_field[j],
                     state.f_field[j], state.g_field[j])
                    for j in range(g.n_points)])
        _json_dump(os.path.join(out_dir, "scalars.json"), {
            "D": float(state.lagrange_D), "M": float(state.M_max),
            "C": float(state.C_norm), "p_bar": float(state.p_bar),
            "sweeps": int(sweeps),
            "total_firms": state.total_firms(),
            "total_investors": state.total_investors()})
        if plot_data:
            _write_csv(os.path.join(out_dir, "plot_density.csv"), ["x", "y"],
                       zip(g.positions, state.firm_density))
            _write_csv(os.path.join(out_dir, "plot_capital.csv"), ["x", "y"],
                       zip(g.positions, state.avg_capital))

    if "capital" in stages:
        cp = scenario.capital
        branches = capital.branch_table(
            state, coupling=cp["coupling"], scan_lo=cp["scan_lo"],
            scan_hi=cp["scan_hi"], scan_points=cp["scan_points"])
        _write_csv(os.path.join(out_dir, "branches.csv"),
                   ["sector", "K", "residual", "B", "stability", "regime"],
                   [(b.sector, b.K_value, b.residual, b.B_factor,
                     b.stability, b.regime) for b in branches])

    if "dynamics" in stages:
        rows = dynamics.stability_map(state, branches, scenario.g_wavenumbers,
                                      scenario.expectation)
        _write_csv(os.path.join(out_dir, "dynamics.csv"),
                   ["sector", "G", "ReOmega", "ImOmega", "label"], rows)

    if "transitions" in stages:
        queries = []
        for i, q in enumerate(scenario.transition_queries):
            queries.append(TransitionQuery(
                kind=q["kind"], start=tuple(q["start"]), end=tuple(q["end"]),
                second_start=tuple(q["second_start"]) if "second_start" in q else None,
                second_end=tuple(q["second_end"]) if "second_end" in q else None,
                alpha=float(q.get("alpha", model.params.alpha_lifespan)),
                qid=str(q.get("id", i))))
        rows = []
        for qid, res in trans_mod.run_queries(queries, state):
            rows.append((qid, res.value, res.drift, res.decay))
        _write_csv(os.path.join(out_dir, "transitions.csv"),
                   ["id", "value", "drift", "decay"], rows)

    compare = None
    if "abm" in stages:
        a = scenario.abm
        k_init = a["k_init"]
        if k_init is None:
            k_init = float(np.mean(state.avg_capital))
        all_counts, all_mk, all_mkh = [], [], []

        def one_replica(s):
            return abm_mod.simulate(model, a["n_steps"], a["dt"], seed=s,
                                    k_init=k_init,
                                    record_every=a["record_every"])

        replica_seeds = [s + 1000 * r for s in seeds
                         for r in range(a["replicas"])]
        if threads > 1 and len(replica_seeds) > 1:
            with concurrent.futures.ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(one_replica, replica_seeds))
        else:
            results = [one_replica(s) for s in replica_seeds]
        burn_rec = None
        for pop, ts, counts, mk, mkh in results:
            burn_rec = int(a["burn_in_fraction"] * counts.shape[0])
            all_counts.append(counts[burn_rec:])
            all_mk.append(mk[burn_rec:])
            all_mkh.append(mkh[burn_rec:])
        counts = np.concatenate(all_counts, axis=0)
        mk = np.concatenate(all_mk, axis=0)
        mkh = np.concatenate(all_mkh, axis=0)
        stats = abm_mod.stationary_stats(counts, mk, mkh, 0,
                                         n_batches=a["n_batches"])
        _write_csv(os.path.join(out_dir, "abm_stats.csv"),
                   ["sector", "firm_count", "mean_K", "mean_Khat", "se_K",
                    "se_count"],
                   [(s, stats.firm_count[s], stats.mean_k[s],
                     stats.mean_khat[s], stats.se_k[s], stats.se_count[s])
                    for s in range(model.grid.n_points)])
        if branches:
            compare = abm_mod.compare_to_field(
                stats, state, branches, z_max=a["z_max"],
                rel_max=a["rel_max"], pass_fraction=a["pass_fraction"])
            _json_dump(os.path.join(out_dir, "compare.json"), compare)

    manifest = {
        "scenario_name": scenario.name,
        "scenario_sha256": hashlib.sha256(
            json.dumps(scenario.raw, sort_keys=True).encode()).hexdigest(),
        "package_version": __version__,
        "seeds": seeds,
        "stages": list(stages),
        "numba": bool(USE_NUMBA),
    }
    _json_dump(os.path.join(out_dir, "manifest.json"), manifest)
    if compare is not None and not compare["pass"]:
        raise RunFailure("field-vs-simulation comparison failed", 3)
    return manifest


def run_sweep(scenario, out_dir, threads=1):
    """One run per sweep value; consolidated long-format CSV."""
    os.makedirs(out_dir, exist_ok=True)
    path = scenario.sweep["path"]
    values = scenario.sweep["values"]
    rows = []
    failures = []
    for i, v in enumerate(values):
        sub = os.path.join(out_dir, f"sweep_{i:03d}")
        try:
            sc = scenario.with_override(path, v)
            run_scenario(sc, sub, threads=threads)
        except (RunFailure, ConfigError) as exc:
            failures.append((i, v, str(exc)))
            continue
        bpath = os.path.join(sub, "branches.csv")
        if os.path.exists(bpath):
            with open(bpath) as fh:
                next(fh)
                for line in fh:
                    rows.append((v, *line.strip().split(",")))
    _write_csv(os.path.join(out_dir, "sweep_branches.csv"),
               ["swept_value", "sector", "K", "residual", "B", "stability",
                "regime"], rows)
    if failures:
        _json_dump(os.path.join(out_dir, "sweep_failures.json"),
                   [{"index": i, "value": v, "error": e}
                    for i, v, e in failures])
    return len(failures)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="capflow",
        description="sector-space capital allocation engine")
    parser.add_argument("--scenario", required=True, help="scenario JSON file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--stages", default=None,
                        help="comma-separated stage subset")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--plot-data", action="store_true",
                        help="emit x/y column files for external plotting")
    args = parser.parse_args(argv)

    try:
        scenario = Scenario.from_file(args.scenario)
        if args.stages:
            chosen = [s.strip() for s in args.stages.split(",") if s.strip()]
            scenario.stages = chosen or scenario.stages
            for s in scenario.stages:
                if s not in ("background", "capital", "dynamics",
                             "transitions", "abm"):
                    raise ConfigError(f"--stages: unknown stage {s!r}")
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if scenario.sweep is not None:
            failures = run_sweep(scenario, args.out, threads=args.threads)
            if failures:
                print(f"sweep finished with {failures} failed points",
                      file=sys.stderr)
            return 0
        run_scenario(scenario, args.out, seed=args.seed,
                     threads=args.threads, plot_data=args.plot_data)
        return 0
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
