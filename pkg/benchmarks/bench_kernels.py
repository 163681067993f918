"""Benchmark the numba-compiled hot kernels against the numpy/python fallback.

The fallback path is selected by CAPFLOW_NO_NUMBA=1, so this script spawns a
subprocess per backend and compares wall times on the two dominant kernels:
the agent-simulation step loop and the parabolic-cylinder grid evaluation.

Usage:  python benchmarks/bench_kernels.py [--steps 2000]
"""

import argparse
import json
import os
import subprocess
import sys
import textwrap

WORKLOAD = textwrap.dedent("""
    import json, time
    import numpy as np
    from capflow.model import Model, SectorGrid, EconomyParams, ParamFunctions, Profile
    from capflow import abm, special

    steps = {steps}
    grid = SectorGrid.uniform(16, 1.0)
    params = EconomyParams(tau=1.0, gamma_c=0.0025, epsilon=0.1, nu=0.0,
                           sigma_X=0.05, sigma_K=0.02, sigma_Xhat=0.05,
                           sigma_Khat=3.86, n_firms=200, n_investors=400)
    model = Model(grid, params, ParamFunctions(f0_scale=0.02))

    # warm-up triggers compilation on the jit path
    abm.simulate(model, 50, 0.01, seed=0, record_every=50)
    t0 = time.time()
    pop, ts, counts, mk, mkh = abm.simulate(model, steps, 0.01, seed=1,
                                            record_every=100)
    t_abm = time.time() - t0
    half = mk.shape[0] // 2

    zs = np.linspace(-8.0, 8.0, 200_000)
    special.parabolic_cylinder_D_grid(1.3, zs[:100])
    t0 = time.time()
    out = special.parabolic_cylinder_D_grid(1.3, zs)
    t_dp = time.time() - t0

    print(json.dumps({{"abm_s": t_abm, "dp_grid_s": t_dp,
                       "abm_mean_k": float(np.nanmean(mk[half:])),
                       "dp_checksum": float(out.sum())}}))
""")


def run_backend(no_numba, steps):
    env = dict(os.environ)
    env["CAPFLOW_NO_NUMBA"] = "1" if no_numba else "0"
    out = subprocess.run([sys.executable, "-c", WORKLOAD.format(steps=steps)],
                         capture_output=True, text=True, env=env, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=2000)
    args = parser.parse_args()
    jit = run_backend(False, args.steps)
    plain = run_backend(True, args.steps)
    # the many-agent dynamics is chaotic: identical noise streams still
    # diverge from 1-ulp libm differences between backends, so the ABM
    # equivalence check is statistical; D_p evaluation is deterministic
    gap = abs(jit["abm_mean_k"] - plain["abm_mean_k"]) \
        / abs(plain["abm_mean_k"])
    assert gap <= 0.05, f"backends disagree on the ABM statistics ({gap:.3f})"
    assert abs(jit["dp_checksum"] - plain["dp_checksum"]) \
        <= 1e-9 * abs(plain["dp_checksum"]), "backends disagree on D_p"
    print(f"agent step loop  ({args.steps} steps, 600 agents):")
    print(f"  numba   {jit['abm_s']:8.2f} s")
    print(f"  fallback{plain['abm_s']:8.2f} s   "
          f"speedup x{plain['abm_s'] / jit['abm_s']:.1f}")
    print("parabolic-cylinder grid (2e5 points):")
    print(f"  numba   {jit['dp_grid_s']:8.3f} s")
    print(f"  fallback{plain['dp_grid_s']:8.3f} s   "
          f"speedup x{plain['dp_grid_s'] / jit['dp_grid_s']:.1f}")


if __name__ == "__main__":
    main()
