"""Euler-Maruyama simulation of the underlying agent model.

Firms carry (X_i, K_i), investors (Xhat_j, Khat_j).  Pairwise delta-function
interactions are regularized by a Gaussian kernel of one grid spacing and
accumulated on the sector grid (linear interpolation between nodes), which
keeps a step at O((N + Nhat) * n_grid).

Noise convention: the Langevin variance per unit time is twice the action
parameter (so the stationary investor-capital density reproduces the
parabolic-cylinder background density exp(f Khat^2 / (2 sigma_Khat))).

Inner loops are numba-compiled with a numpy fallback (CAPFLOW_NO_NUMBA=1).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import maybe_jit

K_FLOOR = 1e-8
_PROFILE_TABLE = 1024


class AbmError(RuntimeError):
    pass


@dataclass
class Population:
    firm_x: np.ndarray
    firm_k: np.ndarray
    inv_x: np.ndarray
    inv_k: np.ndarray
    rng_seed: int
    time: float = 0.0
    floor_breaches: int = 0

    def copy(self):
        return Population(self.firm_x.copy(), self.firm_k.copy(),
                          self.inv_x.copy(), self.inv_k.copy(),
                          self.rng_seed, self.time, self.floor_breaches)


def init_population(model, seed, k_init=1.0, k_inv=None):
    """Uniformly spread agents with the given initial capitals."""
    pr = model.params
    n, nh = int(round(pr.n_firms)), int(round(pr.n_investors))
    rng = np.random.default_rng(seed)
    length = model.grid.length
    if k_inv is None:
        k_inv = k_init * n / nh
    return Population(
        firm_x=rng.uniform(0.0, length, n),
        firm_k=np.full(n, float(k_init)),
        inv_x=rng.uniform(0.0, length, nh),
        inv_k=np.full(nh, float(k_inv)),
        rng_seed=seed,
    )


def _pack_theta(model):
    pr = model.params
    fn = model.funcs
    f2_code = {"concave": 0.0, "convex": 1.0, "linear": 2.0}[fn.f2_shape]
    f1_code = {"arctan": 0.0, "linear": 1.0}[fn.f1_shape]
    return np.array([
        pr.tau, pr.gamma_c, pr.epsilon, pr.nu,
        pr.sigma_X, pr.sigma_K, pr.sigma_Xhat, pr.sigma_Khat,
        fn.cobb_alpha, fn.h_exponent, fn.f0_scale, fn.f1_scale,
        f1_code, f2_code, fn.f2_coef, fn.f2_scale,
        model.grid.length, model.grid.spacing,
    ])


def _profile_tables(model):
    g = model.grid
    xs = np.linspace(0.0, g.length, _PROFILE_TABLE, endpoint=False)
    r_tab = model.funcs.r_profile.sample_at(g, xs)
    rd_tab = model.funcs.r_profile.derivative_at(g, xs)
    b_tab = model.funcs.b_productivity.sample_at(g, xs)
    return np.ascontiguousarray(r_tab), np.ascontiguousarray(rd_tab), \
        np.ascontiguousarray(b_tab)


@maybe_jit
def _interp_table(tab, x, length):
    n = tab.shape[0]
    u = (x % length) / length * n
    i0 = int(u) % n
    i1 = (i0 + 1) % n
    w = u - int(u)
    return tab[i0] * (1.0 - w) + tab[i1] * w


@maybe_jit
def _kde_deposit(xs, weights, grid_field, length, bw):
    # accumulate sum_i w_i * N(x - x_i; bw) on grid nodes (periodic)
    n_grid = grid_field.shape[0]
    h = length / n_grid
    norm = 1.0 / (math.sqrt(2.0 * math.pi) * bw)
    reach = int(4.0 * bw / h) + 1
    grid_field[:] = 0.0
    for i in range(xs.shape[0]):
        xi = xs[i] % length
        j0 = int(xi / h)
        for dj in range(-reach, reach + 1):
            j = (j0 + dj) % n_grid
            d = xi - j * h
            d -= length * round(d / length)
            grid_field[j] += weights[i] * norm * math.exp(-0.5 * (d / bw) ** 2)


@maybe_jit
def _kde_read(x, grid_field, length):
    n_grid = grid_field.shape[0]
    u = (x % length) / length * n_grid
    i0 = int(u) % n_grid
    i1 = (i0 + 1) % n_grid
    w = u - int(u)
    return grid_field[i0] * (1.0 - w) + grid_field[i1] * w


@maybe_jit
def _f2_of(R, f2_code, coef, scale):
    if f2_code == 0.0:
        v = 1.0 + coef * math.atan(R / scale)
    elif f2_code == 1.0:
        v = 1.0 + coef * (R / scale) ** 2
    else:
        v = 1.0 + coef * R / scale
    return v if v > 1e-8 else 1e-8


@maybe_jit
def _f1_of(rbar, f1_code, scale):
    if f1_code == 0.0:
        return scale * math.atan(rbar - 1.0)
    return scale * (rbar - 1.0)


@maybe_jit
def _abm_chunk(firm_x, firm_k, inv_x, inv_k, normals, theta, r_tab, rd_tab,
               b_tab, n_grid, dt, steps):
    """Advance the population by `steps` Euler-Maruyama steps in place.

    Returns the number of capital-floor reflections.
    """
    (tau, gamma_c, eps, nu, sig_x, sig_k, sig_xh, sig_kh, alpha, eta,
     f0_scale, f1_scale, f1_code, f2_code, f2_coef, f2_scale, length,
     spacing) = (theta[0], theta[1], theta[2], theta[3], theta[4], theta[5],
                 theta[6], theta[7], theta[8], theta[9], theta[10], theta[11],
                 theta[12], theta[13], theta[14], theta[15], theta[16],
                 theta[17])
    n = firm_x.shape[0]
    nh = inv_x.shape[0]
    bw = spacing
    self_w = 1.0 / (math.sqrt(2.0 * math.pi) * bw)

    rho = np.zeros(n_grid)       # firm number density
    kap = np.zeros(n_grid)       # capital-weighted firm density
    wgt = np.zeros(n_grid)       # sum_i F2_i kernel (allocation normalizer)
    tfield = np.zeros(n_grid)    # sum_j Khat_j / W(Xhat_j) kernel
    ufield = np.zeros(n_grid)    # sum_i (r_i + F1_i) F2_i kernel
    vfield = np.zeros(n_grid)    # sum_i mobility integrand kernel

    R_i = np.zeros(n)
    F2_i = np.zeros(n)
    r_i = np.zeros(n)
    F1_i = np.zeros(n)
    w_at_inv = np.zeros(nh)

    breaches = 0
    sq_x = math.sqrt(2.0 * sig_x * dt)
    sq_k = math.sqrt(2.0 * sig_k * dt)
    sq_xh = math.sqrt(2.0 * sig_xh * dt)
    sq_kh = math.sqrt(2.0 * sig_kh * dt)

    for s in range(steps):
        base = s * (2 * n + 2 * nh)
        # --- firm-level quantities
        sum_r = 0.0
        for i in range(n):
            rp = _interp_table(r_tab, firm_x[i], length)
            R_i[i] = rp * firm_k[i] ** alpha
            sum_r += R_i[i]
            F2_i[i] = _f2_of(R_i[i], f2_code, f2_coef, f2_scale)
        _kde_deposit(firm_x, firm_k, kap, length, bw)
        ones = firm_k * 0.0 + 1.0
        _kde_deposit(firm_x, ones, rho, length, bw)
        for i in range(n):
            bp = _interp_table(b_tab, firm_x[i], length)
            neighbour_k = _kde_read(firm_x[i], kap, length) - self_w * firm_k[i]
            if neighbour_k < 0.0:
                neighbour_k = 0.0
            r_i[i] = alpha * bp * firm_k[i] ** (alpha - 1.0) \
                - gamma_c * neighbour_k / firm_k[i]
            rbar = n * R_i[i] / sum_r
            F1_i[i] = _f1_of(rbar, f1_code, f1_scale)

        # --- allocation fields
        _kde_deposit(firm_x, F2_i, wgt, length, bw)
        for j in range(nh):
            w = _kde_read(inv_x[j], wgt, length)
            w_at_inv[j] = w if w > 1e-12 else 1e-12
        _kde_deposit(inv_x, inv_k / w_at_inv, tfield, length, bw)
        _kde_deposit(firm_x, (r_i + F1_i) * F2_i, ufield, length, bw)

        # --- investor mobility integrand (firm-weighted)
        for i in range(n):
            rdp = _interp_table(rd_tab, firm_x[i], length)
            gradR = rdp * firm_k[i] ** alpha
            f0p = f0_scale / (1.0 + R_i[i] ** 2)
            rbar = n * R_i[i] / sum_r
            if f1_code == 0.0:
                f1p = f1_scale / (1.0 + (rbar - 1.0) ** 2)
            else:
                f1p = f1_scale
            vfield_w = f0p * gradR + nu * f1p * gradR * n / sum_r
            ones[i] = vfield_w
        _kde_deposit(firm_x, ones, vfield, length, bw)

        # --- firm updates
        for i in range(n):
            alloc_i = F2_i[i] * _kde_read(firm_x[i], tfield, length)
            drdx = _interp_table(rd_tab, firm_x[i], length) * firm_k[i] ** alpha
            dens = _kde_read(firm_x[i], rho, length)
            kbar = _kde_read(firm_x[i], kap, length) / (dens if dens > 1e-12 else 1e-12)
            # repulsion: down the local density gradient, weighted K_X/K
            d_up = _kde_read(firm_x[i] + 0.5 * spacing, rho, length)
            d_dn = _kde_read(firm_x[i] - 0.5 * spacing, rho, length)
            grad_rho = (d_up - d_dn) / spacing
            drift_x = drdx * firm_k[i] ** eta \
                - tau * (kbar / firm_k[i]) * grad_rho
            firm_x[i] = (firm_x[i] + drift_x * dt
                         + sq_x * normals[base + i]) % length
            drift_k = -(firm_k[i] - alloc_i) / eps
            firm_k[i] += drift_k * dt + sq_k * normals[base + n + i]
            if firm_k[i] < K_FLOOR:
                firm_k[i] = 2.0 * K_FLOOR - firm_k[i]
                breaches += 1

        # --- investor updates
        for j in range(nh):
            ret = _kde_read(inv_x[j], ufield, length) / w_at_inv[j]
            inv_k[j] += (ret / eps) * inv_k[j] * dt \
                + sq_kh * normals[base + 2 * n + j]
            if inv_k[j] < K_FLOOR:
                inv_k[j] = 2.0 * K_FLOOR - inv_k[j]
                breaches += 1
            dens = _kde_read(inv_x[j], rho, length)
            mob = _kde_read(inv_x[j], vfield, length) / (dens if dens > 1e-12 else 1e-12)
            inv_x[j] = (inv_x[j] + mob * dt
                        + sq_xh * normals[base + 2 * n + nh + j]) % length

        # --- re-impose the invested-equals-physical identity
        tot_k = 0.0
        tot_kh = 0.0
        for i in range(n):
            tot_k += firm_k[i]
        for j in range(nh):
            tot_kh += inv_k[j]
        scale = tot_kh / tot_k
        for i in range(n):
            firm_k[i] *= scale
    return breaches


def step(population, model, dt, normals=None, n_grid=None):
    """One Euler-Maruyama step (validates dt against epsilon/10)."""
    pr = model.params
    if dt > pr.epsilon / 10.0 + 1e-15:
        raise AbmError("dt too large: the capital relaxation needs dt <= eps/10")
    pop = population
    n, nh = pop.firm_x.shape[0], pop.inv_x.shape[0]
    if normals is None:
        rng = np.random.default_rng(pop.rng_seed + int(pop.time / dt) + 1)
        normals = rng.standard_normal(2 * n + 2 * nh)
    theta = _pack_theta(model)
    r_tab, rd_tab, b_tab = _profile_tables(model)
    if n_grid is None:
        n_grid = model.grid.n_points
    breaches = _abm_chunk(pop.firm_x, pop.firm_k, pop.inv_x, pop.inv_k,
                          np.ascontiguousarray(normals), theta, r_tab, rd_tab,
                          b_tab, n_grid, dt, 1)
    pop.time += dt
    pop.floor_breaches += int(breaches)
    return pop


def simulate(model, n_steps, dt, seed, k_init=1.0, record_every=50,
             population=None, chunk=1000):
    """Run the simulation, recording per-sector statistics snapshots.

    Returns (population, times, firm_counts[t, sector], mean_k[t, sector],
    mean_khat[t, sector]).  Noise is drawn in chunks from a seeded generator
    so numba and fallback paths see identical streams.
    """
    pr = model.params
    if dt > pr.epsilon / 10.0 + 1e-15:
        raise AbmError("dt too large: needs dt <= eps/10")
    pop = population.copy() if population is not None \
        else init_population(model, seed, k_init)
    n, nh = pop.firm_x.shape[0], pop.inv_x.shape[0]
    theta = _pack_theta(model)
    r_tab, rd_tab, b_tab = _profile_tables(model)
    n_grid = model.grid.n_points
    rng = np.random.default_rng(seed)

    n_rec = n_steps // record_every
    counts = np.zeros((n_rec, n_grid))
    mean_k = np.zeros((n_rec, n_grid))
    mean_kh = np.zeros((n_rec, n_grid))
    times = np.zeros(n_rec)

    edges = np.linspace(0.0, model.grid.length, n_grid + 1)
    rec = 0
    done = 0
    while done < n_steps:
        todo = min(chunk, n_steps - done)
        # record boundaries must align with chunk boundaries
        todo = min(todo, record_every - (done % record_every) or record_every)
        normals = rng.standard_normal(todo * (2 * n + 2 * nh))
        breaches = _abm_chunk(pop.firm_x, pop.firm_k, pop.inv_x, pop.inv_k,
                              normals, theta, r_tab, rd_tab, b_tab, n_grid,
                              dt, todo)
        pop.floor_breaches += int(breaches)
        pop.time += todo * dt
        done += todo
        if done % record_every == 0 and rec < n_rec:
            fidx = np.clip(np.digitize(pop.firm_x % model.grid.length, edges) - 1,
                           0, n_grid - 1)
            iidx = np.clip(np.digitize(pop.inv_x % model.grid.length, edges) - 1,
                           0, n_grid - 1)
            for s in range(n_grid):
                sel = fidx == s
                counts[rec, s] = np.sum(sel)
                mean_k[rec, s] = np.mean(pop.firm_k[sel]) if np.any(sel) else np.nan
                isel = iidx == s
                mean_kh[rec, s] = np.mean(pop.inv_k[isel]) if np.any(isel) else np.nan
            times[rec] = pop.time
            rec += 1
    return pop, times[:rec], counts[:rec], mean_k[:rec], mean_kh[:rec]


# ---------------------------------------------------------------------------
# binary trajectory records
# ---------------------------------------------------------------------------

_TRAJ_MAGIC = b"CFTR0001"


def write_trajectory(path, snapshots):
    """Dump population snapshots as fixed-width little-endian records.

    Layout: 8-byte magic, then three little-endian uint32 (n_firms,
    n_investors, n_records); each record is float64 time followed by the
    firm positions, firm capitals, investor positions, investor capitals
    (all little-endian float64, fixed width per record).
    """
    if not snapshots:
        raise AbmError("nothing to write")
    n = snapshots[0].firm_x.shape[0]
    nh = snapshots[0].inv_x.shape[0]
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        np.array([n, nh, len(snapshots)], dtype="<u4").tofile(fh)
        for pop in snapshots:
            np.array([pop.time], dtype="<f8").tofile(fh)
            for arr in (pop.firm_x, pop.firm_k, pop.inv_x, pop.inv_k):
                np.asarray(arr, dtype="<f8").tofile(fh)


def read_trajectory(path):
    """Inverse of write_trajectory: (times, firm_x, firm_k, inv_x, inv_k)."""
    with open(path, "rb") as fh:
        if fh.read(8) != _TRAJ_MAGIC:
            raise AbmError(f"{path}: not a trajectory record")
        n, nh, n_rec = np.fromfile(fh, dtype="<u4", count=3)
        times = np.empty(n_rec)
        fx = np.empty((n_rec, n))
        fk = np.empty((n_rec, n))
        ix = np.empty((n_rec, nh))
        ik = np.empty((n_rec, nh))
        for r in range(n_rec):
            times[r] = np.fromfile(fh, dtype="<f8", count=1)[0]
            fx[r] = np.fromfile(fh, dtype="<f8", count=n)
            fk[r] = np.fromfile(fh, dtype="<f8", count=n)
            ix[r] = np.fromfile(fh, dtype="<f8", count=nh)
            ik[r] = np.fromfile(fh, dtype="<f8", count=nh)
    return times, fx, fk, ix, ik


@dataclass
class StationaryStats:
    firm_count: np.ndarray
    mean_k: np.ndarray
    mean_khat: np.ndarray
    se_k: np.ndarray
    se_count: np.ndarray
    n_batches: int
    window: int


def stationary_stats(counts, mean_k, mean_kh, burn_in_records, n_batches=20):
    """Time averages with batch-mean standard errors over the window."""
    c = counts[burn_in_records:]
    k = mean_k[burn_in_records:]
    kh = mean_kh[burn_in_records:]
    if c.shape[0] < n_batches:
        raise AbmError("window too short for the requested batch count")
    nb = c.shape[0] // n_batches * n_batches
    cb = c[:nb].reshape(n_batches, -1, c.shape[1])
    kb = k[:nb].reshape(n_batches, -1, k.shape[1])
    khb = kh[:nb].reshape(n_batches, -1, kh.shape[1])
    c_means = cb.mean(axis=1)
    with np.errstate(invalid="ignore"):
        k_means = np.nanmean(kb, axis=1)
        kh_means = np.nanmean(khb, axis=1)
    return StationaryStats(
        firm_count=c_means.mean(axis=0),
        mean_k=np.nanmean(k_means, axis=0),
        mean_khat=np.nanmean(kh_means, axis=0),
        se_k=np.nanstd(k_means, axis=0, ddof=1) / math.sqrt(n_batches),
        se_count=c_means.std(axis=0, ddof=1) / math.sqrt(n_batches),
        n_batches=n_batches,
        window=c.shape[0],
    )


def compare_to_field(stats, state, branches, z_max=3.0, rel_max=0.10,
                     pass_fraction=1.0):
    """Per-sector comparison of ABM stats against the field prediction.

    A sector passes when its |z| <= z_max and relative error <= rel_max;
    the report passes when at least pass_fraction of sectors do (and no
    sector lacks a stable branch to compare against).
    """
    model = state.model
    n_grid = model.grid.n_points
    report = {"sectors": [], "pass": True}
    n_pass = 0
    dens_pred = state.firm_density * model.grid.spacing \
        * model.params.n_firms / state.total_firms()
    for s in range(n_grid):
        stable = [b for b in branches
                  if b.sector == s and b.stability == "stable"]
        entry = {"sector": s}
        if not stable:
            entry["error"] = "no stable branch to compare"
            report["sectors"].append(entry)
            report["pass"] = False
            continue
        k_abm = stats.mean_k[s]
        nearest = min(stable, key=lambda b: abs(b.K_value - k_abm))
        se = max(stats.se_k[s], 1e-12)
        z = abs(k_abm - nearest.K_value) / se
        rel = abs(k_abm - nearest.K_value) / nearest.K_value
        count_pred = dens_pred[s]
        zc = abs(stats.firm_count[s] - count_pred) / max(stats.se_count[s], 1e-12)
        relc = abs(stats.firm_count[s] - count_pred) / max(count_pred, 1e-12)
        ok = bool(z <= z_max and rel <= rel_max)
        entry.update({"k_abm": float(k_abm), "k_field": float(nearest.K_value),
                      "z": float(z), "rel_err": float(rel),
                      "count_abm": float(stats.firm_count[s]),
                      "count_field": float(count_pred),
                      "z_count": float(zc), "rel_err_count": float(relc),
                      "pass": ok})
        report["sectors"].append(entry)
        n_pass += int(ok)
    report["pass"] = bool(report["pass"] and n_pass >= pass_fraction * n_grid)
    report["fraction_passing"] = n_pass / n_grid
    return report
