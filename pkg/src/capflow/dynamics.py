"""Linearized macro-time dynamics of average capital and expected returns.

Couples the capital-equation variation (coefficients k, l, m, n built from
the C1/C2/C3 combination) with a diffusion-type law for expected returns,
yielding the complex frequency Omega(G) of joint oscillations at spatial
wavenumber G.  Im Omega > 0 means the oscillations are damped.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import special
from .capital import CapitalError, gamma_hat, k_of_p


class DynamicsError(RuntimeError):
    pass


#: default expectation-diffusion coefficients (scenario inputs)
DEFAULT_EXPECTATION = {
    "a0": 0.1, "a": 0.0, "b": 0.0, "c": 0.05, "d": 0.0,
    "e": 0.0, "f_diff": 0.0, "g_diff": 0.0, "h_diff": 0.0,
    "u": 0.0, "v": 0.0,
}


@dataclass
class DynamicsCoefficients:
    k: float
    l: float
    m: float
    n: float
    C1: float
    C2: float
    C3: float
    a0: float = 0.1
    a: float = 0.0
    b: float = 0.0
    c: float = 0.05
    d: float = 0.0
    e: float = 0.0
    f_diff: float = 0.0
    g_diff: float = 0.0
    h_diff: float = 0.0
    u: float = 0.0
    v: float = 0.0
    # context of the sector the coefficients были built at
    K: float = 1.0
    R: float = 1.0
    gradR: float = 1.0


def variation_coefficients(j, branch, state, expectation=None,
                           use_lambertw_c1=True):
    """Coefficients of the capital-variation equation at a branch.

    C1 follows the Lambert-W estimate (branch selector 0 for stable roots,
    -1 for unstable); C2 and C3 are the log/linear combinations built on it.
    """
    m = state.model
    pr = m.params
    alpha = m.funcs.cobb_alpha
    eta = m.funcs.h_exponent
    K = branch.K_value
    p = max(branch.p_value, 0.0)
    f_val = branch.f_value
    fabs = abs(f_val)
    fprime = state.fprime_field[j]
    dens = state.firm_density[j]
    d_eff = state.lagrange_D / (2.0 * pr.tau)
    g_val = state.g_field[j]
    grad_g = state.grad_g[j]

    c1_direct = pr.sigma_X * pr.sigma_Khat * (p + 0.5) ** 2 * fprime ** 2 \
        / (96.0 * fabs ** 3)
    if use_lambertw_c1:
        c0 = (K * dens * fabs / (state.C_norm * pr.sigma_Khat)) ** 4 \
            * pr.sigma_X * pr.sigma_Khat * fprime ** 2 / (96.0 * fabs ** 3)
        w_branch = special.PRINCIPAL if branch.stability == "stable" \
            else special.LOWER
        w_arg = -4.0 * c0
        if w_arg < -1.0 / math.e or (w_branch == special.LOWER and w_arg >= 0.0):
            if c0 == 0.0 and w_branch == special.LOWER:
                c1 = c1_direct
            else:
                raise DynamicsError(
                    f"Lambert-W domain violation in C1 estimate (arg={w_arg:.3g})")
        else:
            c1 = c0 * math.exp(-special.lambert_w(w_branch, w_arg))
    else:
        c1 = c1_direct

    c2 = math.log(p + 0.5) - 2.0 * c1 / (p + 0.5)
    c3 = 1.0 - c1 + (p + 1.5) * c2

    common = (d_eff - dens) / dens
    k_coef = 1.0 - eta * (1.0 - pr.gamma_c * c3 / fabs) * common \
        + (alpha * (2.0 * g_val ** 2 / pr.sigma_Xhat + grad_g) * c2
           - (1.0 - alpha) * c3) / fabs
    rbar = m.eval_R(K, j) / state.rbar_norm
    l_coef = pr.varsigma * float(m.F1(rbar)) * c3 / f_val
    m_coef = (1.0 - pr.gamma_c * c3 / f_val) * common \
        - g_val ** 2 * c2 / pr.sigma_Xhat
    n_coef = grad_g * c2 / fabs

    exp_coeffs = dict(DEFAULT_EXPECTATION)
    if expectation:
        exp_coeffs.update(expectation)

    R_field = m.eval_R(state.avg_capital)
    from .model import grid_derivative
    gradR = grid_derivative(m.grid, R_field, 1)[j]
    return DynamicsCoefficients(
        k=k_coef, l=l_coef, m=m_coef, n=n_coef, C1=c1, C2=c2, C3=c3,
        K=K, R=float(R_field[j]), gradR=float(gradR), **exp_coeffs)


def dispersion_relation(coeffs, G):
    """Omega(G) from the reduced first-order relation (g = e = a = 0)."""
    cf = coeffs
    if cf.gradR == 0.0:
        raise DynamicsError("reduced dispersion relation needs grad R != 0")
    L = cf.l * cf.c / cf.R
    Mg = 2.0 * cf.m * cf.c * G / cf.gradR
    denom = L * L + Mg * Mg
    if denom == 0.0:
        raise DynamicsError("degenerate dispersion denominator")
    base = cf.k / cf.K + cf.a0 * cf.l / cf.R
    cross = 2.0 * cf.m * cf.a0 * G / cf.gradR
    re = (L * cross - Mg * base) / denom
    im = (L * base + Mg * cross) / denom
    return complex(re, im)


def dispersion_relation_full(coeffs, G):
    """Both roots of the full quadratic relation (documented alternative)."""
    cf = coeffs
    kk = cf.k / cf.K
    ll = cf.l / cf.R
    mm = 2.0 * cf.m / cf.gradR
    # 0 = kk (1 - i e G - i g W) + (ll - i mm G)(a0 + i a G + i c W)
    #     - ll (d W^2 + b G^2 + u W G) + kk (e W^2 + f G^2 + v W G)
    c2 = -cf.d * ll + cf.e * kk
    c1 = (-1j * cf.g_diff * kk + 1j * cf.c * (ll - 1j * mm * G)
          - cf.u * ll * G + cf.v * kk * G)
    c0 = (kk * (1.0 - 1j * cf.e * G)
          + (ll - 1j * mm * G) * (cf.a0 + 1j * cf.a * G)
          - ll * cf.b * G * G + kk * cf.f_diff * G * G)
    if c2 == 0:
        if c1 == 0:
            raise DynamicsError("degenerate full dispersion relation")
        return [-c0 / c1]
    return list(np.roots([c2, c1, c0]))


def oscillation_stability(coeffs, G):
    """'damped' when the sign criterion holds, 'diverging' otherwise."""
    cf = coeffs
    crit = cf.l * cf.c / cf.R * (cf.k / cf.K + cf.a0 * cf.l / cf.R) \
        + 4.0 * cf.m ** 2 * cf.c * cf.a0 * G * G / cf.gradR ** 2
    return "damped" if crit > 0 else "diverging"


def integrate_linearized(coeffs, G, horizon, dt, init=1.0 + 0.0j):
    """Explicit RK4 integration of the first-order reduced system.

    State: the capital-variation mode amplitude; the return variation is the
    algebraic slave mode from the first equation row.  Returns
    (times, dK trajectory, dR trajectory) as complex amplitudes.
    """
    cf = coeffs
    omega = dispersion_relation(coeffs, G)
    if dt >= 0.1 / max(abs(omega), 1e-300):
        raise DynamicsError("step size violates dt < 0.1/|Omega|")
    if cf.c == 0.0:
        raise DynamicsError("reduced integrator needs c != 0")
    slave = -(cf.k / cf.K) / (cf.l / cf.R - 2j * cf.m * G / cf.gradR)

    lam = (slave - cf.a0) / cf.c  # yields dx/dt = lam x, lam = i Omega

    n = int(math.ceil(horizon / dt))
    ts = np.arange(n + 1) * dt
    xs = np.empty(n + 1, dtype=complex)
    xs[0] = init
    x = init
    for i in range(n):
        k1 = lam * x
        k2 = lam * (x + 0.5 * dt * k1)
        k3 = lam * (x + 0.5 * dt * k2)
        k4 = lam * (x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs[i + 1] = x
    return ts, xs, slave * xs


def stability_map(state, branches, g_values, expectation=None):
    """(sector, G, Re Omega, Im Omega, label) rows over branches and wavenumbers."""
    rows = []
    for br in branches:
        try:
            cf = variation_coefficients(br.sector, br, state, expectation)
        except (DynamicsError, CapitalError):
            continue
        for G in g_values:
            try:
                om = dispersion_relation(cf, G)
                label = oscillation_stability(cf, G)
            except DynamicsError:
                continue
            rows.append((br.sector, G, om.real, om.imag, label))
    return rows
