"""Collective-state solver.

Computes, for a given model and per-sector average capital, the firm density
and its Lagrange multiplier, the investor attractiveness field A with its
maximum M and relative gap p, the investor density over a capital grid, the
normalization constant C, and the refreshed average capital.  Iterating the
last step to a fixed point is the job of capital.self_consistent_sweep.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import special
from .model import Model, ModelError, grid_derivative
from ._accel import maybe_jit

KHAT_POINTS = 512
KHAT_DECADES = (-4.0, 4.0)


class BackgroundError(RuntimeError):
    pass


@dataclass
class BackgroundState:
    model: Model
    firm_density: np.ndarray          # ||Psi(X)||^2
    avg_capital: np.ndarray           # K_X
    lagrange_D: float
    v0_mask: np.ndarray               # sectors clipped to zero density
    f_field: np.ndarray
    fprime_field: np.ndarray          # grad_X f
    g_field: np.ndarray
    grad_g: np.ndarray
    F_smoothing: np.ndarray           # back-reaction F(Xhat); zeros when off
    A_field: np.ndarray
    M_max: float
    p_field: np.ndarray
    khat_grid: np.ndarray
    investor_density: np.ndarray      # (n_sectors, n_khat), includes C
    C_norm: float
    p_bar: float
    rbar_norm: float
    use_backreaction: bool = False

    @property
    def grid(self):
        return self.model.grid

    def total_firms(self):
        return float(np.sum(self.firm_density) * self.grid.spacing)

    def total_investors(self):
        ksums = np.trapezoid(self.investor_density, self.khat_grid, axis=1)
        return float(np.sum(ksums) * self.grid.spacing)

    def invested_capital_per_sector(self):
        return np.trapezoid(self.investor_density * self.khat_grid[None, :],
                            self.khat_grid, axis=1)

    def khat_second_moment(self):
        dens = np.trapezoid(self.investor_density, self.khat_grid, axis=1)
        mom2 = np.trapezoid(self.investor_density * self.khat_grid[None, :] ** 2,
                            self.khat_grid, axis=1)
        return np.where(dens > 0, mom2 / np.maximum(dens, 1e-300), 0.0)


# ---------------------------------------------------------------------------
# firm density
# ---------------------------------------------------------------------------

def _density_gradient_term(model, K_X):
    """G(X) such that ||Psi||^2 = (D - G) / (2 tau), clipped at zero.

    G = [ (grad R)^2 + sigma_X^2 grad^2 R / H(K) ] H(K)^2 (1 - eta) / (2 sigma_X^2)
    with R evaluated at (K_X(X), X).
    """
    p = model.params
    eta = model.funcs.h_exponent
    R_field = model.eval_R(K_X)
    gradR = grid_derivative(model.grid, R_field, 1)
    lapR = grid_derivative(model.grid, R_field, 2)
    H = model.H_mobility(K_X)
    return (gradR ** 2 + p.sigma_X * lapR / H) * H ** 2 * (1.0 - eta) \
        / (2.0 * p.sigma_X)


def solve_firm_density(model, K_X, tol=1e-10, max_iter=200):
    """Firm density per sector and the multiplier D enforcing the N constraint.

    Returns (density, D, v0_mask); raw negative values are clipped to zero and
    flagged.  D is found by bisection on int ||Psi||^2 dX = N.
    """
    K_X = np.asarray(K_X, dtype=float)
    if np.any(K_X <= 0):
        raise BackgroundError("K_X guess must be positive everywhere")
    p = model.params
    h = model.grid.spacing
    G = _density_gradient_term(model, K_X)

    def total(D):
        return np.sum(np.maximum(0.0, (D - G) / (2.0 * p.tau))) * h

    lo = float(np.min(G))
    hi = float(np.max(G)) + 2.0 * p.tau * p.n_firms / model.grid.length
    if total(hi) < p.n_firms:
        hi = hi + 2.0 * p.tau * p.n_firms / model.grid.length + abs(hi)
    if total(lo) > p.n_firms or total(hi) < p.n_firms:
        raise BackgroundError(
            f"no multiplier D in bracket [{lo:.6g}, {hi:.6g}] satisfies the "
            f"firm-count constraint")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if total(mid) < p.n_firms:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, abs(hi)):
            break
    D = 0.5 * (lo + hi)
    raw = (D - G) / (2.0 * p.tau)
    v0_mask = raw < 0
    density = np.maximum(raw, 0.0)
    # exact rescale of the clipped solution onto the constraint
    scale = p.n_firms / (np.sum(density) * h)
    if abs(scale - 1.0) > 1e-6:
        raise BackgroundError("bisection failed to meet the firm-count constraint")
    return density * scale, D, v0_mask


# ---------------------------------------------------------------------------
# firm capital distribution around K_X
# ---------------------------------------------------------------------------

def firm_capital_distribution(model, j, K_X, k_values, width=None):
    """Unit-normalized density of firm capital around K_X at sector j.

    The location follows the attractiveness-weighted center
    F2(R(K,X)) K_X / F2(R(K_X,X)) and the profile is recentered so its mean
    sits exactly at K_X (capital bookkeeping).
    """
    k_values = np.asarray(k_values, dtype=float)
    kx = float(np.asarray(K_X, dtype=float).reshape(-1)[j]) \
        if np.ndim(K_X) else float(K_X)
    if kx <= 0:
        raise BackgroundError("K_X must be positive")
    if width is None:
        width = math.sqrt(model.params.sigma_K * model.params.epsilon)
    r_prof = model.r_prof()
    f2_at_kx = model.F2(model.eval_R(kx, j, r_prof))

    def raw(k):
        k_pos = np.maximum(k, 1e-12)
        center = model.F2(model.eval_R(k_pos, j, r_prof)) * kx / f2_at_kx
        return np.exp(-((k - center) / width) ** 2)

    # normalize and recenter the mean onto K_X on a wide internal grid
    kk = np.linspace(max(1e-12, kx - 8 * width), kx + 8 * width, 2001)
    rho = raw(kk)
    norm = np.trapezoid(rho, kk)
    mean = np.trapezoid(kk * rho, kk) / norm
    shift = mean - kx
    out = raw(k_values + shift)
    return out / norm


def attractiveness_F2hat(model, K, j, state, n_quad=801):
    """Relative attractiveness F2(R(K,X)) / int F2(R(K',X)) |Psi(K',X)|^2 dK'."""
    kx = state.avg_capital[j]
    width = math.sqrt(model.params.sigma_K * model.params.epsilon)
    kk = np.linspace(max(1e-12, kx - 8 * width), kx + 8 * width, n_quad)
    psi1_sq = firm_capital_distribution(model, j, state.avg_capital, kk)
    r_prof = model.r_prof()
    f2_vals = model.F2(model.eval_R(kk, j, r_prof))
    denom = np.trapezoid(f2_vals * psi1_sq, kk) * state.firm_density[j]
    if denom <= 0:
        raise BackgroundError(f"empty sector {j}: zero attractiveness normalizer")
    return model.F2(model.eval_R(np.asarray(K, dtype=float), j, r_prof)) / denom


# ---------------------------------------------------------------------------
# investor-side fields
# ---------------------------------------------------------------------------

def compute_A_M_p(model, f_field, g_field, grad_g, F_smoothing):
    """A(Xhat), its maximum M, and the relative gap p = (M - A)/|f|."""
    p = model.params
    f = np.asarray(f_field, dtype=float)
    if np.any(f == 0.0) or np.any(~np.isfinite(f)):
        bad = np.nonzero((f == 0.0) | ~np.isfinite(f))[0]
        raise BackgroundError(f"singular short-term return at sectors {bad}")
    A = (g_field ** 2 / p.sigma_Xhat + f + 0.5 * np.abs(f) + grad_g
         - p.sigma_Khat * F_smoothing ** 2 / (2.0 * f ** 2))
    M = float(np.max(A))
    p_field = (M - A) / np.abs(f)
    return A, M, p_field


def _khat_scale(model, f_field):
    p = model.params
    fabs = np.abs(f_field)
    ref = float(np.median(fabs))
    if ref <= 0:
        ref = float(np.max(fabs))
    return math.sqrt(p.sigma_Khat / max(ref, 1e-12))


def make_khat_grid(model, f_field):
    scale = _khat_scale(model, f_field)
    return np.logspace(KHAT_DECADES[0], KHAT_DECADES[1], KHAT_POINTS) * scale


def investor_density_row(model, j, f_field, fprime_field, p_field, F_smoothing,
                         khat_grid, C=1.0):
    """|Psi_hat(Khat, Xhat_j)|^2 on the investor capital grid (one sector)."""
    p = model.params
    f = f_field[j]
    fabs = abs(f)
    p_ord = float(np.clip(p_field[j], -special.P_MAX, special.P_MAX))
    shift = p.sigma_Khat * F_smoothing[j] / f ** 2
    z = np.sqrt(fabs / p.sigma_Khat) * (khat_grid + shift)
    quart = np.exp(-p.sigma_X * khat_grid ** 4 * fprime_field[j] ** 2
                   / (96.0 * p.sigma_Khat * fabs))
    dsq = np.zeros_like(z)
    inside = np.abs(z) <= 38.0
    if np.any(inside):
        dsq[inside] = special.parabolic_cylinder_D_grid(p_ord, z[inside]) ** 2
    return C * quart * dsq


def investor_density(model, khat, j, state):
    """Density of investors with capital Khat in sector j (uses state C)."""
    khat = np.asarray(khat, dtype=float)
    row = investor_density_row(
        model, j, state.f_field, state.fprime_field, state.p_field,
        state.F_smoothing, khat, C=state.C_norm)
    return row


def normalization_C(model, f_field, fprime_field, p_field, F_smoothing,
                    khat_grid):
    """C such that the investor density integrates to N_investors."""
    n = model.grid.n_points
    rows = np.empty((n, khat_grid.shape[0]))
    for j in range(n):
        rows[j] = investor_density_row(
            model, j, f_field, fprime_field, p_field, F_smoothing, khat_grid)
    total = float(np.sum(np.trapezoid(rows, khat_grid, axis=1))
                  * model.grid.spacing)
    if not np.isfinite(total) or total <= 0:
        raise BackgroundError("divergent or empty investor-density integral")
    C = model.params.n_investors / total
    return C, rows * C


def normalization_C_closed_form(model, state):
    """Saddle-point estimate of C (documented closed form).

    Uses the Gamma/digamma combination at p_bar and the reduced volume V_r
    counted as grid cells with A within 1e-6 of M.  Kept as a cross-check;
    the solver normalizes C by direct quadrature.
    """
    p = model.params
    pbar = state.p_bar
    cells = np.sum(np.abs(state.A_field - state.M_max) <= 1e-6 * max(1.0, abs(state.M_max)))
    v_r = max(int(cells), 1) * model.grid.spacing
    f_mean = float(np.mean(np.abs(state.f_field)))
    j0 = int(np.argmax(state.A_field))
    f0 = abs(state.f_field[j0])
    expo = math.exp(-p.sigma_X * p.sigma_Khat
                    * ((pbar + 0.5) * state.fprime_field[j0] / f0) ** 2
                    / (96.0 * f0))
    if abs(pbar - round(pbar)) < 1e-9 and round(pbar) >= 0:
        # pole of the Gamma/digamma pair: use the analytic limit via the
        # half-line norm integral
        ratio = special.SQRT_PI / 2.0 ** 1.5 / special.dp_norm_integral(pbar)
    else:
        ratio = special.gamma(-pbar) / (
            special.digamma((1.0 - pbar) / 2.0) - special.digamma(-pbar / 2.0))
    if not np.isfinite(ratio):
        raise BackgroundError(f"divergent Gamma combination at p_bar={pbar}")
    return expo * p.n_investors * math.sqrt(f_mean / p.sigma_Khat) * ratio / v_r


# ---------------------------------------------------------------------------
# back-reaction field
# ---------------------------------------------------------------------------

def backreaction_field(model, K_X, f_field, g_field, grad_g, firm_density,
                       inv_density_per_sector, khat_mom2, rbar_norm):
    """F(Xhat): sensitivity of the collective state to local capital moves.

    Uses the parametric forms dg/dK = alpha g / K and the analytic df/dK.
    """
    p = model.params
    alpha = model.funcs.cobb_alpha
    K_X = np.asarray(K_X, dtype=float)
    dg_dk = alpha * g_field / K_X
    dgradg_dk = alpha * grad_g / K_X
    rbar = model.eval_R(K_X) / rbar_norm
    df_dk = (model.marginal_r(K_X) * (alpha - 1.0) / K_X
             + model.F1_prime(rbar) * rbar * alpha / K_X) / p.epsilon
    term1 = (g_field * dg_dk / p.sigma_Xhat + 0.5 * dgradg_dk + df_dk) \
        * inv_density_per_sector / np.maximum(firm_density, 1e-12)
    term2 = khat_mom2 * 2.0 * f_field * df_dk \
        / (p.sigma_Khat * np.maximum(firm_density, 1e-12))
    return term1 + term2


# ---------------------------------------------------------------------------
# closed-form density examples
# ---------------------------------------------------------------------------

def closed_form_density_example(model, variant, K_X, khat_mean=None):
    """Closed-form firm densities for the two special mobility families.

    variant="ratio_H": H(y) = (y/(1+y))^varsigma with varsigma ~ 1/2 and
    <Khat> ||Psi||^2 << Khat_X; variant="linear_H": H(y) = y.
    Both solve the quadratic density relation; validity violations raise.
    """
    p = model.params
    grid = model.grid
    K_X = np.asarray(K_X, dtype=float)
    R_field = model.eval_R(K_X)
    gradR_sq = grid_derivative(grid, R_field, 1) ** 2

    if variant == "ratio_H":
        if khat_mean is None:
            khat_mean = float(np.mean(K_X) * p.n_firms / p.n_investors)
        khat_x = K_X  # total invested per firm ~ K_X * ||Psi||^2 / ||Psi||^2
        w = khat_x / khat_mean

        def density_of(D):
            disc = (D - p.tau * w) ** 2 \
                - 4.0 * p.tau * w * (gradR_sq / p.sigma_X - D)
            if np.any(disc < 0):
                raise BackgroundError("discriminant negative: outside the "
                                      "ratio_H validity window")
            return np.maximum(
                ((D - p.tau * w) + np.sqrt(disc)) / (2.0 * p.tau), 0.0)
    elif variant == "linear_H":
        def density_of(D):
            disc = D ** 2 - 4.0 * p.tau * gradR_sq * K_X / p.sigma_X
            if np.any(disc < 0):
                raise BackgroundError("discriminant negative: outside the "
                                      "linear_H validity window")
            return (D + np.sqrt(disc)) / (2.0 * p.tau)
    else:
        raise BackgroundError(f"unknown closed-form variant {variant!r}")

    h = grid.spacing

    def total(D):
        return np.sum(density_of(D)) * h

    lo = 2.0 * math.sqrt(max(float(np.max(p.tau * gradR_sq * K_X / p.sigma_X)), 0.0)) \
        if variant == "linear_H" else 0.0
    hi = lo + 2.0 * p.tau * p.n_firms / grid.length \
        + float(np.max(gradR_sq)) / p.sigma_X + 1.0
    for _ in range(60):
        if total(hi) >= p.n_firms:
            break
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        try:
            t = total(mid)
        except BackgroundError:
            lo = mid
            continue
        if t < p.n_firms:
            lo = mid
        else:
            hi = mid
    return density_of(0.5 * (lo + hi))


# ---------------------------------------------------------------------------
# assembling the state
# ---------------------------------------------------------------------------

def compute_state(model, K_X, use_backreaction=False, prev_state=None):
    """One full background evaluation at fixed average capital K_X."""
    K_X = np.asarray(K_X, dtype=float)
    density, D, v0 = solve_firm_density(model, K_X)
    rbar_norm = model.rbar_normalizer(K_X, density)
    f_field = model.short_term_return_f(K_X, density, rbar_norm)
    g_field = model.mobility_g(K_X, density, rbar_norm)
    grad_g = grid_derivative(model.grid, g_field, 1)
    fprime = grid_derivative(model.grid, f_field, 1)

    if use_backreaction and prev_state is not None:
        inv_per_sector = np.trapezoid(prev_state.investor_density,
                                      prev_state.khat_grid, axis=1)
        F = backreaction_field(model, K_X, f_field, g_field, grad_g, density,
                               inv_per_sector, prev_state.khat_second_moment(),
                               rbar_norm)
    else:
        F = np.zeros_like(f_field)

    A, M, p_field = compute_A_M_p(model, f_field, g_field, grad_g, F)
    khat_grid = make_khat_grid(model, f_field)
    C, rows = normalization_C(model, f_field, fprime, p_field, F, khat_grid)
    p_bar = float(p_field[int(np.argmax(A))])

    return BackgroundState(
        model=model, firm_density=density, avg_capital=K_X.copy(),
        lagrange_D=D, v0_mask=v0, f_field=f_field, fprime_field=fprime,
        g_field=g_field, grad_g=grad_g, F_smoothing=F, A_field=A, M_max=M,
        p_field=p_field, khat_grid=khat_grid, investor_density=rows,
        C_norm=C, p_bar=p_bar, rbar_norm=rbar_norm,
        use_backreaction=use_backreaction)


def implied_avg_capital(state):
    """K_X implied by the investor density: int Khat |Psi_hat|^2 dKhat / ||Psi||^2."""
    invested = state.invested_capital_per_sector()
    return invested / np.maximum(state.firm_density, 1e-12)
