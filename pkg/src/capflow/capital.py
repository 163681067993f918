"""Average-capital equation: root enumeration, stability, sensitivities.

The equation per sector is

    K ||Psi(X)||^2 |f(X)| = C sigma_Khat^2 GammaHat(p + 1/2)

with ||Psi||^2, f and p re-evaluated at the trial K while the neighbouring
sectors keep their current state (frozen-neighbour scan).  The outer
self-consistent sweep updates all sectors with damping and hysteresis.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import special
from .background import BackgroundError, compute_state, implied_avg_capital
from .model import grid_derivative

SCAN_LO = 1e-4
SCAN_HI = 1e6
SCAN_POINTS = 400

K_FLOOR = 1e-8


class CapitalError(RuntimeError):
    pass


@dataclass
class CapitalBranch:
    sector: int
    K_value: float
    residual: float
    B_factor: float
    stability: str            # "stable" | "unstable"
    regime: str
    p_value: float
    f_value: float
    kind: str = "crossing"    # "crossing" (sign change of the analytic
    #                           residual) or "tangency" (fixed point at the
    #                           p-floor kink, refined on the bookkeeping form)


# ---------------------------------------------------------------------------
# GammaHat
# ---------------------------------------------------------------------------

GAMMA_HAT_ASYM_SWITCH = 5.0
_ASYM_CONST = math.sqrt(8.0 / math.pi)


def gamma_hat_bracket(p):
    """The half-line first moment of D_p^2; asymptotic form beyond p = 5."""
    if p > GAMMA_HAT_ASYM_SWITCH:
        return _ASYM_CONST * math.gamma(p + 1.5)
    return special.dp_first_moment(p)


def gamma_hat(model, p, f_value, fprime_value):
    """GammaHat(p + 1/2): damped first moment entering the capital equation."""
    pr = model.params
    fabs = abs(f_value)
    if fabs <= 0:
        raise CapitalError("gamma_hat at singular f = 0")
    expo = math.exp(-pr.sigma_X * pr.sigma_Khat * (p + 0.5) ** 2
                    * fprime_value ** 2 / (96.0 * fabs ** 3))
    return expo * gamma_hat_bracket(p)


# ---------------------------------------------------------------------------
# frozen-neighbour local re-evaluation
# ---------------------------------------------------------------------------

class _LocalEval:
    """Re-evaluates sector-j quantities at a trial capital K.

    All other sectors keep the reference state's average capital, but the
    stencil quantities (gradients of R, f and the mobility fields) see the
    local replacement.
    """

    def __init__(self, state, j, coupling="tau_plain"):
        self.state = state
        self.model = state.model
        self.j = j
        self.coupling = coupling
        m = self.model
        self.r_prof = m.r_prof()
        self.b_prof = m.b_prof()
        n = m.grid.n_points
        self.n = n
        self.h = m.grid.spacing
        self.idx = lambda i: i % n if m.grid.boundary == "periodic" else min(max(i, 0), n - 1)
        # frozen fields
        self.K_ref = state.avg_capital
        self.f_ref = state.f_field
        self.A_ref = state.A_field
        self.dens_ref = state.firm_density
        self.F_ref = state.F_smoothing
        self.rbar_norm = state.rbar_norm
        # max of A over the other sectors
        mask = np.ones(n, dtype=bool)
        mask[j] = False
        self.M_others = float(np.max(state.A_field[mask]))

    def _prepare_reference(self):
        m = self.model
        j = self.j
        R_ref = self.r_prof * self.K_ref ** m.funcs.cobb_alpha
        self.gradR_ref = grid_derivative(m.grid, R_ref, 1)[j]
        self.lapR_ref = grid_derivative(m.grid, R_ref, 2)[j]
        self.g_ref = self.state.g_field[j]
        self.gradg_ref = self.state.grad_g[j]

    def fields_at(self, K):
        """(density_j, f_j, fprime_j, g_j, grad_g_j, A_j, p_j) at trial K.

        Neighbouring sectors are frozen; the local gradient fields scale with
        the local return level K^alpha, following the parametric forms
        g ~ grad_X R * K^alpha and ||Psi||^2 = D - L(X) (grad R)^2 K^eta.
        """
        m = self.model
        pr = m.params
        j = self.j
        if not hasattr(self, "gradR_ref"):
            self._prepare_reference()
        alpha = m.funcs.cobb_alpha
        eta = m.funcs.h_exponent
        ratio = (K / self.K_ref[j]) ** alpha
        gradR = self.gradR_ref * ratio
        lapR = self.lapR_ref * ratio
        H = K ** eta
        G_j = (gradR ** 2 + pr.sigma_X * lapR / H) * H ** 2 * (1.0 - eta) \
            / (2.0 * pr.sigma_X)
        if self.coupling == "tau_plain":
            tau_eff = pr.tau
        else:
            tau_eff = pr.tau * self.K_ref[j] / K
        dens_j = max(0.0, (self.state.lagrange_D - G_j) / (2.0 * tau_eff))

        R_loc = self.r_prof[j] * K ** alpha
        rbar = R_loc / self.rbar_norm
        f_j = (alpha * self.b_prof[j] * K ** (alpha - 1.0)
               - pr.gamma_c * dens_j + float(m.F1(rbar))) / pr.epsilon

        g_j = self.g_ref * ratio
        grad_g_j = self.gradg_ref * ratio
        # f-gradient across the sector: neighbours keep their reference f
        f_up = self.f_ref[self.idx(j + 1)]
        f_dn = self.f_ref[self.idx(j - 1)]
        fprime_j = (f_up - f_dn) / (2.0 * self.h)

        if f_j == 0.0:
            raise CapitalError(f"singular f = 0 at sector {j} during scan")
        A_j = (g_j ** 2 / pr.sigma_Xhat + f_j + 0.5 * abs(f_j) + grad_g_j
               - pr.sigma_Khat * self.F_ref[j] ** 2 / (2.0 * f_j ** 2))
        M = max(self.M_others, A_j)
        p_j = (M - A_j) / abs(f_j)
        p_j = min(p_j, special.P_MAX)
        return dens_j, f_j, fprime_j, g_j, grad_g_j, A_j, p_j

    def residual(self, K):
        dens_j, f_j, fprime_j, _, _, _, p_j = self.fields_at(K)
        gh = gamma_hat(self.model, p_j, f_j, fprime_j)
        rhs = self.state.C_norm * self.model.params.sigma_Khat * gh
        return K * dens_j * abs(f_j) - rhs

    def residual_quadrature(self, K):
        """Capital identity with the invested side by direct quadrature.

        K ||Psi||^2 - int Khat |Psi_hat|^2 dKhat, using the unapproximated
        quartic damping; the sweep converges on this form so the capital
        bookkeeping identity holds exactly at the fixed point.
        """
        from .background import investor_density_row
        dens_j, f_j, fprime_j, _, _, _, p_j = self.fields_at(K)
        khat = self.state.khat_grid
        row = investor_density_row(
            self.model, 0,
            np.array([f_j]), np.array([fprime_j]), np.array([p_j]),
            np.array([self.F_ref[self.j]]), khat, C=self.state.C_norm)
        invested = np.trapezoid(row * khat, khat)
        return K * dens_j - invested

    def log_parts(self, K):
        """(ln GammaHat, ln |f|, ln density) at trial K, for derivatives."""
        dens_j, f_j, fprime_j, _, _, _, p_j = self.fields_at(K)
        gh = gamma_hat(self.model, p_j, f_j, fprime_j)
        if dens_j <= 0:
            raise CapitalError("empty sector during derivative evaluation")
        if gh <= 0.0 or abs(f_j) <= 0.0:
            raise CapitalError("underflowing factor during derivative "
                               "evaluation")
        return math.log(gh), math.log(abs(f_j)), math.log(dens_j), p_j, f_j


def capital_residual(K, j, state, coupling="tau_plain"):
    """Residual of the average-capital equation at trial K, sector j."""
    if K <= 0:
        raise CapitalError("capital_residual requires K > 0")
    return _LocalEval(state, j, coupling).residual(K)


def global_variant_residual(K, j, state, coupling="tau_plain"):
    """Per-sector relaxed-constraint residual (no relative-gap coupling)."""
    ev = _LocalEval(state, j, coupling)
    dens_j, f_j, fprime_j, _, _, _, _ = ev.fields_at(K)
    pr = state.model.params
    expo = math.exp(-pr.sigma_X * pr.sigma_Khat * fprime_j ** 2
                    / (384.0 * abs(f_j) ** 3))
    return K * dens_j * abs(f_j) - state.C_norm * pr.sigma_Khat * expo


# ---------------------------------------------------------------------------
# branch enumeration
# ---------------------------------------------------------------------------

def _regime_tag(K, f_value, stability):
    if K < 0.5:
        return "small" if f_value > 0 else "none"
    if K < 50.0:
        return "intermediate"
    if K < 1e3:
        return "large"
    return "very_large_stable" if stability == "stable" else "very_large_unstable"


def solve_branches(j, state, coupling="tau_plain", scan_lo=SCAN_LO,
                   scan_hi=SCAN_HI, scan_points=SCAN_POINTS,
                   residual_fn=None, classify=True):
    """All sign-change roots of the capital residual at sector j."""
    ev = _LocalEval(state, j, coupling)
    res = ev.residual if residual_fn is None else (lambda K: residual_fn(K, j, state, coupling))
    ks = np.logspace(math.log10(scan_lo), math.log10(scan_hi), scan_points)
    # refine around the zero of f(K): the residual dips over a window that
    # can be narrower than the log-scan spacing
    f_sign = []
    probe = np.logspace(math.log10(scan_lo), math.log10(scan_hi), 60)
    for k in probe:
        try:
            f_sign.append(math.copysign(1.0, ev.fields_at(k)[1]))
        except (CapitalError, BackgroundError):
            f_sign.append(0.0)
    extras = []
    for i in range(len(probe) - 1):
        if f_sign[i] * f_sign[i + 1] < 0:
            lo, hi = probe[i], probe[i + 1]
            for _ in range(80):
                mid = math.sqrt(lo * hi)
                try:
                    fm = ev.fields_at(mid)[1]
                except (CapitalError, BackgroundError):
                    break
                if math.copysign(1.0, fm) == f_sign[i]:
                    lo = mid
                else:
                    hi = mid
            k0 = math.sqrt(lo * hi)
            extras.append(np.geomspace(k0 * 0.7, k0 * 1.43, 80))
    if extras:
        ks = np.unique(np.concatenate([ks] + extras))
    vals = np.empty_like(ks)
    for i, k in enumerate(ks):
        try:
            vals[i] = res(k)
        except (CapitalError, BackgroundError, special.SpecialFunctionError):
            vals[i] = np.nan
    scale = state.C_norm * state.model.params.sigma_Khat
    candidates = []
    for i in range(len(ks) - 1):
        a, b = vals[i], vals[i + 1]
        if not (np.isfinite(a) and np.isfinite(b)) or a * b > 0 or (a == 0 and b == 0):
            continue
        lo, hi = ks[i], ks[i + 1]
        flo = a
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            fm = res(mid)
            if not np.isfinite(fm):
                break
            if flo * fm <= 0:
                hi = mid
            else:
                lo, flo = mid, fm
            if hi - lo <= 1e-12 * hi:
                break
        candidates.append(math.sqrt(lo * hi))
    # tangency fixed points: a self-consistent equilibrium can touch zero at
    # the p-floor kink without any sign change.  Those are refined on the
    # bookkeeping-exact residual (the analytic Gamma combination sits a
    # quadrature-offset away at such points).
    if residual_fn is None:
        resq = ev.residual_quadrature
        for i in range(1, len(ks) - 1):
            a, b, c = vals[i - 1], vals[i], vals[i + 1]
            if not (np.isfinite(a) and np.isfinite(b) and np.isfinite(c)):
                continue
            is_max = b >= a and b >= c and b < 0
            is_min = b <= a and b <= c and b > 0
            if not (is_max or is_min):
                continue
            sign = 1.0 if is_max else -1.0
            lo, hi = ks[i - 1], ks[i + 1]
            try:
                for _ in range(140):
                    m1 = lo * (hi / lo) ** (1.0 / 3.0)
                    m2 = lo * (hi / lo) ** (2.0 / 3.0)
                    if sign * resq(m1) >= sign * resq(m2):
                        hi = m2
                    else:
                        lo = m1
                    if hi - lo <= 1e-13 * hi:
                        break
                k_ext = math.sqrt(lo * hi)
                # the bookkeeping form may cross zero where the analytic form
                # only grazes it: bisect onto the actual crossing if present
                r_ext = resq(k_ext)
                for lo2, hi2 in ((ks[i - 1], k_ext), (k_ext, ks[i + 1])):
                    r_lo, r_hi = resq(lo2), resq(hi2)
                    if r_lo * r_hi < 0:
                        for _ in range(200):
                            mid = math.sqrt(lo2 * hi2)
                            fm = resq(mid)
                            if r_lo * fm <= 0:
                                hi2 = mid
                            else:
                                lo2, r_lo = mid, fm
                            if hi2 - lo2 <= 1e-13 * hi2:
                                break
                        k_ext = math.sqrt(lo2 * hi2)
                        break
            except (CapitalError, BackgroundError,
                    special.SpecialFunctionError):
                continue
            candidates.append((k_ext, "tangency"))
    branches = []
    for k_root, kind in sorted(
            [(k, "crossing") for k in candidates
             if not isinstance(k, tuple)]
            + [k for k in candidates if isinstance(k, tuple)]):
        try:
            if kind == "crossing":
                r_root = res(k_root)
                ok = abs(r_root) <= 1e-8 * scale * max(
                    1.0, gamma_hat_bracket(
                        min(ev.fields_at(k_root)[6], special.P_MAX)))
            else:
                dens_r = ev.fields_at(k_root)[0]
                r_root = ev.residual_quadrature(k_root)
                ok = abs(r_root) <= 1e-8 * max(k_root * dens_r, 1e-30)
        except (CapitalError, BackgroundError, special.SpecialFunctionError):
            continue
        if not ok:
            continue
        _, f_j, _, _, _, _, p_j = ev.fields_at(k_root)
        if branches and abs(k_root - branches[-1].K_value) <= 1e-6 * k_root:
            continue
        if classify:
            try:
                B, label = stability_classify_value(k_root, ev)
            except (CapitalError, BackgroundError, special.SpecialFunctionError):
                B, label = math.inf, "unstable"
        else:
            B, label = math.nan, "unstable"
        branches.append(CapitalBranch(
            sector=j, K_value=k_root, residual=r_root, B_factor=B,
            stability=label, regime=_regime_tag(k_root, f_j, label),
            p_value=p_j, f_value=f_j, kind=kind))
    return branches


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------

def k_of_p(model, p, f_value, fprime_value, dp=1e-4):
    """k(p) = d ln GammaHat / dp: finite difference below p = 2, asymptotic above."""
    pr = model.params
    if p > 2.0:
        corr = pr.sigma_X * pr.sigma_Khat * (p + 0.5) * fprime_value ** 2 \
            / (48.0 * abs(f_value) ** 3)
        return math.sqrt(max(p - 0.5, 0.0) / 2.0) - corr
    step = dp * max(1.0, abs(p))
    hi = math.log(gamma_hat(model, p + step, f_value, fprime_value))
    lo = math.log(gamma_hat(model, p - step, f_value, fprime_value))
    return (hi - lo) / (2.0 * step)


def stability_classify_value(K, ev, rel_step=1e-5, simplified=False):
    """Fixed-point multiplier B at the root K and the stability label.

    B = K d/dK [ln GammaHat(p(K)) - ln |f(K)| - ln ||Psi(K)||^2], evaluated by
    central differences; |B| < 1 means the capital-equation iteration map is
    a contraction (stable).  With ``simplified`` the main-text form with an
    unweighted d ln f / dK is used instead.
    """
    h = rel_step * K
    up = ev.log_parts(K + h)
    dn = ev.log_parts(K - h)
    if not simplified:
        dlng = (up[0] - dn[0]) / (2.0 * h)
        dlnf = (up[1] - dn[1]) / (2.0 * h)
        dlnpsi = (up[2] - dn[2]) / (2.0 * h)
        B = K * (dlng - dlnf - dlnpsi)
    else:
        mid = ev.log_parts(K)
        p_mid, f_mid = mid[3], mid[4]
        j = ev.j
        fprime = (ev.f_ref[ev.idx(j + 1)] - ev.f_ref[ev.idx(j - 1)]) / (2.0 * ev.h)
        kp = k_of_p(ev.model, p_mid, f_mid, fprime)
        dp_dk = (up[3] - dn[3]) / (2.0 * h)
        dlnf = (up[1] - dn[1]) / (2.0 * h)
        dlnpsi = (up[2] - dn[2]) / (2.0 * h)
        # l-term: K-derivative of the exponential damping in GammaHat
        pr = ev.model.params
        l_term = _l_coefficient(ev, K, p_mid, f_mid, fprime, dp_dk)
        B = (kp * dp_dk - (dlnf + dlnpsi + l_term)) * K
    label = "stable" if abs(B) < 1.0 else "unstable"
    return float(B), label


def _l_coefficient(ev, K, p, f_value, fprime, dp_dk, rel_step=1e-5):
    pr = ev.model.params
    h = rel_step * K
    up = ev.fields_at(K + h)
    dn = ev.fields_at(K - h)
    dfp2_dk = (up[2] ** 2 - dn[2] ** 2) / (2.0 * h)
    dfabs_dk = (abs(up[1]) - abs(dn[1])) / (2.0 * h)
    fabs = abs(f_value)
    t1 = pr.sigma_X * pr.sigma_Khat * (dfp2_dk * fabs - 3.0 * dfabs_dk * fprime ** 2) \
        * (p + 0.5) ** 2 / (120.0 * fabs ** 4)
    t2 = dp_dk * pr.sigma_X * pr.sigma_Khat * (p + 0.5) * fprime ** 2 \
        / (48.0 * fabs ** 3)
    return t1 + t2


def stability_classify(branch, state, coupling="tau_plain", simplified=False):
    ev = _LocalEval(state, branch.sector, coupling)
    return stability_classify_value(branch.K_value, ev, simplified=simplified)


def iterate_map_verdict(branch, state, coupling="tau_plain", steps=50,
                        perturbation=0.01, blowup=10.0):
    """Empirical stability: iterate K <- RHS(K)/(||Psi|| |f|) from a 1% kick."""
    ev = _LocalEval(state, branch.sector, coupling)
    K0 = branch.K_value
    K = K0 * (1.0 + perturbation)
    scale = state.C_norm * state.model.params.sigma_Khat
    for _ in range(steps):
        try:
            dens_j, f_j, fprime_j, _, _, _, p_j = ev.fields_at(K)
            gh = gamma_hat(state.model, p_j, f_j, fprime_j)
        except (CapitalError, special.SpecialFunctionError):
            return "unstable"
        denom = dens_j * abs(f_j)
        if denom <= 0:
            return "unstable"
        K_next = scale * gh / denom
        K = K_next
        if not np.isfinite(K) or K <= 0:
            return "unstable"
        if abs(K - K0) > blowup * perturbation * K0:
            return "unstable"
    return "stable" if abs(K - K0) <= perturbation * K0 else "unstable"


# ---------------------------------------------------------------------------
# sensitivities
# ---------------------------------------------------------------------------

def sensitivity(branch, which, state, coupling="tau_plain", rel_step=1e-4):
    """delta K / delta Y at the branch, from the closed-form fixed point.

    which = "p": analytic k(p) K / (f D) with D = 1 - B.
    which = "f_param": multiplicative shift of f.
    which = "R": additive shift of the local long-term return profile.
    which = "generic": returns the denominator D for external use.
    """
    ev = _LocalEval(state, branch.sector, coupling)
    B, _ = stability_classify_value(branch.K_value, ev)
    D = 1.0 - B
    if abs(D) < 1e-12:
        raise CapitalError("degenerate sensitivity denominator (|B| = 1)")
    K = branch.K_value
    if which == "generic":
        return D
    mid = ev.log_parts(K)
    p_mid, f_mid = mid[3], mid[4]
    j = ev.j
    fprime = (ev.f_ref[ev.idx(j + 1)] - ev.f_ref[ev.idx(j - 1)]) / (2.0 * ev.h)
    if which == "p":
        kp = k_of_p(state.model, p_mid, f_mid, fprime)
        return K * kp / (f_mid * D)
    if which == "f_param":
        # d ln K / d ln f at fixed everything else, from the expanded form
        kp = k_of_p(state.model, p_mid, f_mid, fprime)
        heav = 1.0 if f_mid > 0 else 0.0
        pr = state.model.params
        fabs = abs(f_mid)
        m_y = -(pr.sigma_X * pr.sigma_Khat * (p_mid + 0.5) ** 2 * fprime ** 2
                / (120.0 * fabs ** 3)) \
            - pr.sigma_X * pr.sigma_Khat * p_mid * (p_mid + 0.5) * fprime ** 2 \
            / (48.0 * fabs ** 3)
        return -K * (m_y + 1.0 + (p_mid + heav + 0.5) * kp) / D
    if which == "R":
        # finite difference of the map under a local profile shift
        delta = rel_step * max(1.0, abs(ev.r_prof[j]))
        ev.r_prof = ev.r_prof.copy()
        ev.r_prof[j] += delta
        up = ev.log_parts(K)
        ev.r_prof[j] -= 2 * delta
        dn = ev.log_parts(K)
        ev.r_prof[j] += delta
        dln = ((up[0] - up[1] - up[2]) - (dn[0] - dn[1] - dn[2])) / (2.0 * delta)
        return K * dln / D
    raise CapitalError(f"unknown sensitivity target {which!r}")


# ---------------------------------------------------------------------------
# closed-form regimes
# ---------------------------------------------------------------------------

def _regime_constants(state, j):
    m = state.model
    pr = m.params
    alpha = m.funcs.cobb_alpha
    K_X = state.avg_capital
    k_alpha_mean = float(np.mean(K_X ** alpha))
    r_mean = float(np.mean(m.r_prof()))
    b1 = alpha * m.b_prof()[j] / pr.epsilon
    b2_field = (m.funcs.f1_scale * m.r_prof() / (k_alpha_mean * r_mean)) / pr.epsilon
    b2 = b2_field[j]
    b2_prime = grid_derivative(m.grid, b2_field, 1)[j]
    c_const = m.funcs.f1_scale * math.pi / (2.0 * pr.epsilon)
    d_const = m.funcs.f1_scale * k_alpha_mean * r_mean / pr.epsilon
    d_eff = state.lagrange_D / (2.0 * pr.tau)
    return b1, b2, b2_prime, c_const, d_const, d_eff


def regime_closed_form(regime, j, state):
    """Closed-form K for the named accumulation regime at sector j.

    Raises CapitalError when the regime's validity window does not hold.
    """
    m = state.model
    pr = m.params
    alpha = m.funcs.cobb_alpha
    C = state.C_norm
    b1, b2, b2p, c_const, d_const, d_eff = _regime_constants(state, j)
    R_field = m.eval_R(state.avg_capital)
    gradR = grid_derivative(m.grid, R_field, 1)[j]
    lapR = grid_derivative(m.grid, R_field, 2)[j]
    g_j = state.g_field[j]
    grad_g_j = state.grad_g[j]
    M = state.M_max

    if regime == "small":
        # dividend-driven: f ~ B1 K^(alpha-1) -> +inf, so the sector ties the
        # attractiveness maximum and the gap parameter sits at its floor
        # p -> 0 (the continued limit p -> -3/2 is unreachable with a global
        # maximum constraint); first-order correction in the residual gap.
        p_lim = 0.0
        base = C * pr.sigma_Khat * special.dp_first_moment(p_lim) \
            / (d_eff * b1)
        if base <= 0:
            raise CapitalError("small regime invalid: non-positive base")
        K0 = base ** (1.0 / alpha)
        f0 = b1 * K0 ** (alpha - 1.0)
        if f0 <= 1.0:
            raise CapitalError("small regime invalid: f not >> 1")
        dp = 1e-5
        ghp = (special.dp_first_moment(p_lim + dp)
               - special.dp_first_moment(p_lim)) / dp
        delta_p = max(0.0, (M - (g_j ** 2 / pr.sigma_Xhat + grad_g_j
                                 + 1.5 * f0)) / f0)
        return K0 * (1.0 + ghp / special.dp_first_moment(p_lim)
                     * delta_p / alpha)

    if regime == "intermediate":
        pbar = state.p_field[j]
        log_term = math.log(pbar + 0.5) - 1.0 if pbar + 0.5 > 0 else -math.inf
        if log_term <= 0:
            raise CapitalError("intermediate regime invalid: needs p > e - 1/2")
        if abs(b2p) < 1e-300:
            raise CapitalError("intermediate regime invalid: flat B2")
        inner = 3.0 * pr.sigma_Khat * abs(b2) / (pr.sigma_X * b2p ** 2) * log_term
        lead = (8.0 * C / d_eff * math.sqrt(inner)) ** (2.0 * alpha / (1.0 + alpha))
        w_arg = -(48.0 * alpha / (1.0 + alpha)) \
            * (math.sqrt(3.0 * pr.sigma_Khat / pr.sigma_X) * 8.0 * C / d_eff) \
            ** (2.0 * alpha / (1.0 + alpha)) \
            * abs(b2) ** (3.0 + alpha / (1.0 + alpha)) \
            / (pr.sigma_X * pr.sigma_Khat * b2p ** (2.0 + 2.0 * alpha / (1.0 + alpha))) \
            * log_term ** (2.0 + alpha / (1.0 + alpha))
        if w_arg < -1.0 / math.e:
            raise CapitalError("intermediate regime invalid: Lambert-W domain")
        k_alpha = lead * math.exp(-special.lambert_w(special.PRINCIPAL, w_arg))
        return k_alpha ** (1.0 / alpha)

    if regime == "accumulation":
        # Lambert-W solution at the attractiveness maximum (p = 0)
        q = C * pr.sigma_Khat / (d_eff * b2)
        if q <= 0:
            raise CapitalError("accumulation point invalid: non-positive scale")
        a_damp = pr.sigma_X * pr.sigma_Khat * b2p ** 2 / (384.0 * b2 ** 3)
        kappa = alpha / (1.0 + alpha)
        w_arg = -a_damp * kappa * q ** (-kappa)
        if w_arg < -1.0 / math.e:
            raise CapitalError("accumulation point invalid: Lambert-W domain")
        k_alpha = q ** kappa * math.exp(
            special.lambert_w(special.PRINCIPAL, w_arg))
        return k_alpha ** (1.0 / alpha)

    if regime == "large":
        f_j = state.f_field[j]
        if f_j <= 0:
            raise CapitalError("large regime invalid: f <= 0")
        lead = C * pr.sigma_Khat * special.gamma(M / c_const) / (d_eff * f_j)
        if lead <= 1.0:
            raise CapitalError("large regime invalid: leading term not > 1")
        corr = d_const / (f_j * R_field[j]) * (
            1.0 + M * special.digamma(M / c_const) * (1.0 + lapR / M))
        return (lead + corr) ** (1.0 / alpha)

    if regime == "very_large_stable":
        # saturated price response f -> c with sloping returns: the root sits
        # where competition depletes the sector, ||Psi||^2 -> 0.  Leading
        # order K^(2 alpha + 2 eta) = 2 sigma_X D K_ref^(2 alpha)
        #                             / ((grad R)^2 (1 - eta)),
        # minus the first-order occupation correction.
        eta = m.funcs.h_exponent
        if gradR ** 2 <= 0:
            raise CapitalError("very_large_stable invalid: flat returns")
        k_ref = state.avg_capital[j]
        c_sat = (m.funcs.f1_scale * math.pi / 2.0) / pr.epsilon
        lam = gradR ** 2 * (1.0 - eta) / (2.0 * pr.sigma_X * k_ref ** (2.0 * alpha))
        power = 2.0 * alpha + 2.0 * eta
        k_lead = (state.lagrange_D / lam) ** (1.0 / power)
        c_total = c_sat + alpha * m.b_prof()[j] * k_lead ** (alpha - 1.0) / pr.epsilon
        p_star = max(0.0, (M - 1.5 * c_total) / c_total)
        q_rhs = C * pr.sigma_Khat * gamma_hat_bracket(min(p_star, special.P_MAX))
        corr = 2.0 * pr.tau * q_rhs / (power * k_lead * c_total
                                       * state.lagrange_D)
        if corr >= 1.0:
            raise CapitalError("very_large_stable invalid: correction not small")
        return k_lead * (1.0 - corr)

    if regime == "very_large_unstable":
        # local maximum of returns: the curvature term makes the sector
        # overcrowded (||Psi||^2 >> D) and K solves
        # K^(1 + alpha + eta) (1 - eta) |lap R| c / (4 tau K_ref^alpha) = RHS
        eta = m.funcs.h_exponent
        if lapR >= 0:
            raise CapitalError("very_large_unstable invalid: needs a local "
                               "maximum of returns")
        k_ref = state.avg_capital[j]
        # dividends vanish at very large capital: only the saturated price
        # response survives in the short-term return
        c_sat = (m.funcs.f1_scale * math.pi / 2.0) / pr.epsilon
        p_star = max(0.0, (M - 1.5 * c_sat) / c_sat)
        q_rhs = C * pr.sigma_Khat * gamma_hat_bracket(min(p_star, special.P_MAX))
        lead = 4.0 * pr.tau * q_rhs * k_ref ** alpha \
            / ((1.0 - eta) * abs(lapR) * c_sat)
        return lead ** (1.0 / (1.0 + alpha + eta))

    raise CapitalError(f"unknown regime {regime!r}")


# ---------------------------------------------------------------------------
# self-consistent sweep
# ---------------------------------------------------------------------------

def _nearest_root_update(state, j, K, coupling, max_expand=36):
    """Residual root nearest to K by expanding multiplicative bracketing.

    The search radius is capped (trust region ~ x4) so a sector whose local
    root vanishes for one sweep holds its value instead of jumping onto a
    runaway accumulation branch.
    """
    ev = _LocalEval(state, j, coupling)
    res = ev.residual_quadrature
    try:
        r0 = res(K)
    except (CapitalError, BackgroundError, special.SpecialFunctionError):
        return K
    if r0 == 0.0:
        return K
    step = 1.04
    best = None
    for direction in (1.0, -1.0):
        k_prev, r_prev = K, r0
        k_cur = K
        for _ in range(max_expand):
            k_cur = k_cur * step if direction > 0 else k_cur / step
            if not (K_FLOOR <= k_cur <= SCAN_HI):
                break
            try:
                r_cur = res(k_cur)
            except (CapitalError, BackgroundError, special.SpecialFunctionError):
                break
            if np.isfinite(r_cur) and r_prev * r_cur <= 0:
                lo, hi = sorted((k_prev, k_cur))
                flo = res(lo)
                for _ in range(200):
                    mid = math.sqrt(lo * hi)
                    fm = res(mid)
                    if flo * fm <= 0:
                        hi = mid
                    else:
                        lo, flo = mid, fm
                    if hi - lo <= 1e-13 * hi:
                        break
                root = math.sqrt(lo * hi)
                if best is None or abs(math.log(root / K)) < abs(math.log(best / K)):
                    best = root
                break
            k_prev, r_prev = k_cur, r_cur
    return best if best is not None else K


def self_consistent_sweep(model, K_init, damping=0.5, max_sweeps=200,
                          tol=1e-6, use_backreaction=False, mode="picard",
                          coupling="tau_plain"):
    """Damped fixed-point iteration of the background + capital system.

    mode="picard" re-reads the average capital implied by the investor
    density; mode="root" tracks, per sector, the capital-equation root
    nearest to the current value (hysteresis), which also converges on
    branches where the plain substitution map diverges.  Sectors whose firm
    density clips to zero keep their previous capital.
    """
    K = np.asarray(K_init, dtype=float).copy()
    state = compute_state(model, K, use_backreaction=use_backreaction)
    for sweep in range(max_sweeps):
        occupied = state.firm_density > 1e-9 * float(np.max(state.firm_density))
        if mode == "picard":
            implied = implied_avg_capital(state)
            K_new = np.where(occupied, implied, K)
        elif mode == "root":
            K_new = K.copy()
            for j in range(model.grid.n_points):
                if occupied[j]:
                    K_new[j] = _nearest_root_update(state, j, K[j], coupling)
        else:
            raise CapitalError(f"unknown sweep mode {mode!r}")
        K_new = np.maximum(K_new, K_FLOOR)
        K_next = (1.0 - damping) * K + damping * K_new
        delta = float(np.max(np.abs(K_next - K) / np.maximum(K, K_FLOOR)))
        K = K_next
        state = compute_state(model, K, use_backreaction=use_backreaction,
                              prev_state=state)
        if delta < tol:
            break
    else:
        sweep = max_sweeps
    return state, sweep


def branch_table(state, coupling="tau_plain", **scan_kwargs):
    """Branches for every sector of a solved state."""
    out = []
    for j in range(state.model.grid.n_points):
        out.extend(solve_branches(j, state, coupling=coupling, **scan_kwargs))
    return out
