"""Laplace-domain transition kernels for individual agents in a background.

One-agent kernels for firms and investors from the quadratic effective
action, plus the first-order single-crossing corrections for agent pairs.
Path integrals run along straight segments with fixed trapezoid quadrature.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .model import grid_derivative

N_PATH = 64


class TransitionError(RuntimeError):
    pass


@dataclass
class TransitionQuery:
    kind: str                                  # firm | investor | firm_firm |
    start: Tuple[float, float]                 # (K, X) or (Khat, Xhat)
    end: Tuple[float, float]
    second_start: Optional[Tuple[float, float]] = None
    second_end: Optional[Tuple[float, float]] = None
    alpha: float = 1.0
    qid: str = ""

    def __post_init__(self):
        if self.kind not in ("firm", "investor", "firm_firm",
                             "firm_investor", "investor_investor"):
            raise TransitionError(f"unknown transition kind {self.kind!r}")
        if self.kind in ("firm_firm", "firm_investor", "investor_investor"):
            if self.second_start is None or self.second_end is None:
                raise TransitionError(
                    "two-agent queries need both second_start and second_end")
        if self.alpha <= 0:
            raise TransitionError("alpha (inverse lifespan) must be positive")


@dataclass
class TransitionResult:
    value: float
    drift: float
    decay: float
    alpha_eff: float
    warning: str = ""


# ---------------------------------------------------------------------------
# field interpolation helpers
# ---------------------------------------------------------------------------

class _FieldView:
    """Periodic/reflecting linear interpolation of per-sector fields."""

    def __init__(self, state):
        self.state = state
        self.grid = state.model.grid
        g = self.grid
        self._xs = np.append(g.positions, g.length)

    def at(self, field, x):
        g = self.grid
        vals = np.append(field, field[0]) if g.boundary == "periodic" \
            else np.append(field, field[-1])
        xp = np.mod(np.asarray(x, dtype=float), g.length)
        return np.interp(xp, self._xs, vals)

    def segment(self, xa, xb, n=N_PATH):
        return np.linspace(xa, xb, n)


def _alloc_norm(state, j):
    """<F2>: attractiveness normalizer over the sector's capital spread."""
    from .background import firm_capital_distribution
    m = state.model
    kx = state.avg_capital[j]
    width = math.sqrt(m.params.sigma_K * m.params.epsilon)
    kk = np.linspace(max(1e-12, kx - 8 * width), kx + 8 * width, 801)
    psi1_sq = firm_capital_distribution(m, j, state.avg_capital, kk)
    f2_vals = m.F2(m.eval_R(kk, j))
    return float(np.trapezoid(f2_vals * psi1_sq, kk))


class _AllocField:
    """alloc(K, x) = F2(R(K, x)) K_X(x) / <F2>(x): capital investors grant."""

    def __init__(self, state):
        self.state = state
        self.view = _FieldView(state)
        m = state.model
        self.norms = np.array([_alloc_norm(state, j)
                               for j in range(m.grid.n_points)])

    def at(self, K, x):
        m = self.state.model
        r_prof = m.funcs.r_profile.sample_at(m.grid, x)
        R = r_prof * np.maximum(np.asarray(K, dtype=float), 1e-300) \
            ** m.funcs.cobb_alpha
        kx = self.view.at(self.state.avg_capital, x)
        norm = self.view.at(self.norms, x)
        return np.asarray(m.F2(R)) * kx / norm

    def grad_x(self, K, x, h=None):
        g = self.state.model.grid
        h = g.spacing if h is None else h
        return (self.at(K, x + h) - self.at(K, x - h)) / (2.0 * h)


# ---------------------------------------------------------------------------
# effective-action terms
# ---------------------------------------------------------------------------

def effective_action_terms(query, state):
    """Quadratic-operator pieces at the query endpoints."""
    m = state.model
    pr = m.params
    view = _FieldView(state)
    out = {}
    if query.kind.startswith("firm"):
        alloc = _AllocField(state)
        for tag, (K, x) in (("start", query.start), ("end", query.end)):
            dens = float(view.at(state.firm_density, x))
            kx = float(view.at(state.avg_capital, x))
            competition = 2.0 * pr.tau * dens * (kx - K) / K
            well = (K - float(alloc.at(K, x))) ** 2 / (2.0 * pr.sigma_K)
            out[tag] = {
                "competition": competition,
                "potential_well": well,
                "lagrange_D": state.lagrange_D,
            }
    else:
        for tag, (khat, x) in (("start", query.start), ("end", query.end)):
            f = float(view.at(state.f_field, x))
            if f == 0.0:
                raise TransitionError("singular f at query endpoint")
            F = float(view.at(state.F_smoothing, x))
            y = (khat + pr.sigma_Khat * F / f ** 2) \
                * abs(f) ** 0.5 / math.sqrt(pr.sigma_Khat)
            out[tag] = {"y_variable": y, "f": f}
    return out


# ---------------------------------------------------------------------------
# one-agent kernels
# ---------------------------------------------------------------------------

def firm_transition(query, state, coupling="tau_ratio"):
    """Laplace-domain firm kernel between (K_i, X_i) and (K_f, X_f)."""
    if query.kind != "firm":
        raise TransitionError("firm_transition requires kind='firm'")
    m = state.model
    pr = m.params
    view = _FieldView(state)
    alloc = _AllocField(state)
    K_i, X_i = query.start[0], query.start[1]
    K_f, X_f = query.end[0], query.end[1]
    x_mid = 0.5 * (X_i + X_f)

    # D1: long-term-return drift along the sector path
    xs = view.segment(X_i, X_f)
    kx_path = view.at(state.avg_capital, xs)
    r_prof = m.funcs.r_profile.derivative_at(m.grid, xs)
    gradR_path = r_prof * kx_path ** m.funcs.cobb_alpha
    d1 = np.trapezoid(gradR_path * m.H_mobility(kx_path), xs) / pr.sigma_X

    # D2/D3: capital drift against the allocation equilibrium at the midpoint
    kk = np.linspace(min(K_i, K_f), max(K_i, K_f), N_PATH)
    sign = 1.0 if K_f >= K_i else -1.0
    d2 = -sign * np.trapezoid(kk - alloc.at(kk, x_mid), kk)
    d3 = sign * np.trapezoid(
        0.5 * (X_f - X_i) * alloc.grad_x(kk, x_mid), kk)
    drift = float(d1 + d2 + d3)

    k_i_prime = K_i - float(alloc.at(view.at(state.avg_capital, X_i), X_i))
    k_f_prime = K_f - float(alloc.at(view.at(state.avg_capital, X_f), X_f))

    dens_i = float(view.at(state.firm_density, X_i))
    dens_f = float(view.at(state.firm_density, X_f))
    kx_i = float(view.at(state.avg_capital, X_i))
    kx_f = float(view.at(state.avg_capital, X_f))
    if coupling == "tau_ratio":
        comp = pr.tau * (dens_f * (kx_f - K_f) / K_f

                         + dens_i * (kx_i - K_i) / K_i)
    else:
        comp = pr.tau * (dens_f * (kx_f - K_f) / kx_f
                         + dens_i * (kx_i - K_i) / kx_i)
    alpha_eff = query.alpha + state.lagrange_D + comp \
        + 0.5 * pr.sigma_K * k_f_prime * k_i_prime
    warning = ""
    if alpha_eff <= 0:
        warning = "alpha_eff <= 0: unphysical effective decay"

    dist = math.sqrt((X_f - X_i) ** 2 / (2.0 * pr.sigma_X)
                     + (k_f_prime - k_i_prime) ** 2 / (2.0 * pr.sigma_K))
    decay = alpha_eff * dist
    return TransitionResult(value=math.exp(drift - decay), drift=drift,
                            decay=decay, alpha_eff=alpha_eff, warning=warning)


def investor_transition(query, state):
    """Laplace-domain investor kernel between (Khat_i, Xhat_i) and final."""
    if query.kind != "investor":
        raise TransitionError("investor_transition requires kind='investor'")
    m = state.model
    pr = m.params
    view = _FieldView(state)
    kh_i, xh_i = query.start
    kh_f, xh_f = query.end
    f_i = float(view.at(state.f_field, xh_i))
    f_f = float(view.at(state.f_field, xh_f))
    if f_i == 0.0 or f_f == 0.0:
        raise TransitionError("singular f at an investor endpoint")

    xs = view.segment(xh_i, xh_f)
    g_path = view.at(state.g_field, xs)
    drift = float(np.trapezoid(g_path, xs) / pr.sigma_Xhat
                  + kh_f ** 2 * f_f / pr.sigma_Khat
                  - kh_i ** 2 * f_i / pr.sigma_Khat)

    F_i = float(view.at(state.F_smoothing, xh_i))
    F_f = float(view.at(state.F_smoothing, xh_f))
    shift_i = kh_i + pr.sigma_Khat * F_i / f_i ** 2
    shift_f = kh_f + pr.sigma_Khat * F_f / f_f ** 2

    f_path = view.at(state.f_field, xs)
    gg_path = view.at(state.grad_g, xs)
    FF_path = view.at(state.F_smoothing, xs)
    rel_return = (g_path ** 2 + pr.sigma_Xhat
                  * (f_path + gg_path
                     - pr.sigma_Khat * FF_path ** 2 / (2.0 * f_path ** 2))) \
        / (pr.sigma_Xhat * np.abs(f_path))
    g_r = float(np.mean(rel_return))

    f_mid = float(view.at(state.f_field, 0.5 * (xh_i + xh_f)))
    alpha_eff = (query.alpha + 0.5 * pr.sigma_Xhat * shift_f * shift_i) \
        * math.sqrt(abs(f_mid) / (2.0 * pr.sigma_Xhat)) + g_r
    decay = alpha_eff * abs(shift_f - shift_i)
    warning = "" if alpha_eff > 0 else "alpha_eff <= 0"
    return TransitionResult(value=math.exp(drift - decay), drift=drift,
                            decay=decay, alpha_eff=alpha_eff, warning=warning)


# ---------------------------------------------------------------------------
# pair interactions
# ---------------------------------------------------------------------------

def _f_at_capital(state, K, x):
    """Per-firm return integrand at capital K in the sector at x."""
    m = state.model
    pr = m.params
    view = _FieldView(state)
    r_prof = m.funcs.r_profile.sample_at(m.grid, x)
    b_prof = m.funcs.b_productivity.sample_at(m.grid, x)
    dens = view.at(state.firm_density, x)
    kx = view.at(state.avg_capital, x)
    R = r_prof * np.maximum(K, 1e-300) ** m.funcs.cobb_alpha
    rbar = R / state.rbar_norm
    r_marg = m.funcs.cobb_alpha * b_prof * np.maximum(K, 1e-300) \
        ** (m.funcs.cobb_alpha - 1.0)
    return (r_marg - pr.gamma_c * dens * kx / np.maximum(K, 1e-300)
            + np.asarray(m.F1(rbar))) / pr.epsilon


def interaction_kernels(pair_kind, midpoints, state, h_k=1e-4):
    """First-order crossing kernel Delta S at the path midpoints.

    midpoints: ((Kbar, Xbar), (Kbar', Xbar')) with the investor pair second
    for firm_investor.  Sign convention: the pair kernel enters the two-agent
    function as  product - Delta S * Ghat_i Ghat_j.
    """
    m = state.model
    pr = m.params
    view = _FieldView(state)
    if pair_kind == "investor_investor":
        return 0.0
    (k1, x1), (k2, x2) = midpoints
    alloc = _AllocField(state)
    xc = 0.5 * (x1 + x2)  # single-crossing sector
    dens1 = float(view.at(state.firm_density, xc))
    if dens1 <= 0:
        raise TransitionError("empty sector at the crossing midpoint")
    kx1 = float(view.at(state.avg_capital, xc))
    khat_total = kx1 * dens1
    # relative attractiveness of a single firm: F2hat = alloc/(K_X ||Psi||^2)
    def f2hat(k):
        return float(alloc.at(k, xc)) / max(khat_total, 1e-300)

    def df2hat(k):
        step = h_k * max(k, 1.0)
        return (float(alloc.at(k + step, xc)) - float(alloc.at(k - step, xc))) \
            / (2.0 * step * max(khat_total, 1e-300))
    if pair_kind == "firm_firm":
        # 2 tau - grad_K d2u with d2u = -(1/eps) F2hat(K) F2hat(K') Khat_X;
        # symmetrized in the pair (the quartic vertex is relabeling-invariant)
        cross = 0.5 * (df2hat(k1) * f2hat(k2) + df2hat(k2) * f2hat(k1))
        return 2.0 * pr.tau + cross * khat_total ** 2 / pr.epsilon
    if pair_kind == "firm_investor":
        # (k1, x1): firm midpoint; (k2, x2): investor midpoint
        term_u = df2hat(k1) * khat_total * k2 / pr.epsilon
        f_common = float(view.at(state.f_field, xc))
        delta_f = float(_f_at_capital(state, k1, xc)) - f_common
        delta_u_f = delta_f - pr.gamma_c * k1 / max(kx1, 1e-300) / pr.epsilon
        alpha = m.funcs.cobb_alpha
        delta_g_fn = lambda x: float(view.at(state.g_field, x)) \
            * ((k1 / max(float(view.at(state.avg_capital, x)), 1e-300)) ** alpha - 1.0) \
            / max(float(view.at(state.firm_density, x)), 1e-300)
        hx = m.grid.spacing
        grad_delta_g = (delta_g_fn(xc + hx) - delta_g_fn(xc - hx)) / (2.0 * hx)
        bracket = term_u + delta_u_f + grad_delta_g
        return -bracket
    raise TransitionError(f"unknown pair kind {pair_kind!r}")


def _single(query_kind, start, end, alpha, state, coupling="tau_ratio"):
    q = TransitionQuery(kind=query_kind, start=start, end=end, alpha=alpha)
    if query_kind == "firm":
        return firm_transition(q, state, coupling)
    return investor_transition(q, state)


def two_agent_transition(query, state, coupling="tau_ratio"):
    """Pair kernel with the first-order single-crossing correction."""
    kinds = {"firm_firm": ("firm", "firm"),
             "firm_investor": ("firm", "investor"),
             "investor_investor": ("investor", "investor")}
    if query.kind not in kinds:
        raise TransitionError("two_agent_transition needs a pair kind")
    k1, k2 = kinds[query.kind]
    g_a = _single(k1, query.start, query.end, query.alpha, state, coupling)
    g_b = _single(k2, query.second_start, query.second_end, query.alpha,
                  state, coupling)
    bare = g_a.value * g_b.value
    if query.kind == "investor_investor":
        return TransitionResult(value=bare, drift=g_a.drift + g_b.drift,
                                decay=g_a.decay + g_b.decay,
                                alpha_eff=min(g_a.alpha_eff, g_b.alpha_eff))
    mid_a = (0.5 * (query.start[0] + query.end[0]),
             0.5 * (query.start[1] + query.end[1]))
    mid_b = (0.5 * (query.second_start[0] + query.second_end[0]),
             0.5 * (query.second_start[1] + query.second_end[1]))
    kernel = interaction_kernels(query.kind, (mid_a, mid_b), state)
    # crossing path: each agent passes through its midpoint
    ga_hat = _single(k1, query.start, mid_a, query.alpha, state, coupling).value \
        * _single(k1, mid_a, query.end, query.alpha, state, coupling).value
    gb_hat = _single(k2, query.second_start, mid_b, query.alpha, state, coupling).value \
        * _single(k2, mid_b, query.second_end, query.alpha, state, coupling).value
    value = bare - kernel * ga_hat * gb_hat
    return TransitionResult(value=value, drift=g_a.drift + g_b.drift,
                            decay=g_a.decay + g_b.decay,
                            alpha_eff=min(g_a.alpha_eff, g_b.alpha_eff))


def run_queries(queries, state, coupling="tau_ratio"):
    """Evaluate a batch of TransitionQuery records."""
    rows = []
    for i, q in enumerate(queries):
        if q.kind == "firm":
            res = firm_transition(q, state, coupling)
        elif q.kind == "investor":
            res = investor_transition(q, state)
        else:
            res = two_agent_transition(q, state, coupling)
        rows.append((q.qid or str(i), res))
    return rows
