import math

import numpy as np
import pytest

from capflow import background as bg
from capflow import transitions as tr
from capflow.model import Model, ParamFunctions, Profile
from capflow.transitions import TransitionQuery
from conftest import flat_model, rsine_model


def _flat_limit_state():
    """Hand-built background with D = 0, constant allocation: the kernel
    reduces to the analytic Gaussian Laplace form."""
    m = flat_model()
    state = bg.compute_state(m, np.full(16, 2.0))
    state.lagrange_D = 0.0
    state.firm_density = np.zeros(16)  # tau-terms vanish
    return state


def test_query_validation():
    with pytest.raises(tr.TransitionError):
        TransitionQuery(kind="firm_firm", start=(1, 0), end=(1, 0.1))
    with pytest.raises(tr.TransitionError):
        TransitionQuery(kind="ghost", start=(1, 0), end=(1, 0.1))
    with pytest.raises(tr.TransitionError):
        TransitionQuery(kind="firm", start=(1, 0), end=(1, 0.1), alpha=-1.0)


def test_firm_coincident_endpoints_unity(sine_state):
    q = TransitionQuery(kind="firm", start=(2.4, 0.3), end=(2.4, 0.3))
    r = tr.firm_transition(q, sine_state)
    assert r.value == pytest.approx(1.0, rel=1e-12)
    assert r.drift == 0.0 and r.decay == 0.0


def test_investor_coincident_endpoints_unity(sine_state):
    q = TransitionQuery(kind="investor", start=(1.1, 0.4), end=(1.1, 0.4))
    r = tr.investor_transition(q, sine_state)
    assert r.value == pytest.approx(1.0, rel=1e-12)


def test_flat_limit_matches_analytic_gaussian_kernel():
    # 10 x 10 endpoint grid against the closed form
    state = _flat_limit_state()
    m = state.model
    pr = m.params
    alloc = tr._AllocField(state)
    kx = state.avg_capital[0]
    a0 = float(alloc.at(kx, 0.1))
    alpha = 1.0
    worst = 0.0
    for kf in np.linspace(1.6, 2.4, 10):
        for xf in np.linspace(0.05, 0.5, 10):
            q = TransitionQuery(kind="firm", start=(2.0, 0.1), end=(kf, xf),
                                alpha=alpha)
            got = tr.firm_transition(q, state).value
            # analytic: D2 integral of (K - alloc(K)) with alloc exact
            kk = np.linspace(min(2.0, kf), max(2.0, kf), 2001)
            alloc_mid = alloc.at(kk, 0.5 * (0.1 + xf))
            sign = 1.0 if kf >= 2.0 else -1.0
            d2 = -sign * np.trapezoid(kk - alloc_mid, kk)
            kip = 2.0 - a0
            kfp = kf - float(alloc.at(kx, xf))
            a_eff = alpha + 0.5 * pr.sigma_K * kip * kfp
            dist = math.sqrt((xf - 0.1) ** 2 / (2 * pr.sigma_X)
                             + (kfp - kip) ** 2 / (2 * pr.sigma_K))
            ref = math.exp(d2 - a_eff * dist)
            worst = max(worst, abs(got - ref) / ref)
    assert worst <= 1e-6


def test_firm_monotone_in_sector_distance(sine_state):
    vals = []
    for d in (0.01, 0.05, 0.1, 0.2, 0.35):
        q = TransitionQuery(kind="firm", start=(2.4, 0.3), end=(2.4, 0.3 + d))
        vals.append(tr.firm_transition(q, sine_state).value)
    assert all(vals[i] > vals[i + 1] for i in range(len(vals) - 1))


def test_firm_invariant_under_profile_shift():
    # with the level channels disabled, adding a constant to the return
    # profile leaves the kernel unchanged at fixed capital field
    def build(shift):
        base = rsine_model(amplitude=0.02)
        funcs = ParamFunctions(
            r_profile=Profile("sine", 1.0 + shift, 0.02, 1.0),
            f0_scale=0.0, f1_scale=0.0, f2_coef=0.0)
        return Model(base.grid, base.params, funcs)
    K = np.full(16, 2.2)
    s1 = bg.compute_state(build(0.0), K)
    s2 = bg.compute_state(build(12.0), K)
    q = TransitionQuery(kind="firm", start=(2.0, 0.1), end=(2.3, 0.4))
    v1 = tr.firm_transition(q, s1).value
    v2 = tr.firm_transition(q, s2).value
    assert v1 == pytest.approx(v2, rel=1e-9)


def test_investor_drift_reduces_to_zero_on_flat(flat_state):
    # g == 0 and equal f at both endpoints with equal capital: D' = 0
    q = TransitionQuery(kind="investor", start=(1.3, 0.2), end=(1.3, 0.7))
    r = tr.investor_transition(q, flat_state)
    assert r.drift == pytest.approx(0.0, abs=1e-12)
    assert r.decay == pytest.approx(0.0, abs=1e-12)


def test_investor_monotone_in_capital_distance(sine_state):
    vals = []
    for d in (0.0, 0.3, 0.8, 1.5):
        q = TransitionQuery(kind="investor", start=(1.0, 0.4),
                            end=(1.0 + d, 0.4))
        r = tr.investor_transition(q, sine_state)
        vals.append(r.value * math.exp(-r.drift))  # fixed drift comparison
    assert all(vals[i] > vals[i + 1] for i in range(len(vals) - 1))


def test_interaction_kernel_trivials(sine_state):
    assert tr.interaction_kernels(
        "investor_investor", ((1.0, 0.2), (1.0, 0.3)), sine_state) == 0.0
    # tau = 0 and constant F2 (no attractiveness response): firm kernel -> 0
    import dataclasses
    m = sine_state.model
    m0 = Model(m.grid, dataclasses.replace(m.params, tau=0.0),
               ParamFunctions(f2_coef=0.0))
    state0 = dataclasses.replace(sine_state, model=m0)
    k = tr.interaction_kernels("firm_firm", ((2.0, 0.2), (2.0, 0.3)), state0)
    assert k == pytest.approx(0.0, abs=1e-10)


def test_firm_firm_kernel_symmetric_under_swap(sine_state):
    a, b = (2.3, 0.25), (2.6, 0.5)
    q1 = TransitionQuery(kind="firm_firm", start=a, end=a, second_start=b,
                         second_end=b)
    q2 = TransitionQuery(kind="firm_firm", start=b, end=b, second_start=a,
                         second_end=a)
    v1 = tr.two_agent_transition(q1, sine_state).value
    v2 = tr.two_agent_transition(q2, sine_state).value
    assert v1 == pytest.approx(v2, rel=1e-9)


def test_investor_pair_is_bare_product(sine_state):
    q = TransitionQuery(kind="investor_investor", start=(1.2, 0.3),
                        end=(1.0, 0.35), second_start=(0.9, 0.6),
                        second_end=(1.1, 0.55))
    pair = tr.two_agent_transition(q, sine_state)
    g_a = tr.investor_transition(TransitionQuery(
        kind="investor", start=(1.2, 0.3), end=(1.0, 0.35)), sine_state)
    g_b = tr.investor_transition(TransitionQuery(
        kind="investor", start=(0.9, 0.6), end=(1.1, 0.55)), sine_state)
    assert pair.value == g_a.value * g_b.value


def test_firm_pair_below_bare_product_with_tau(sine_state):
    q = TransitionQuery(kind="firm_firm", start=(2.4, 0.30), end=(2.3, 0.32),
                        second_start=(2.5, 0.31), second_end=(2.45, 0.33))
    pair = tr.two_agent_transition(q, sine_state)
    g_a = tr.firm_transition(TransitionQuery(
        kind="firm", start=(2.4, 0.30), end=(2.3, 0.32)), sine_state)
    g_b = tr.firm_transition(TransitionQuery(
        kind="firm", start=(2.5, 0.31), end=(2.45, 0.33)), sine_state)
    assert pair.value < g_a.value * g_b.value


def test_kernels_zeroed_gives_bare_product(sine_state, monkeypatch):
    monkeypatch.setattr(tr, "interaction_kernels",
                        lambda *a, **k: 0.0)
    q = TransitionQuery(kind="firm_firm", start=(2.4, 0.30), end=(2.3, 0.32),
                        second_start=(2.5, 0.31), second_end=(2.45, 0.33))
    pair = tr.two_agent_transition(q, sine_state)
    g_a = tr.firm_transition(TransitionQuery(
        kind="firm", start=(2.4, 0.30), end=(2.3, 0.32)), sine_state)
    g_b = tr.firm_transition(TransitionQuery(
        kind="firm", start=(2.5, 0.31), end=(2.45, 0.33)), sine_state)
    assert pair.value == pytest.approx(g_a.value * g_b.value, rel=1e-12)


def test_effective_action_terms(sine_state):
    # competition term vanishes exactly at K = K_X
    j = 3
    kx = sine_state.avg_capital[j]
    x = sine_state.model.grid.positions[j]
    q = TransitionQuery(kind="firm", start=(kx, x), end=(kx, x))
    terms = tr.effective_action_terms(q, sine_state)
    assert terms["start"]["competition"] == pytest.approx(0.0, abs=1e-9)
    q2 = TransitionQuery(kind="investor", start=(1.0, x), end=(1.2, x))
    terms2 = tr.effective_action_terms(q2, sine_state)
    assert "y_variable" in terms2["start"]


def test_run_queries_batch(sine_state):
    queries = [
        TransitionQuery(kind="firm", start=(2.4, 0.3), end=(2.45, 0.32),
                        qid="a"),
        TransitionQuery(kind="investor", start=(1.0, 0.3), end=(1.1, 0.35),
                        qid="b"),
    ]
    rows = tr.run_queries(queries, sine_state)
    assert [r[0] for r in rows] == ["a", "b"]
    assert all(np.isfinite(r[1].value) for r in rows)
