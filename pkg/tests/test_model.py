import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capflow.model import (EconomyParams, Model, ModelError, ParamFunctions,
                           Profile, SectorGrid, grid_derivative)
from capflow.background import attractiveness_F2hat, firm_capital_distribution
from conftest import flat_model, rsine_model


def test_grid_invariants():
    g = SectorGrid.uniform(16, 2.0)
    assert g.spacing == pytest.approx(0.125)
    assert np.all(np.diff(g.positions) > 0)
    with pytest.raises(ModelError):
        SectorGrid.uniform(4, 1.0)
    with pytest.raises(ModelError):
        SectorGrid.uniform(16, 1.0, boundary="absorbing")


def test_params_invariants():
    with pytest.raises(ModelError):
        EconomyParams(sigma_X=0.0)
    with pytest.raises(ModelError):
        EconomyParams(epsilon=1.5)


def test_grid_derivative_constant_and_linear():
    g = SectorGrid.uniform(32, 1.0)
    const = np.full(32, 3.7)
    assert np.allclose(grid_derivative(g, const, 1), 0.0)
    # periodic-safe linear window: use a reflecting grid
    gr = SectorGrid.uniform(32, 1.0, boundary="reflecting")
    lin = 2.0 * gr.positions
    d = grid_derivative(gr, lin, 1)
    assert np.allclose(d[1:-1], 2.0)


def test_grid_derivative_second_order_convergence():
    # sin(2 pi x): error ratio ~ 4 when spacing halves
    errs = []
    for n in (32, 64):
        g = SectorGrid.uniform(n, 1.0)
        f = np.sin(2 * np.pi * g.positions)
        lap = grid_derivative(g, f, 2)
        exact = -(2 * np.pi) ** 2 * f
        errs.append(np.max(np.abs(lap - exact)))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)


def test_grid_derivative_length_mismatch():
    g = SectorGrid.uniform(16, 1.0)
    with pytest.raises(ModelError):
        grid_derivative(g, np.ones(15), 1)


def test_eval_R_parametric():
    m = flat_model()
    assert float(m.eval_R(1.0, 0)) == pytest.approx(1.0)
    funcs = ParamFunctions(r_profile=Profile("flat", 2.0), cobb_alpha=0.5)
    m2 = Model(m.grid, m.params, funcs)
    assert float(m2.eval_R(4.0, 0)) == pytest.approx(4.0)  # 2 * sqrt(4)
    with pytest.raises(ModelError):
        m.eval_R(-1.0, 0)


def test_eval_R_sine_midpoint_oracle():
    m = rsine_model(amplitude=0.3)
    j = 5
    x = m.grid.positions[j]
    oracle = (1.0 + 0.3 * math.sin(2 * math.pi * x)) * 2.0 ** 0.5
    assert float(m.eval_R(2.0, j)) == pytest.approx(oracle, rel=1e-12)


def test_short_term_return_trivials():
    # gamma=0, F1 == 0 (flat relative returns), r = alpha B K^(alpha-1)
    m = flat_model(gamma_c=0.0)
    K = np.full(16, 4.0)
    dens = np.full(16, 200.0)
    f = m.short_term_return_f(K, dens)
    assert np.allclose(f, 0.25 / m.params.epsilon)
    # r == 0 via B = 0 productivity: f = (-gamma * dens + F1)/eps
    funcs = ParamFunctions(b_productivity=Profile("flat", 0.0), f1_scale=0.0)
    m2 = Model(m.grid, EconomyParams(gamma_c=1.0, epsilon=0.1), funcs)
    f2 = m2.short_term_return_f(np.full(16, 1.0), np.full(16, 3.0))
    assert np.allclose(f2, -3.0 / 0.1)


def test_mobility_zero_for_flat_profile():
    m = flat_model()
    g = m.mobility_g(np.full(16, 2.0), np.full(16, 200.0))
    assert np.allclose(g, 0.0, atol=1e-14)


def test_mobility_sine_matches_central_difference_oracle():
    m = rsine_model(amplitude=0.1)
    K = np.full(16, 2.0)
    dens = np.full(16, 200.0)
    g = m.mobility_g(K, dens)
    norm = m.rbar_normalizer(K, dens)
    R = m.eval_R(K)
    comp = m.F0(R) + m.params.nu * m.F1(R / norm)
    h = m.grid.spacing
    oracle = (np.roll(comp, -1) - np.roll(comp, 1)) / (2 * h)
    assert np.allclose(g, oracle)


def test_f2hat_normalization_every_sector(sine_state):
    m = sine_state.model
    for j in range(m.grid.n_points):
        kx = sine_state.avg_capital[j]
        width = math.sqrt(m.params.sigma_K * m.params.epsilon)
        kk = np.linspace(max(1e-12, kx - 8 * width), kx + 8 * width, 1501)
        f2h = attractiveness_F2hat(m, kk, j, sine_state)
        psi_sq = firm_capital_distribution(m, j, sine_state.avg_capital, kk) \
            * sine_state.firm_density[j]
        integral = np.trapezoid(f2h * psi_sq, kk)
        assert integral == pytest.approx(1.0, abs=1e-8)


def test_f2hat_constant_f2_is_inverse_density(flat_state):
    m = flat_state.model
    funcs = ParamFunctions(f2_shape="linear", f2_coef=0.0)
    m2 = Model(m.grid, m.params, funcs)
    val = attractiveness_F2hat(m2, flat_state.avg_capital[0], 0, flat_state)
    assert float(val) == pytest.approx(1.0 / flat_state.firm_density[0],
                                       rel=1e-10)


@given(st.floats(min_value=0.1, max_value=30.0),
       st.floats(min_value=0.1, max_value=30.0))
@settings(max_examples=100, deadline=None)
def test_f2_positive(r1, r2):
    m = flat_model()
    assert float(m.F2(r1)) > 0
    assert float(m.F2(-r2)) > 0
