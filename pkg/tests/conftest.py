import numpy as np
import pytest

from capflow.model import (EconomyParams, Model, ParamFunctions, Profile,
                           SectorGrid)
from capflow import capital


def flat_model(n_points=16, **overrides):
    kw = dict(tau=1.0, gamma_c=0.0025, epsilon=0.1, nu=0.0,
              sigma_X=0.05, sigma_K=0.02, sigma_Xhat=0.05, sigma_Khat=3.86,
              n_firms=200.0, n_investors=400.0)
    kw.update(overrides)
    return Model(SectorGrid.uniform(n_points, 1.0), EconomyParams(**kw),
                 ParamFunctions(f0_scale=0.02))


def sine_model(n_points=16, amplitude=0.07, **overrides):
    kw = dict(tau=1.0, gamma_c=0.0025, epsilon=0.1, nu=0.0,
              sigma_X=0.05, sigma_K=0.02, sigma_Xhat=0.05, sigma_Khat=3.86,
              n_firms=200.0, n_investors=400.0)
    kw.update(overrides)
    funcs = ParamFunctions(
        b_productivity=Profile("sine", 1.0, amplitude, 1.0), f0_scale=0.02)
    return Model(SectorGrid.uniform(n_points, 1.0), EconomyParams(**kw), funcs)


def rsine_model(n_points=16, amplitude=0.03, **overrides):
    """Long-term-return sine: exercises the mobility fields g, grad g."""
    kw = dict(tau=1.0, gamma_c=0.0025, epsilon=0.1, nu=0.2,
              sigma_X=0.05, sigma_K=0.02, sigma_Xhat=0.05, sigma_Khat=3.86,
              n_firms=200.0, n_investors=400.0)
    kw.update(overrides)
    funcs = ParamFunctions(r_profile=Profile("sine", 1.0, amplitude, 1.0),
                           f0_scale=0.02)
    return Model(SectorGrid.uniform(n_points, 1.0), EconomyParams(**kw), funcs)


@pytest.fixture(scope="session")
def flat_state():
    model = flat_model()
    state, sweeps = capital.self_consistent_sweep(
        model, np.full(model.grid.n_points, 2.2), mode="root")
    assert sweeps < 200
    return state


@pytest.fixture(scope="session")
def sine_state():
    model = sine_model()
    state, sweeps = capital.self_consistent_sweep(
        model, np.full(model.grid.n_points, 2.2), mode="root")
    assert sweeps < 200
    return state


@pytest.fixture(scope="session")
def rsine_state():
    model = rsine_model()
    state, sweeps = capital.self_consistent_sweep(
        model, np.full(model.grid.n_points, 2.2), mode="root")
    assert sweeps < 200
    return state


@pytest.fixture(scope="session")
def sine_branches(sine_state):
    return capital.branch_table(sine_state)
