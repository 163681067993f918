"""Sector grid, model constants, and the parametric function family.

The sector space is a uniform 1-D grid (periodic by default).  All model
functions follow the power-law/arctan parametric family:

    R(K, X)  = R_profile(X) * K^cobb_alpha          (long-term return)
    r(K, X)  = cobb_alpha * B(X) * K^(cobb_alpha-1) (marginal dividend)
    H(K)     = K^h_exponent                          (mobility weight)
    F0(R)    = f0_scale * arctan(R)
    F1(Rbar) = f1_scale * arctan(Rbar - 1)           (or linear variant)
    F2(R)    = attractiveness family (concave/convex/linear)

Relative returns Rbar are normalized so Rbar = 1 when every sector carries
the average return per firm.
"""

import math
from dataclasses import dataclass, field

import numpy as np


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SectorGrid:
    n_points: int
    spacing: float
    boundary: str
    positions: np.ndarray

    def __post_init__(self):
        if self.n_points < 8:
            raise ModelError("sector grid needs at least 8 points")
        if self.boundary not in ("periodic", "reflecting"):
            raise ModelError(f"unknown boundary rule {self.boundary!r}")
        if self.spacing <= 0:
            raise ModelError("grid spacing must be positive")
        d = np.diff(self.positions)
        if not (np.all(d > 0) and np.allclose(d, self.spacing, rtol=1e-12)):
            raise ModelError("positions must be strictly increasing and uniform")

    @property
    def length(self):
        return self.n_points * self.spacing

    @classmethod
    def uniform(cls, n_points, length=1.0, boundary="periodic"):
        spacing = length / n_points
        pos = np.arange(n_points) * spacing
        return cls(n_points=n_points, spacing=spacing, boundary=boundary,
                   positions=pos)


def grid_derivative(grid, values, order=1):
    """Central-difference derivative of a per-sector field (order 1 or 2)."""
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_points,):
        raise ModelError(
            f"field length {values.shape} does not match grid ({grid.n_points},)")
    h = grid.spacing
    if grid.boundary == "periodic":
        up = np.roll(values, -1)
        dn = np.roll(values, 1)
    else:
        # mirror ghost cells
        up = np.empty_like(values)
        dn = np.empty_like(values)
        up[:-1] = values[1:]
        up[-1] = values[-2]
        dn[1:] = values[:-1]
        dn[0] = values[1]
    if order == 1:
        return (up - dn) / (2.0 * h)
    if order == 2:
        return (up - 2.0 * values + dn) / (h * h)
    raise ModelError("derivative order must be 1 or 2")


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EconomyParams:
    """Model constants; the sigma_* fields are noise variances."""

    tau: float = 1.0
    gamma_c: float = 0.05
    epsilon: float = 0.1
    nu: float = 0.5
    sigma_X: float = 0.05
    sigma_K: float = 0.05
    sigma_Xhat: float = 0.05
    sigma_Khat: float = 0.05
    n_firms: float = 100.0
    n_investors: float = 200.0
    alpha_lifespan: float = 1.0
    varsigma: float = 1.0

    def __post_init__(self):
        for name in ("sigma_X", "sigma_K", "sigma_Xhat", "sigma_Khat"):
            if getattr(self, name) <= 0:
                raise ModelError(f"variance {name} must be strictly positive")
        if not (0.0 < self.epsilon < 1.0):
            raise ModelError("epsilon must lie in (0, 1): capital moves faster "
                             "than firms relocate")
        if self.tau < 0 or self.gamma_c < 0 or self.nu < 0:
            raise ModelError("tau, gamma_c and nu must be non-negative")
        if self.n_firms <= 0 or self.n_investors <= 0:
            raise ModelError("agent counts must be positive")
        if self.alpha_lifespan <= 0:
            raise ModelError("alpha_lifespan must be positive")


# ---------------------------------------------------------------------------
# profiles over the sector space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Profile:
    """Analytic or tabulated map X -> real on the sector grid."""

    kind: str = "flat"
    value: float = 1.0
    amplitude: float = 0.0
    cycles: float = 1.0
    phase: float = 0.0
    table: tuple = ()

    def sample(self, grid):
        if self.kind == "flat":
            return np.full(grid.n_points, self.value)
        if self.kind == "sine":
            x = grid.positions / grid.length
            return self.value + self.amplitude * np.sin(
                2.0 * math.pi * self.cycles * x + self.phase)
        if self.kind == "table":
            vals = np.asarray(self.table, dtype=float)
            if vals.shape != (grid.n_points,):
                raise ModelError("tabulated profile length mismatch")
            return vals
        raise ModelError(f"unknown profile kind {self.kind!r}")

    def sample_at(self, grid, x):
        """Value at arbitrary positions (periodic interpolation for tables)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "flat":
            return np.full(x.shape, self.value)
        if self.kind == "sine":
            return self.value + self.amplitude * np.sin(
                2.0 * math.pi * self.cycles * x / grid.length + self.phase)
        vals = self.sample(grid)
        xp = np.mod(x, grid.length)
        return np.interp(xp, np.append(grid.positions, grid.length),
                         np.append(vals, vals[0]))

    def derivative_at(self, grid, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "flat":
            return np.zeros(x.shape)
        if self.kind == "sine":
            w = 2.0 * math.pi * self.cycles / grid.length
            return self.amplitude * w * np.cos(w * x + self.phase)
        vals = self.sample(grid)
        dv = grid_derivative(grid, vals, 1)
        xp = np.mod(x, grid.length)
        return np.interp(xp, np.append(grid.positions, grid.length),
                         np.append(dv, dv[0]))


@dataclass(frozen=True)
class ParamFunctions:
    r_profile: Profile = field(default_factory=lambda: Profile("flat", 1.0))
    b_productivity: Profile = field(default_factory=lambda: Profile("flat", 1.0))
    cobb_alpha: float = 0.5
    h_exponent: float = 0.5
    f0_scale: float = 0.1
    f1_scale: float = 0.1
    f1_shape: str = "arctan"      # "arctan" (bounded) or "linear"
    f2_shape: str = "concave"     # "concave" | "convex" | "linear"
    f2_coef: float = 0.5
    f2_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.cobb_alpha < 1.0):
            raise ModelError("cobb_alpha must lie in (0, 1)")
        if self.h_exponent < 0:
            raise ModelError("h_exponent must be >= 0")
        if self.f2_shape not in ("concave", "convex", "linear"):
            raise ModelError(f"unknown F2 shape {self.f2_shape!r}")
        if self.f1_shape not in ("arctan", "linear"):
            raise ModelError(f"unknown F1 shape {self.f1_shape!r}")


@dataclass(frozen=True)
class Model:
    grid: SectorGrid
    params: EconomyParams
    funcs: ParamFunctions

    # -- cached profile samples ---------------------------------------------
    def r_prof(self):
        return self.funcs.r_profile.sample(self.grid)

    def b_prof(self):
        return self.funcs.b_productivity.sample(self.grid)

    # -- parametric family ---------------------------------------------------
    def eval_R(self, K, j=None, r_prof=None):
        """Long-term return R(K, X) = R_profile(X) K^alpha."""
        K = np.asarray(K, dtype=float)
        if np.any(K <= 0):
            raise ModelError("eval_R requires K > 0")
        prof = self.r_prof() if r_prof is None else r_prof
        base = prof if j is None else prof[j]
        return base * K ** self.funcs.cobb_alpha

    def marginal_r(self, K, j=None, b_prof=None):
        """Cobb-Douglas marginal dividend r(K, X) = alpha B(X) K^(alpha-1)."""
        K = np.asarray(K, dtype=float)
        prof = self.b_prof() if b_prof is None else b_prof
        base = prof if j is None else prof[j]
        return self.funcs.cobb_alpha * base * K ** (self.funcs.cobb_alpha - 1.0)

    def H_mobility(self, K):
        return np.asarray(K, dtype=float) ** self.funcs.h_exponent

    def F0(self, R):
        return self.funcs.f0_scale * np.arctan(R)

    def F0_prime(self, R):
        return self.funcs.f0_scale / (1.0 + np.asarray(R) ** 2)

    def F1(self, rbar):
        x = np.asarray(rbar, dtype=float) - 1.0
        if self.funcs.f1_shape == "linear":
            return self.funcs.f1_scale * x
        return self.funcs.f1_scale * np.arctan(x)

    def F1_prime(self, rbar):
        x = np.asarray(rbar, dtype=float) - 1.0
        if self.funcs.f1_shape == "linear":
            return np.full_like(x, self.funcs.f1_scale)
        return self.funcs.f1_scale / (1.0 + x ** 2)

    def F2(self, R):
        R = np.asarray(R, dtype=float)
        c, s = self.funcs.f2_coef, self.funcs.f2_scale
        if self.funcs.f2_shape == "concave":
            out = 1.0 + c * np.arctan(R / s)
        elif self.funcs.f2_shape == "convex":
            out = 1.0 + c * (R / s) ** 2
        else:
            out = 1.0 + c * R / s
        return np.maximum(out, 1e-8)

    def F2_prime(self, R):
        R = np.asarray(R, dtype=float)
        c, s = self.funcs.f2_coef, self.funcs.f2_scale
        if self.funcs.f2_shape == "concave":
            raw = c / s / (1.0 + (R / s) ** 2)
        elif self.funcs.f2_shape == "convex":
            raw = 2.0 * c * R / s ** 2
        else:
            raw = np.full_like(R, c / s)
        return np.where(self.F2(R) <= 1e-8, 0.0, raw)

    # -- composite fields -----------------------------------------------------
    def rbar_normalizer(self, K_X, firm_density):
        """Per-firm average long-term return, int R ||Psi||^2 dX / N."""
        R_field = self.eval_R(K_X)
        total = np.sum(R_field * firm_density) * self.grid.spacing
        if total <= 0:
            raise ModelError("degenerate relative-return normalizer")
        return total / self.params.n_firms

    def short_term_return_f(self, K_X, firm_density, rbar_norm=None):
        """f = (r - gamma ||Psi||^2 + F1(Rbar)) / epsilon, per sector."""
        K_X = np.asarray(K_X, dtype=float)
        if np.any(K_X <= 0):
            raise ModelError("short_term_return_f requires K_X > 0")
        if rbar_norm is None:
            rbar_norm = self.rbar_normalizer(K_X, firm_density)
        rbar = self.eval_R(K_X) / rbar_norm
        return (self.marginal_r(K_X) - self.params.gamma_c * firm_density
                + self.F1(rbar)) / self.params.epsilon

    def mobility_g(self, K_X, firm_density, rbar_norm=None):
        """g = grad_X F0(R) + nu grad_X F1(Rbar), per sector."""
        if rbar_norm is None:
            rbar_norm = self.rbar_normalizer(K_X, firm_density)
        R_field = self.eval_R(K_X)
        comp = self.F0(R_field) + self.params.nu * self.F1(R_field / rbar_norm)
        return grid_derivative(self.grid, comp, 1)
