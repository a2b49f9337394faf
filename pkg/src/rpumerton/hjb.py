"""Reduced HJB solve, Gaussian optimal policy, and the classical limit.

The optimal randomized policy is Gaussian with variance lambda/(gamma sigma^2)
(exact formula) and mean equal to the myopic demand plus an intertemporal
hedging term rho nu u_x / (gamma sigma), where u solves a semilinear PDE with
terminal value zero.  Setting lambda = 0 recovers the classical Merton
exponent u0 and strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import market as mkt
from . import pde
from .errors import DegeneratePolicy, OutOfDomain, TemperatureNonPositive

TWO_PI = 2.0 * np.pi


def temperature_grid(pref: mkt.Preference, grid: pde.Grid) -> np.ndarray:
    """lambda(t, x) sampled on all grid nodes, shape (t_nodes, x_nodes)."""
    out = np.empty((grid.t_nodes, grid.x_nodes))
    for i, t in enumerate(grid.t_values):
        out[i] = pref.temperature_values(float(t), grid.x_values)
    return out


def _check_crra(pref: mkt.Preference):
    if pref.utility not in (mkt.CRRA, mkt.LOG):
        raise ValueError("solve_u handles CRRA/log preferences; use cara_solve for CARA")


def _hjb_problem(model: mkt.MarketModel, pref: mkt.Preference,
                 lam_rows, grid: pde.Grid) -> pde.SemilinearProblem:
    """Assemble the reduced equation: parabolic part (m, nu), everything else
    (including the linear u_x transport) in the lagged source."""
    g = pref.gamma
    one_mg = 1.0 - g
    r = model.r
    rho = model.rho

    def coeff(t, x):
        return mkt.coefficients(model, t, x)

    def drift(t, x):
        return coeff(t, x)[2]

    def diffusion(t, x):
        return coeff(t, x)[3]

    def const(t, x):
        mu, sigma, _, _ = coeff(t, x)
        out = one_mg * r + one_mg / (2.0 * g) * ((mu - r) / sigma) ** 2
        if lam_rows is not None:
            lam = lam_rows(t, x)
            out = out + one_mg * lam / 2.0 * np.log(TWO_PI * lam / (g * sigma ** 2))
        return out

    def nonlinear(t, x, u, ux):
        mu, sigma, _, nu = coeff(t, x)
        lin = one_mg * rho * (mu - r) * nu / (g * sigma)
        quad = 0.5 * nu ** 2 + one_mg * rho ** 2 * nu ** 2 / (2.0 * g)
        return lin * ux + quad * ux ** 2

    return pde.SemilinearProblem(
        drift=drift,
        diffusion=diffusion,
        source=pde.SplitSource(const=const, nonlinear=nonlinear),
        terminal=lambda x: np.zeros_like(x),
    )


def solve_u(model: mkt.MarketModel, pref: mkt.Preference, grid: pde.Grid,
            opts: pde.SolverOptions | None = None) -> pde.ScalarField:
    """Exponent u of the optimal value w^(1-gamma) e^u under randomization.

    Requires lambda > 0 on the whole grid; a constant lambda = 0 routes to
    :func:`solve_u0`.
    """
    _check_crra(pref)
    if pref.constant_temperature and float(pref.temperature) == 0.0:
        return solve_u0(model, pref, grid, opts)
    lam_grid = temperature_grid(pref, grid)
    if np.any(lam_grid <= 0.0):
        raise TemperatureNonPositive("temperature must be > 0 on the grid")

    def lam_rows(t, x):
        return pref.temperature_values(t, x)

    problem = _hjb_problem(model, pref, lam_rows, grid)
    return pde.solve_backward(problem, grid, opts)


def solve_u0(model: mkt.MarketModel, pref: mkt.Preference, grid: pde.Grid,
             opts: pde.SolverOptions | None = None) -> pde.ScalarField:
    """Classical Merton exponent: same assembly with the entropy term removed."""
    _check_crra(pref)
    problem = _hjb_problem(model, pref, None, grid)
    return pde.solve_backward(problem, grid, opts)


@dataclass(frozen=True)
class GaussianPolicyField:
    """Mean and variance surfaces of the Gaussian feedback policy.

    ``entropy`` is the pointwise differential entropy 0.5 ln(2 pi e Var);
    it is -inf wherever the variance is zero (degenerate classical wrapper).
    """

    grid: pde.Grid
    mean: pde.ScalarField
    variance: pde.ScalarField
    entropy: pde.ScalarField

    @property
    def degenerate(self) -> bool:
        return bool(np.all(self.variance.values == 0.0))


def _entropy_field(grid: pde.Grid, variance: np.ndarray) -> pde.ScalarField:
    with np.errstate(divide="ignore"):
        ent = 0.5 * np.log(TWO_PI * np.e * variance)
    return pde.ScalarField(grid, ent)


def _policy_from_exponent(u: pde.ScalarField, model: mkt.MarketModel,
                          pref: mkt.Preference, lam_grid) -> GaussianPolicyField:
    grid = u.grid
    g = pref.gamma
    ux = pde.derivative_x(u).values
    mean = np.empty_like(ux)
    variance = np.empty_like(ux)
    for i, t in enumerate(grid.t_values):
        mu, sigma, _, nu = mkt.coefficients(model, float(t), grid.x_values)
        mean[i] = (mu - model.r) / (g * sigma ** 2) + model.rho * nu * ux[i] / (g * sigma)
        variance[i] = lam_grid[i] / (g * sigma ** 2) if lam_grid is not None else 0.0
    return GaussianPolicyField(grid, pde.ScalarField(grid, mean),
                               pde.ScalarField(grid, variance),
                               _entropy_field(grid, variance))


def optimal_policy(u: pde.ScalarField, model: mkt.MarketModel,
                   pref: mkt.Preference) -> GaussianPolicyField:
    """Gaussian policy attached to a solved exponent field.

    Mean = (mu - r)/(gamma sigma^2) + rho nu u_x/(gamma sigma);
    Var  = lambda/(gamma sigma^2), evaluated nodewise (analytic formula).
    """
    lam_grid = temperature_grid(pref, u.grid)
    return _policy_from_exponent(u, model, pref, lam_grid)


def classical_policy(u0: pde.ScalarField, model: mkt.MarketModel,
                     pref: mkt.Preference) -> GaussianPolicyField:
    """Degenerate (zero-variance) wrapper around the classical strategy."""
    return _policy_from_exponent(u0, model, pref, None)


@dataclass(frozen=True)
class ValueSurface:
    """Optimal (or policy) value V(t, w, x) = (w^(1-gamma) e^u - 1)/(1-gamma)."""

    grid: pde.Grid
    u: pde.ScalarField
    utility: str
    gamma: float

    def __post_init__(self):
        if self.utility not in (mkt.CRRA, mkt.LOG):
            raise ValueError("ValueSurface covers CRRA/log utilities")
        if not np.all(np.isfinite(np.exp(self.u.values))):
            raise ValueError("e^u overflows on the grid")


def value_at(surface: ValueSurface, t: float, x: float, w: float) -> float:
    """Evaluate the value surface at wealth w > 0, bilinear in (t, x)."""
    if w <= 0.0:
        raise ValueError("wealth must be positive")
    u_val = surface.u.at(t, x)
    if surface.utility == mkt.LOG or surface.gamma == 1.0:
        return float(np.log(w) + u_val)
    g = surface.gamma
    return float((w ** (1.0 - g) * np.exp(u_val) - 1.0) / (1.0 - g))


def entropy_of(policy: GaussianPolicyField, t: float, x: float) -> float:
    """Differential entropy 0.5 ln(2 pi e Var(t, x)) of the policy."""
    var = policy.variance.at(t, x)
    if var <= 0.0:
        raise DegeneratePolicy(f"variance {var} at (t={t}, x={x}) is not positive")
    return float(0.5 * np.log(TWO_PI * np.e * var))
