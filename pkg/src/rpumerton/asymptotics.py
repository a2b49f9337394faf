"""Small-temperature expansion of the solve: correction fields, bias and
wealth-loss predictions, and empirical order verification.

For constant temperature lam the exponent expands as

    u = u0 + (1-gamma)(T-t)/2 * lam ln(lam) + lam u1 + lam^2 u2 + O(lam^3),

where u1 and u2 solve linear transport-diffusion equations driven by frozen
derivative fields of the lower orders.  The transport coefficient, shared by
every correction equation, is

    m + nu^2 u0_x + (1-gamma) rho nu (mu - r + rho nu sigma u0_x)/(gamma sigma),

i.e. it carries the nu^2 u0_x advection inherited from the quadratic gradient
term of the base equation.  The mean-policy value exponent psi (terminal 0,
no discounting) yields the exact indifference wealth loss
Delta = 1 - exp((psi - u0)/(1-gamma)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import hjb
from . import market as mkt
from . import pde
from .errors import DegenerateData

TWO_PI = 2.0 * np.pi


def _row_lookup(field: pde.ScalarField):
    """Exact-level row accessor for frozen fields used inside callbacks."""
    grid = field.grid

    def rows(t: float) -> np.ndarray:
        return field.values[field.time_index(t)]

    return rows


def _expansion_transport(model: mkt.MarketModel, pref: mkt.Preference,
                         u0x_rows):
    g = pref.gamma
    one_mg = 1.0 - g
    r = model.r
    rho = model.rho

    def drift(t, x):
        mu, sigma, m, nu = mkt.coefficients(model, t, x)
        u0x = u0x_rows(t)
        return (m + nu ** 2 * u0x
                + one_mg * rho * nu * (mu - r + rho * nu * sigma * u0x) / (g * sigma))

    return drift


def _linear_problem(model, drift, const):
    def diffusion(t, x):
        return mkt.coefficients(model, t, x)[3]

    return pde.SemilinearProblem(
        drift=drift, diffusion=diffusion,
        source=pde.SplitSource(const=const),
        terminal=lambda x: np.zeros_like(x))


def solve_u1(model: mkt.MarketModel, pref: mkt.Preference, u0: pde.ScalarField,
             grid: pde.Grid, opts: pde.SolverOptions | None = None) -> pde.ScalarField:
    """First-order correction: linear equation with the frozen-u0_x transport
    and source (1-gamma)/2 ln(2 pi / (gamma sigma^2))."""
    if u0.grid != grid:
        raise ValueError("u0 must be solved on the same grid")
    g = pref.gamma
    one_mg = 1.0 - g
    u0x_rows = _row_lookup(pde.derivative_x(u0))

    def const(t, x):
        sigma = mkt.coefficients(model, t, x)[1]
        return one_mg / 2.0 * np.log(TWO_PI / (g * sigma ** 2))

    problem = _linear_problem(model, _expansion_transport(model, pref, u0x_rows), const)
    return pde.solve_backward(problem, grid, opts)


def solve_u2(model: mkt.MarketModel, pref: mkt.Preference, u0: pde.ScalarField,
             u1: pde.ScalarField, grid: pde.Grid,
             opts: pde.SolverOptions | None = None) -> pde.ScalarField:
    """Second-order correction; source nu^2 (1 + (1-gamma) rho^2/gamma)/2 u1_x^2."""
    if u0.grid != grid or u1.grid != grid:
        raise ValueError("u0, u1 must be solved on the same grid")
    g = pref.gamma
    one_mg = 1.0 - g
    rho = model.rho
    u0x_rows = _row_lookup(pde.derivative_x(u0))
    u1x_rows = _row_lookup(pde.derivative_x(u1))

    def const(t, x):
        nu = mkt.coefficients(model, t, x)[3]
        u1x = u1x_rows(t)
        return 0.5 * nu ** 2 * (1.0 + one_mg * rho ** 2 / g) * u1x ** 2

    problem = _linear_problem(model, _expansion_transport(model, pref, u0x_rows), const)
    return pde.solve_backward(problem, grid, opts)


def solve_phi2(model: mkt.MarketModel, pref: mkt.Preference, u0: pde.ScalarField,
               u1: pde.ScalarField, grid: pde.Grid,
               opts: pde.SolverOptions | None = None) -> pde.ScalarField:
    """Second-order exponent correction of the mean-policy value; the
    first-order correction is identically zero (envelope property of the
    classical optimum), so this is the leading wealth-loss coefficient."""
    if u0.grid != grid or u1.grid != grid:
        raise ValueError("u0, u1 must be solved on the same grid")
    g = pref.gamma
    one_mg = 1.0 - g
    rho = model.rho
    u0x_rows = _row_lookup(pde.derivative_x(u0))
    u1x_rows = _row_lookup(pde.derivative_x(u1))

    def const(t, x):
        nu = mkt.coefficients(model, t, x)[3]
        u1x = u1x_rows(t)
        return -one_mg * rho ** 2 * nu ** 2 / (2.0 * g) * u1x ** 2

    problem = _linear_problem(model, _expansion_transport(model, pref, u0x_rows), const)
    return pde.solve_backward(problem, grid, opts)


def solve_psi(model: mkt.MarketModel, pref: mkt.Preference,
              mean_policy: pde.ScalarField, grid: pde.Grid,
              opts: pde.SolverOptions | None = None) -> pde.ScalarField:
    """Value exponent of the classical problem under a frozen deterministic
    policy a(t, x) (the mean of the randomized optimum), undiscounted.

    V(t, w, x) = (w^(1-gamma) e^psi - 1)/(1-gamma); psi = u0 when the policy
    is classically optimal.
    """
    if mean_policy.grid != grid:
        raise ValueError("mean policy must live on the solve grid")
    g = pref.gamma
    one_mg = 1.0 - g
    r = model.r
    rho = model.rho
    a_rows = _row_lookup(mean_policy)

    def drift(t, x):
        return mkt.coefficients(model, t, x)[2]

    def diffusion(t, x):
        return mkt.coefficients(model, t, x)[3]

    def ux_coeff(t, x):
        mu, sigma, _, nu = mkt.coefficients(model, t, x)
        return one_mg * rho * nu * sigma * a_rows(t)

    def const(t, x):
        mu, sigma, _, _ = mkt.coefficients(model, t, x)
        a = a_rows(t)
        return one_mg * (r + (mu - r) * a - 0.5 * g * sigma ** 2 * a ** 2)

    def nonlinear(t, x, u, ux):
        nu = mkt.coefficients(model, t, x)[3]
        return 0.5 * nu ** 2 * ux ** 2

    problem = pde.SemilinearProblem(
        drift=drift, diffusion=diffusion,
        source=pde.SplitSource(const=const, ux_coeff=ux_coeff, nonlinear=nonlinear),
        terminal=lambda x: np.zeros_like(x))
    return pde.solve_backward(problem, grid, opts)


@dataclass(frozen=True)
class ExpansionBundle:
    """Correction fields sharing one grid, plus the closed-form lam ln(lam)
    coefficient (1-gamma)(T-t)/2."""

    u0: pde.ScalarField
    u1: pde.ScalarField
    u2: pde.ScalarField
    phi2: pde.ScalarField
    gamma: float

    def lam_loglam_coefficient(self, t) -> np.ndarray:
        horizon = self.u0.grid.horizon
        return (1.0 - self.gamma) * (horizon - np.asarray(t)) / 2.0


def solve_bundle(model: mkt.MarketModel, pref: mkt.Preference, grid: pde.Grid,
                 opts: pde.SolverOptions | None = None) -> ExpansionBundle:
    u0 = hjb.solve_u0(model, pref, grid, opts)
    u1 = solve_u1(model, pref, u0, grid, opts)
    u2 = solve_u2(model, pref, u0, u1, grid, opts)
    phi2 = solve_phi2(model, pref, u0, u1, grid, opts)
    return ExpansionBundle(u0=u0, u1=u1, u2=u2, phi2=phi2, gamma=pref.gamma)


def expansion_residual(model: mkt.MarketModel, pref: mkt.Preference,
                       grid: pde.Grid, lam: float,
                       bundle: ExpansionBundle | None = None) -> float:
    """max over nodes of |u(lam) - (u0 + c(t) lam ln lam + lam u1 + lam^2 u2)|."""
    if lam <= 0.0:
        raise ValueError("lam must be positive")
    pref_lam = mkt.Preference(pref.utility, pref.gamma, lam)
    u = hjb.solve_u(model, pref_lam, grid)
    if bundle is None:
        bundle = solve_bundle(model, pref, grid)
    c = bundle.lam_loglam_coefficient(grid.t_values)[:, None]
    approx = (bundle.u0.values + c * lam * np.log(lam)
              + lam * bundle.u1.values + lam ** 2 * bundle.u2.values)
    return float(np.max(np.abs(u.values - approx)))


@dataclass
class LossReport:
    """Bias and wealth-loss fields at one temperature.

    delta_exact is the exact indifference solution of
    V0(t, w(1-Delta), x) = V_mean_policy(t, w, x), wealth-independent by
    homotheticity; delta_predicted = -lam^2 phi2/(1-gamma).  The relative
    utility loss column evaluates the leading-order formula
    lam^2 |phi2| |1 + 1/((1-gamma) V0)| at reference wealth w = 1 (set to 0
    on the terminal slice, where both values coincide).
    """

    lam: float
    grid: pde.Grid
    bias: pde.ScalarField
    predicted_bias: pde.ScalarField
    delta_exact: pde.ScalarField
    delta_predicted: pde.ScalarField
    relative_utility_loss: pde.ScalarField


def loss_report(model: mkt.MarketModel, pref: mkt.Preference, lam: float,
                grid: pde.Grid, bundle: ExpansionBundle | None = None) -> LossReport:
    if lam <= 0.0:
        raise ValueError("lam must be positive")
    g = pref.gamma
    one_mg = 1.0 - g
    if bundle is None:
        bundle = solve_bundle(model, pref, grid)
    pref_lam = mkt.Preference(pref.utility, pref.gamma, lam)
    u = hjb.solve_u(model, pref_lam, grid)
    policy = hjb.optimal_policy(u, model, pref_lam)
    classical = hjb.classical_policy(bundle.u0, model, pref)

    bias = pde.ScalarField(grid, policy.mean.values - classical.mean.values)
    u1x = pde.derivative_x(bundle.u1).values
    pred = np.empty_like(u1x)
    for i, t in enumerate(grid.t_values):
        _, sigma, _, nu = mkt.coefficients(model, float(t), grid.x_values)
        pred[i] = lam * model.rho * nu * u1x[i] / (g * sigma)
    predicted_bias = pde.ScalarField(grid, pred)

    psi = solve_psi(model, pref, policy.mean, grid)
    if g == 1.0:
        delta_exact = 1.0 - np.exp(psi.values - bundle.u0.values)
        delta_pred = -(lam ** 2) * bundle.phi2.values
    else:
        delta_exact = 1.0 - np.exp((psi.values - bundle.u0.values) / one_mg)
        delta_pred = -(lam ** 2) * bundle.phi2.values / one_mg

    # leading-order relative utility loss at w = 1; at t = T both values are
    # U(1) = 0, so the ratio is defined as 0 there
    rel = np.zeros_like(delta_exact)
    if g != 1.0:
        e_u0 = np.exp(bundle.u0.values[:-1])
        rel[:-1] = lam ** 2 * np.abs(bundle.phi2.values[:-1]) * np.abs(e_u0 / (e_u0 - 1.0))
    return LossReport(lam=lam, grid=grid, bias=bias, predicted_bias=predicted_bias,
                      delta_exact=pde.ScalarField(grid, delta_exact),
                      delta_predicted=pde.ScalarField(grid, delta_pred),
                      relative_utility_loss=pde.ScalarField(grid, rel))


def order_check(values: Mapping[float, float]) -> float:
    """Least-squares slope of ln|value| against ln(lam).

    Requires at least three temperatures; values below 1e-14 are treated as
    exact zeros and refuse a slope.
    """
    if len(values) < 3:
        raise ValueError("need at least 3 temperature points")
    lams = np.array(sorted(values))
    vals = np.array([abs(values[l]) for l in lams])
    if np.any(vals < 1e-14):
        raise DegenerateData("values at or below the zero floor; slope undefined")
    slope = np.polyfit(np.log(lams), np.log(vals), 1)[0]
    return float(slope)
