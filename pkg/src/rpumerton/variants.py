"""Appendix-style special cases: the additive-perturbation pathology, the
wealth-dependent temperature collapse ODE, the CARA solver, and the
quadratic-BSDE driver correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from . import _kernels as kern
from . import hjb
from . import market as mkt
from . import pde
from .errors import ConditionViolated, GammaOutOfRange, StepSizeUnderflow

TWO_PI = 2.0 * np.pi
TWO_PI_E = 2.0 * np.pi * np.e


# ---------------------------------------------------------------------------
# additive perturbation: unbounded objective for gamma in (0, 1)
# ---------------------------------------------------------------------------

@dataclass
class ApuSweep:
    """Lower bound L(v) = (lam T / 2) ln(2 pi e v) - 1/(1-gamma) of the
    additive objective under a centered Gaussian policy of variance v.

    L is strictly increasing and unbounded in v, so the additive formulation
    has infinite optimal value for gamma in (0, 1).  The witness variance
    achieving a target level is reported in log space (it overflows floats
    for interesting targets): log_v_star = 2 (target + 1/(1-gamma))/(lam T)
    - ln(2 pi e).
    """

    gamma: float
    lam: float
    horizon: float
    v_grid: np.ndarray
    bound_values: np.ndarray
    threshold: Optional[float] = None
    log_v_star: Optional[float] = None

    def bound_at_log_v(self, log_v: float) -> float:
        return (self.lam * self.horizon / 2.0) * (np.log(TWO_PI_E) + log_v) \
            - 1.0 / (1.0 - self.gamma)


def apu_divergence_demo(gamma: float, lam: float, horizon: float,
                        v_grid: Sequence[float],
                        threshold: Optional[float] = None) -> ApuSweep:
    """Evaluate the divergence witness; gamma must lie in (0, 1)."""
    if not 0.0 < gamma < 1.0:
        raise GammaOutOfRange(f"demonstration applies to gamma in (0,1), got {gamma}")
    if lam <= 0.0 or horizon <= 0.0:
        raise ValueError("lam and horizon must be positive")
    v = np.asarray(list(v_grid), dtype=float)
    if v.ndim != 1 or len(v) < 2 or np.any(np.diff(v) <= 0.0) or v[0] <= 0.0:
        raise ValueError("v_grid must be increasing and positive")
    bounds = (lam * horizon / 2.0) * np.log(TWO_PI_E * v) - 1.0 / (1.0 - gamma)
    if np.any(np.diff(bounds) <= 0.0):
        raise AssertionError("lower bound failed to increase strictly")
    log_v_star = None
    if threshold is not None:
        log_v_star = 2.0 * (threshold + 1.0 / (1.0 - gamma)) / (lam * horizon) \
            - np.log(TWO_PI_E)
    return ApuSweep(gamma=gamma, lam=lam, horizon=horizon, v_grid=v,
                    bound_values=bounds, threshold=threshold,
                    log_v_star=log_v_star)


# ---------------------------------------------------------------------------
# wealth-dependent temperature: phi' = a phi + b - c ln(phi), phi(0) = 1
# ---------------------------------------------------------------------------

SURVIVED = "survived"
HIT_ZERO = "hit_zero"

_ZERO_THRESHOLD = 1e-8
_REFINE_THRESHOLD = 1e-6


def _ode_coefficients(r, mu, sigma, gamma, lam):
    a = (1.0 - gamma) * (r + (mu - r) ** 2 / (2.0 * gamma * sigma ** 2))
    b = (1.0 - gamma) * (lam / 2.0) * np.log(TWO_PI * lam / (gamma * sigma ** 2))
    c = (1.0 - gamma) * lam / 2.0
    return a, b, c


@dataclass
class OdeResult:
    a: float
    b: float
    c: float
    taus: np.ndarray
    phis: np.ndarray
    outcome: str
    tau_star: Optional[float]
    phi_final: float


def _f(a, b, c, y):
    return a * y + b - c * np.log(y)


def wealth_temperature_ode(r: float, mu: float, sigma: float, gamma: float,
                           lam: float, horizon: float,
                           dt: float = 1e-4) -> OdeResult:
    """Integrate the terminal-value factor phi backward-time variable tau.

    Classic fixed-step RK4; once phi drops under 1e-6 the endgame is resolved
    by halved sub-steps and bisection down to the 1e-8 zero threshold (ln phi
    is too stiff there for the fixed step).
    """
    if gamma <= 0.0 or gamma == 1.0:
        raise GammaOutOfRange("gamma must be positive and != 1")
    if lam <= 0.0 or sigma <= 0.0 or horizon <= 0.0 or dt <= 0.0:
        raise ValueError("lam, sigma, horizon, dt must be positive")
    a, b, c = _ode_coefficients(r, mu, sigma, gamma, lam)
    n_steps = int(np.ceil(horizon / dt))
    phis = np.empty(n_steps + 1)
    reached, phi_last, stopped = kern.rk4_collapse(a, b, c, dt, n_steps,
                                                   1.0, _REFINE_THRESHOLD, phis)
    taus = np.arange(reached + 1) * dt
    phis = phis[:reached + 1]
    if not stopped:
        # fixed-step integration ran to the horizon; trim overshoot of the
        # ceil-ed step count (last partial step integrated separately)
        over = n_steps * dt - horizon
        if over > 1e-15:
            last = _rk4_span(a, b, c, phis[-2], dt - over, 4)
            phis[-1] = last
            taus[-1] = horizon
        return OdeResult(a, b, c, taus, phis, SURVIVED, None, float(phis[-1]))

    # endgame: advance with halved sub-steps until the zero threshold
    tau = taus[-1]
    phi = phi_last
    sub = dt
    while phi > _ZERO_THRESHOLD:
        if tau >= horizon:
            return OdeResult(a, b, c, taus, phis, SURVIVED, None, float(phi))
        if sub < 1e-18:
            raise StepSizeUnderflow("collapse endgame stalled")
        trial = _rk4_span(a, b, c, phi, sub, 1)
        if not np.isfinite(trial) or trial <= 0.0 or trial <= _ZERO_THRESHOLD * 0.5:
            sub *= 0.5
            continue
        phi = trial
        tau += sub
    return OdeResult(a, b, c, taus, phis, HIT_ZERO, float(tau), float(phi))


def _rk4_span(a, b, c, y0, span, n_sub):
    h = span / n_sub
    y = y0
    for _ in range(n_sub):
        f1 = _f(a, b, c, y)
        y2 = y + 0.5 * h * f1
        if y2 <= 0.0:
            return -1.0
        f2 = _f(a, b, c, y2)
        y3 = y + 0.5 * h * f2
        if y3 <= 0.0:
            return -1.0
        f3 = _f(a, b, c, y3)
        y4 = y + h * f3
        if y4 <= 0.0:
            return -1.0
        f4 = _f(a, b, c, y4)
        y = y + h / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        if y <= 0.0:
            return -1.0
    return y


def _osgood_time(a: float, b: float, c: float) -> float:
    """Explosion time -int_0^inf dz / (a + b e^z + c z e^z).

    Requires the integrand denominator to stay strictly negative; the
    substitution z = -ln(1-s) maps the half-line onto s in [0, 1).
    """
    # denominator h(z) = a + e^z (b + c z); its maximum over z >= 0 must be < 0
    critical = [0.0]
    if c != 0.0:
        zc = -(b + c) / c
        if zc > 0.0:
            critical.append(zc)
    h = lambda z: a + np.exp(z) * (b + c * z)
    if max(h(z) for z in critical) >= 0.0 or c >= 0.0:
        raise ConditionViolated("integrand denominator is not negative on [0, inf)")

    def integrand(s):
        z = -np.log1p(-s)
        return -1.0 / ((1.0 - s) * h(z))

    val, _ = integrate.quad(integrand, 0.0, 1.0 - 1e-16, limit=400)
    return float(val)


def explosion_time_quadrature(r: float, mu: float, sigma: float, gamma: float,
                              lam: float) -> float:
    """Finite collapse time via the Osgood integral.

    Premise: gamma > 1 and F(y) = a y + b - c ln(y) < 0 on (0, 1]; raises
    ConditionViolated otherwise.
    """
    if gamma <= 1.0:
        raise ConditionViolated("premise needs gamma > 1")
    a, b, c = _ode_coefficients(r, mu, sigma, gamma, lam)
    # sup of F over (0, 1]: F' = a - c/y vanishes at y = c/a
    candidates = [1.0]
    if a != 0.0 and c != 0.0:
        ystar = c / a
        if 0.0 < ystar < 1.0:
            candidates.append(ystar)
    if max(_f(a, b, c, y) for y in candidates) >= 0.0:
        raise ConditionViolated("F is not negative on (0, 1]")
    return _osgood_time(a, b, c)


# ---------------------------------------------------------------------------
# CARA utility (dollar-amount control)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaraSolution:
    """Exponent field and dollar-unit Gaussian policy for exponential utility.

    Var(t, x) = lam/(gamma^2 sigma^2) e^{-2 r (T - t)} exactly;
    V(t, w, x) = -(1/gamma) exp(-gamma u - gamma e^{r (T-t)} w) < 0.
    """

    model: mkt.MarketModel
    gamma: float
    lam: float
    u: pde.ScalarField
    mean: pde.ScalarField
    variance: pde.ScalarField

    def value_at(self, t: float, x: float, w: float) -> float:
        u_val = self.u.at(t, x)
        disc = np.exp(self.model.r * (self.model.horizon - t))
        return float(-np.exp(-self.gamma * u_val - self.gamma * disc * w) / self.gamma)


def cara_solve(model: mkt.MarketModel, gamma_abs: float, lam: float,
               grid: pde.Grid, opts: pde.SolverOptions | None = None) -> CaraSolution:
    """Solve the CARA exponent equation and build the dollar policy.

    Mean = ((mu-r)/(gamma sigma^2) - rho nu u_x / sigma) e^{-r(T-t)}; the
    gradient terms enter the equation as -(gamma/2) nu^2 (1 - rho^2) u_x^2
    after expanding the completed square, with the linear part implicit.
    """
    if gamma_abs <= 0.0:
        raise GammaOutOfRange("CARA risk aversion must be positive")
    if lam <= 0.0:
        raise ValueError("lam must be positive (constant temperature)")
    g = gamma_abs
    r = model.r
    rho = model.rho
    horizon = model.horizon

    def drift(t, x):
        return mkt.coefficients(model, t, x)[2]

    def diffusion(t, x):
        return mkt.coefficients(model, t, x)[3]

    def const(t, x):
        mu, sigma, _, _ = mkt.coefficients(model, t, x)
        return ((mu - r) ** 2 / (2.0 * g * sigma ** 2)
                + lam / (2.0 * g) * (np.log(TWO_PI * lam / (g ** 2 * sigma ** 2))
                                     - 2.0 * r * (horizon - t)))

    def ux_coeff(t, x):
        mu, sigma, _, nu = mkt.coefficients(model, t, x)
        return -(mu - r) * rho * nu / sigma

    def nonlinear(t, x, u, ux):
        nu = mkt.coefficients(model, t, x)[3]
        return -0.5 * g * nu ** 2 * (1.0 - rho ** 2) * ux ** 2

    problem = pde.SemilinearProblem(
        drift=drift, diffusion=diffusion,
        source=pde.SplitSource(const=const, ux_coeff=ux_coeff, nonlinear=nonlinear),
        terminal=lambda x: np.zeros_like(x))
    u = pde.solve_backward(problem, grid, opts)

    ux = pde.derivative_x(u).values
    mean = np.empty_like(ux)
    var = np.empty_like(ux)
    for i, t in enumerate(grid.t_values):
        mu, sigma, _, nu = mkt.coefficients(model, float(t), grid.x_values)
        disc = np.exp(-r * (horizon - float(t)))
        mean[i] = ((mu - r) / (g * sigma ** 2) - rho * nu * ux[i] / sigma) * disc
        var[i] = lam / (g ** 2 * sigma ** 2) * disc ** 2
    return CaraSolution(model=model, gamma=g, lam=lam, u=u,
                        mean=pde.ScalarField(grid, mean),
                        variance=pde.ScalarField(grid, var))


# ---------------------------------------------------------------------------
# quadratic BSDE driver correspondence
# ---------------------------------------------------------------------------

def bsde_residual(model: mkt.MarketModel, pref: mkt.Preference,
                  u: pde.ScalarField, lam: float,
                  interior_band: float = 0.0) -> float:
    """Feynman-Kac residual of the driver representation with Y = u,
    Z = nu u_x taken nodewise from the solved field.

    driver f(t, x, Z) = (1-gamma)[lam/2 ln(2 pi lam/(gamma sigma^2)) + r
                        + (mu - r + rho sigma Z)^2/(2 gamma sigma^2)] + Z^2/2;
    residual = max interior |u_t + m u_x + nu^2 u_xx / 2 + f|, which by the
    expansion of the squared term coincides with the residual of the base
    equation.  ``interior_band`` trims that fraction of the x-range at each
    side before taking the max (boundary-closure influence decays inward).
    """
    g = pref.gamma
    one_mg = 1.0 - g
    grid = u.grid
    ux = pde.derivative_x(u).values
    ut = pde.derivative_t(u).values
    dx = grid.dx
    uxx = np.empty_like(u.values)
    uxx[:, 1:-1] = (u.values[:, 2:] - 2.0 * u.values[:, 1:-1] + u.values[:, :-2]) / dx ** 2
    res = np.empty_like(u.values)
    for i, t in enumerate(grid.t_values):
        mu, sigma, m, nu = mkt.coefficients(model, float(t), grid.x_values)
        z = nu * ux[i]
        driver = one_mg * (lam / 2.0 * np.log(TWO_PI * lam / (g * sigma ** 2))
                           + model.r
                           + (mu - model.r + model.rho * sigma * z) ** 2
                           / (2.0 * g * sigma ** 2)) + 0.5 * z ** 2
        res[i] = ut[i] + m * ux[i] + driver
        nu_arr = np.broadcast_to(nu, grid.x_values.shape)
        res[i, 1:-1] += 0.5 * nu_arr[1:-1] ** 2 * uxx[i, 1:-1]
    lo = 1 + int(interior_band * grid.x_nodes)
    hi = grid.x_nodes - 1 - int(interior_band * grid.x_nodes)
    return float(np.max(np.abs(res[:, lo:hi])))
