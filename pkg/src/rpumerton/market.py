"""Market and preference specifications shared by all solvers and simulators.

A market model bundles the risk-free rate, the stock/factor coefficient
functions mu, sigma, m, nu, the stock-factor correlation rho and the horizon.
Models come in named parametric families (evaluable without callbacks, so the
simulation kernels can inline them) plus a fully general callback family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonPositiveSigma

BLACK_SCHOLES = "black_scholes"
FACTOR_PREMIUM = "factor_premium"
STOCH_VOL = "stoch_vol"
CUSTOM = "custom"

Coefficient = Callable[[float, float], float]


@dataclass(frozen=True)
class MarketModel:
    """One stock, one observable factor, correlation rho between their drivers.

    Use the family constructors (:func:`black_scholes`, :func:`factor_premium`,
    :func:`stoch_vol`, :func:`custom`) rather than building instances by hand.
    """

    family: str
    r: float
    rho: float
    horizon: float
    mu_const: float = 0.0
    sigma_const: float = 0.0
    kappa: float = 0.0
    theta: float = 0.0
    nu_const: float = 0.0
    eta: float = 0.0
    mu_fn: Optional[Coefficient] = None
    sigma_fn: Optional[Coefficient] = None
    m_fn: Optional[Coefficient] = None
    nu_fn: Optional[Coefficient] = None

    def kernel_params(self) -> np.ndarray:
        """Family parameters packed for the simulation kernels."""
        if self.family == BLACK_SCHOLES:
            return np.array([self.mu_const, self.sigma_const, 0.0, 0.0])
        if self.family == FACTOR_PREMIUM:
            return np.array([self.sigma_const, self.kappa, self.theta, self.nu_const])
        if self.family == STOCH_VOL:
            return np.array([self.eta, self.kappa, self.theta, self.nu_const])
        raise ValueError("custom models have no packed kernel parameters")


def black_scholes(mu: float, sigma: float, r: float, horizon: float, rho: float = 0.0) -> MarketModel:
    """Constant-coefficient market; the factor is frozen (m = nu = 0)."""
    if sigma <= 0.0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    return MarketModel(BLACK_SCHOLES, r=r, rho=rho, horizon=horizon,
                       mu_const=mu, sigma_const=sigma)


def factor_premium(sigma: float, kappa: float, theta: float, nu: float,
                   r: float, horizon: float, rho: float) -> MarketModel:
    """Linear risk premium mu = r + sigma*x with an OU factor.

    The instantaneous Sharpe ratio (mu - r)/sigma equals the factor level x.
    """
    if sigma <= 0.0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    if kappa <= 0.0 or nu <= 0.0:
        raise ValueError("kappa and nu must be positive")
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    return MarketModel(FACTOR_PREMIUM, r=r, rho=rho, horizon=horizon,
                       sigma_const=sigma, kappa=kappa, theta=theta, nu_const=nu)


def stoch_vol(eta: float, kappa: float, theta: float, nu: float,
              r: float, horizon: float, rho: float) -> MarketModel:
    """Stochastic volatility sigma = exp(x) with mu = r + eta*exp(x).

    The exponential link keeps sigma positive for every factor level.
    """
    if kappa <= 0.0 or nu <= 0.0:
        raise ValueError("kappa and nu must be positive")
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    return MarketModel(STOCH_VOL, r=r, rho=rho, horizon=horizon,
                       eta=eta, kappa=kappa, theta=theta, nu_const=nu)


def custom(mu: Coefficient, sigma: Coefficient, m: Coefficient, nu: Coefficient,
           r: float, horizon: float, rho: float) -> MarketModel:
    """Market with user-supplied scalar coefficient callbacks (t, x) -> value."""
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    return MarketModel(CUSTOM, r=r, rho=rho, horizon=horizon,
                       mu_fn=mu, sigma_fn=sigma, m_fn=m, nu_fn=nu)


def coefficients(model: MarketModel, t: float, x):
    """Vectorized coefficient evaluation: returns (mu, sigma, m, nu).

    ``x`` may be a scalar or an ndarray; results broadcast to its shape.
    No positivity check here -- use :func:`eval_coefficients` for the
    checked scalar entry point.
    """
    x = np.asarray(x, dtype=float)
    if model.family == BLACK_SCHOLES:
        shape = np.broadcast_shapes(x.shape, ())
        mu = np.broadcast_to(np.float64(model.mu_const), shape)
        sigma = np.broadcast_to(np.float64(model.sigma_const), shape)
        zero = np.zeros(shape)
        return mu, sigma, zero, zero
    if model.family == FACTOR_PREMIUM:
        mu = model.r + model.sigma_const * x
        sigma = np.broadcast_to(np.float64(model.sigma_const), x.shape)
        m = model.kappa * (model.theta - x)
        nu = np.broadcast_to(np.float64(model.nu_const), x.shape)
        return mu, sigma, m, nu
    if model.family == STOCH_VOL:
        sigma = np.exp(x)
        mu = model.r + model.eta * sigma
        m = model.kappa * (model.theta - x)
        nu = np.broadcast_to(np.float64(model.nu_const), x.shape)
        return mu, sigma, m, nu
    # custom callbacks: try array evaluation, fall back to scalar vectorize
    out = []
    for fn in (model.mu_fn, model.sigma_fn, model.m_fn, model.nu_fn):
        try:
            val = np.asarray(fn(t, x), dtype=float)
            if val.shape not in ((), x.shape):
                raise ValueError
        except Exception:
            val = np.vectorize(fn, otypes=[float])(t, x)
        out.append(np.broadcast_to(val, x.shape))
    return tuple(out)


def eval_coefficients(model: MarketModel, t: float, x: float):
    """Evaluate (mu, sigma, m, nu) at a single point, enforcing sigma > 0."""
    if not 0.0 <= t <= model.horizon:
        raise ValueError(f"t={t} outside [0, {model.horizon}]")
    mu, sigma, m, nu = coefficients(model, t, x)
    sigma_val = float(sigma)
    if sigma_val <= 0.0:
        raise NonPositiveSigma(f"sigma({t}, {x}) = {sigma_val} <= 0")
    return float(mu), sigma_val, float(m), float(nu)


@dataclass
class ValidationReport:
    ok: bool
    issues: list
    coefficient_ranges: dict


def validate_model(model: MarketModel, grid) -> ValidationReport:
    """Scan all grid nodes; collect every violation instead of aborting.

    Checks sigma > 0, finiteness of all four coefficients, and |rho| < 1.
    """
    issues = []
    if not np.isfinite(model.rho) or abs(model.rho) >= 1.0:
        issues.append(f"CorrelationOutOfRange: rho={model.rho} not in (-1, 1)")
    if model.horizon <= 0.0:
        issues.append(f"horizon={model.horizon} must be positive")

    names = ("mu", "sigma", "m", "nu")
    lo = {n: np.inf for n in names}
    hi = {n: -np.inf for n in names}
    bad_sigma_nodes = []
    nonfinite_nodes = []
    for t in grid.t_values:
        vals = coefficients(model, float(t), grid.x_values)
        for name, arr in zip(names, vals):
            arr = np.asarray(arr, dtype=float)
            lo[name] = min(lo[name], float(np.min(arr)))
            hi[name] = max(hi[name], float(np.max(arr)))
            bad = ~np.isfinite(arr)
            if bad.any():
                for i in np.nonzero(bad)[0][:5]:
                    nonfinite_nodes.append((name, float(t), float(grid.x_values[i])))
        sigma_arr = np.asarray(vals[1], dtype=float)
        bad = sigma_arr <= 0.0
        if bad.any():
            for i in np.nonzero(bad)[0][:5]:
                bad_sigma_nodes.append((float(t), float(grid.x_values[i])))
    if bad_sigma_nodes:
        issues.append(f"NonPositiveSigma at nodes (first few): {bad_sigma_nodes[:5]}")
    if nonfinite_nodes:
        issues.append(f"non-finite coefficients at nodes (first few): {nonfinite_nodes[:5]}")
    ranges = {n: (lo[n], hi[n]) for n in names}
    return ValidationReport(ok=not issues, issues=issues, coefficient_ranges=ranges)


CRRA = "crra"
LOG = "log"
CARA = "cara"

Temperature = "float | Callable[[float, float], float]"


@dataclass(frozen=True)
class Preference:
    """Bequest utility plus the temperature weighting the taste for randomization.

    ``temperature`` is either a nonnegative constant (zero means the classical
    problem) or a callback (t, x) -> positive value.  Log utility is the
    gamma -> 1 member of the CRRA family: every (1 - gamma) prefactor is an
    exact zero and U(w) = ln(w).
    """

    utility: str
    gamma: float
    temperature: object = 0.0

    def __post_init__(self):
        if self.utility not in (CRRA, LOG, CARA):
            raise ValueError(f"unknown utility kind {self.utility!r}")
        if self.utility == LOG:
            object.__setattr__(self, "gamma", 1.0)
        elif self.gamma <= 0.0:
            raise ValueError("gamma must be positive")
        elif self.utility == CRRA and self.gamma == 1.0:
            raise ValueError("CRRA requires gamma != 1; use utility='log'")
        if not callable(self.temperature) and float(self.temperature) < 0.0:
            raise ValueError("constant temperature must be >= 0")

    @property
    def constant_temperature(self) -> bool:
        return not callable(self.temperature)

    def temperature_values(self, t: float, x) -> np.ndarray:
        """Temperature lambda(t, x) over an array of factor levels."""
        x = np.asarray(x, dtype=float)
        if self.constant_temperature:
            return np.full(x.shape, float(self.temperature))
        return np.vectorize(self.temperature, otypes=[float])(t, x)

    def bequest_utility(self, w):
        """U(w): CRRA normalized so U(1) = 0, log, or CARA."""
        w = np.asarray(w, dtype=float)
        if self.utility == LOG:
            return np.log(w)
        if self.utility == CRRA:
            g = self.gamma
            return (np.power(w, 1.0 - g) - 1.0) / (1.0 - g)
        return -np.exp(-self.gamma * w) / self.gamma


def crra(gamma: float, temperature=0.0) -> Preference:
    return Preference(CRRA, gamma, temperature)


def log_utility(temperature=0.0) -> Preference:
    return Preference(LOG, 1.0, temperature)


def cara(gamma: float, temperature=0.0) -> Preference:
    return Preference(CARA, gamma, temperature)
