"""Euler-Maruyama simulation and Monte Carlo estimation of the recursive
utility, plus the linear policy-value PDE and admissibility diagnostics.

Wealth is integrated in log space, so every simulated wealth path is positive
by construction and the constant-coefficient oracles are bias-free.  All
randomness flows through the counter-based generator in :mod:`.noise`; the
factor and the wealth share the stock driver B, the factor adds an
independent driver, and policy randomization adds a third.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as kern
from . import hjb
from . import market as mkt
from . import noise
from . import pde
from .errors import DegeneratePolicy, NonFinitePath, NonPositiveSigma

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    dt: float
    seed: int
    w0: float = 1.0
    x0: float = 0.0
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.w0 <= 0.0:
            raise ValueError("w0 must be positive")
        if self.antithetic and (self.n_paths < 2 or self.n_paths % 2):
            raise ValueError("antithetic pairing needs an even n_paths >= 2")

    def n_steps(self, horizon: float) -> int:
        n = int(round(horizon / self.dt))
        if n < 1 or abs(n * self.dt - horizon) > 1e-12 * max(1.0, horizon):
            raise ValueError(f"dt={self.dt} does not divide horizon={horizon}")
        return n


@dataclass
class PathEnsemble:
    """Simulated trajectories indexed (path, time node).

    ``K`` is the endogenous-discount integral of lambda (1-gamma) H along the
    path; it is None when entropy was not accumulated.  ``diagnostics`` holds
    per-path integrability accumulators when they were requested.
    """

    t_values: np.ndarray
    X: np.ndarray
    W: Optional[np.ndarray]
    K: Optional[np.ndarray]
    seed: int
    scheme: str
    diagnostics: Optional[dict] = None
    noise_streams: Optional[dict] = None


@dataclass(frozen=True)
class McEstimate:
    mean: float
    standard_error: float
    n_paths: int

    @property
    def half_width(self) -> float:
        """Three-standard-error confidence half-width."""
        return 3.0 * self.standard_error


def _mc_stats(payoffs: np.ndarray, antithetic: bool, n_paths: int) -> McEstimate:
    if antithetic:
        half = payoffs.shape[0] // 2
        vals = 0.5 * (payoffs[:half] + payoffs[half:])
    else:
        vals = payoffs
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / np.sqrt(vals.shape[0])) if vals.shape[0] > 1 else 0.0
    return McEstimate(mean=mean, standard_error=se, n_paths=n_paths)


def _coeff_arrays(model: mkt.MarketModel, t: float, x: np.ndarray):
    mu, sig, m, nu = mkt.coefficients(model, t, x)
    out = []
    for a in (mu, sig, m, nu):
        arr = np.asarray(a, dtype=np.float64)
        if arr.shape != x.shape or not arr.flags.c_contiguous or arr.base is not None:
            arr = np.ascontiguousarray(np.broadcast_to(arr, x.shape), dtype=np.float64)
        out.append(arr)
    if np.min(out[1]) <= 0.0:
        raise NonPositiveSigma(f"sigma <= 0 along simulated paths at t={t:.6g}")
    return out


def _field_row(fld: pde.ScalarField, t: float) -> np.ndarray:
    return np.ascontiguousarray(fld.interp_row(min(t, fld.grid.horizon)))


class _PolicyRows:
    """Per-step policy surface rows (time-interpolated, contiguous)."""

    def __init__(self, policy: hjb.GaussianPolicyField, with_entropy: bool):
        self.policy = policy
        self.with_entropy = with_entropy
        g = policy.grid
        self.x_lo = g.x_lo
        self.inv_dx = 1.0 / g.dx
        self._empty = np.zeros(g.x_nodes)

    def at(self, t: float):
        mean = _field_row(self.policy.mean, t)
        var = _field_row(self.policy.variance, t)
        ent = _field_row(self.policy.entropy, t) if self.with_entropy else self._empty
        return mean, var, ent


def _lambda_row(pref: mkt.Preference, t: float, x_values: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pref.temperature_values(t, x_values), dtype=np.float64)


def _check_finite(name: str, *arrays):
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFinitePath(f"non-finite values in {name}")


def simulate_factor(model: mkt.MarketModel, cfg: SimConfig) -> PathEnsemble:
    """Euler-Maruyama factor paths X under the OU/custom factor dynamics."""
    n_steps = cfg.n_steps(model.horizon)
    dt, sdt = cfg.dt, np.sqrt(cfg.dt)
    srho = np.sqrt(1.0 - model.rho ** 2)
    X = np.full(cfg.n_paths, float(cfg.x0))
    out = np.empty((cfg.n_paths, n_steps + 1))
    out[:, 0] = X
    for k in range(n_steps):
        t = k * dt
        _, _, m, nu = _coeff_arrays(model, t, X)
        zb, zbt, _ = noise.step_normals(cfg.seed, k, cfg.n_paths, cfg.antithetic)
        kern.step_factor(X, m, nu, zb, zbt, model.rho, srho, dt, sdt)
        out[:, k + 1] = X
    _check_finite("factor paths", out)
    t_values = np.arange(n_steps + 1) * dt
    return PathEnsemble(t_values=t_values, X=out, W=None, K=None,
                        seed=cfg.seed, scheme="euler-maruyama")


def _run_exploratory(model, pref, policy, cfg, *, record, track_payoff,
                     track_diag, accumulate_entropy, keep_noise=False):
    n_steps = cfg.n_steps(model.horizon)
    n = cfg.n_paths
    dt, sdt = cfg.dt, np.sqrt(cfg.dt)
    srho = np.sqrt(1.0 - model.rho ** 2)
    g = pref.gamma
    one_mg = 1.0 - g
    abs_one_mg = abs(one_mg)

    if accumulate_entropy and np.min(policy.variance.values) <= 0.0:
        raise DegeneratePolicy("entropy accumulation requires variance > 0 everywhere")

    rows = _PolicyRows(policy, accumulate_entropy)
    X = np.full(n, float(cfg.x0))
    lnW = np.full(n, float(np.log(cfg.w0)))
    K = np.zeros(n)
    pay = np.zeros(n)
    diag = np.zeros((3, n))

    rec_X = rec_W = rec_K = None
    if record:
        rec_X = np.empty((n, n_steps + 1))
        rec_W = np.empty((n, n_steps + 1))
        rec_K = np.empty((n, n_steps + 1)) if accumulate_entropy else None
        rec_X[:, 0] = X
        rec_W[:, 0] = cfg.w0
        if rec_K is not None:
            rec_K[:, 0] = 0.0
    kept = {"dB": [], "dBt": [], "dBb": []} if keep_noise else None

    x_grid = policy.grid.x_values
    for k in range(n_steps):
        t = k * dt
        mu, sig, m, nu = _coeff_arrays(model, t, X)
        mean_row, var_row, ent_row = rows.at(t)
        lam_row = _lambda_row(pref, t, x_grid) if accumulate_entropy else rows._empty
        zb, zbt, zbb = noise.step_normals(cfg.seed, k, n, cfg.antithetic)
        if keep_noise:
            kept["dB"].append(zb * sdt)
            kept["dBt"].append(zbt * sdt)
            kept["dBb"].append(zbb * sdt)
        kern.step_exploratory(X, lnW, K, pay, diag, mu, sig, m, nu,
                              mean_row, var_row, ent_row, lam_row,
                              rows.x_lo, rows.inv_dx, zb, zbt, zbb,
                              model.r, model.rho, srho, one_mg, abs_one_mg,
                              dt, sdt, accumulate_entropy, track_payoff, track_diag)
        if record:
            rec_X[:, k + 1] = X
            rec_W[:, k + 1] = np.exp(lnW)
            if rec_K is not None:
                rec_K[:, k + 1] = K
    _check_finite("exploratory paths", X, lnW, K if accumulate_entropy else None)

    result = {
        "X": X, "lnW": lnW, "K": K, "pay": pay, "diag": diag,
        "n_steps": n_steps,
    }
    if record:
        t_values = np.arange(n_steps + 1) * dt
        noise_streams = None
        if keep_noise:
            noise_streams = {k_: np.column_stack(v) for k_, v in kept.items()}
        diagnostics = None
        if track_diag:
            diagnostics = {"int_sigma2_m2v": diag[0], "int_abs_mu_mean": diag[1],
                           "int_2lam_abs_entropy": diag[2]}
        result["ensemble"] = PathEnsemble(
            t_values=t_values, X=rec_X, W=rec_W, K=rec_K, seed=cfg.seed,
            scheme="euler-maruyama/log-wealth", diagnostics=diagnostics,
            noise_streams=noise_streams)
    return result


def simulate_exploratory_wealth(model: mkt.MarketModel, pref: mkt.Preference,
                                policy: hjb.GaussianPolicyField, cfg: SimConfig,
                                accumulate_entropy: bool = True,
                                track_diagnostics: bool = False,
                                keep_noise: bool = False) -> PathEnsemble:
    """Randomized-control wealth paths with the policy's extra diffusion.

    d ln W = [r + (mu-r) M - sigma^2 (M^2 + V)/2] dt + sigma M dB
             + sigma sqrt(V) dBbar,

    with M, V interpolated at (t, X_t).  K accumulates
    lambda (1-gamma) H(pi) dt by left-endpoint quadrature unless
    ``accumulate_entropy`` is off (required for degenerate policies).
    """
    out = _run_exploratory(model, pref, policy, cfg, record=True,
                           track_payoff=False, track_diag=track_diagnostics,
                           accumulate_entropy=accumulate_entropy,
                           keep_noise=keep_noise)
    return out["ensemble"]


def simulate_classical_wealth(model: mkt.MarketModel, a_field: pde.ScalarField,
                              cfg: SimConfig) -> PathEnsemble:
    """Wealth paths under a deterministic feedback fraction a(t, x)."""
    n_steps = cfg.n_steps(model.horizon)
    n = cfg.n_paths
    dt, sdt = cfg.dt, np.sqrt(cfg.dt)
    srho = np.sqrt(1.0 - model.rho ** 2)
    x_lo = a_field.grid.x_lo
    inv_dx = 1.0 / a_field.grid.dx
    X = np.full(n, float(cfg.x0))
    lnW = np.full(n, float(np.log(cfg.w0)))
    rec_X = np.empty((n, n_steps + 1))
    rec_W = np.empty((n, n_steps + 1))
    rec_X[:, 0] = X
    rec_W[:, 0] = cfg.w0
    for k in range(n_steps):
        t = k * dt
        mu, sig, m, nu = _coeff_arrays(model, t, X)
        a_row = _field_row(a_field, t)
        zb, zbt, _ = noise.step_normals(cfg.seed, k, n, cfg.antithetic)
        kern.step_classical(X, lnW, mu, sig, m, nu, a_row, x_lo, inv_dx,
                            zb, zbt, model.r, model.rho, srho, dt, sdt)
        rec_X[:, k + 1] = X
        rec_W[:, k + 1] = np.exp(lnW)
    _check_finite("classical paths", rec_X, rec_W)
    t_values = np.arange(n_steps + 1) * dt
    return PathEnsemble(t_values=t_values, X=rec_X, W=rec_W, K=None,
                        seed=cfg.seed, scheme="euler-maruyama/log-wealth")


def _bequest_from_logw(pref: mkt.Preference, lnW: np.ndarray) -> np.ndarray:
    if pref.utility == mkt.LOG:
        return lnW.copy()
    g = pref.gamma
    with np.errstate(over="ignore"):
        return (np.exp((1.0 - g) * lnW) - 1.0) / (1.0 - g)


def estimate_rpu(model: mkt.MarketModel, pref: mkt.Preference,
                 policy: hjb.GaussianPolicyField, cfg: SimConfig) -> McEstimate:
    """Monte Carlo estimate of the recursive utility at (0, w0, x0).

    Per-path payoff: integral of e^K lambda H dt (left endpoints) plus
    e^{K_T} U(W_T).  Streaming over steps, so path count is limited by time,
    not memory.
    """
    out = _run_exploratory(model, pref, policy, cfg, record=False,
                           track_payoff=True, track_diag=False,
                           accumulate_entropy=True)
    payoff = out["pay"] + np.exp(out["K"]) * _bequest_from_logw(pref, out["lnW"])
    _check_finite("payoff", payoff)
    return _mc_stats(payoff, cfg.antithetic, cfg.n_paths)


@dataclass
class DiagnosticEntry:
    name: str
    value: Optional[float]
    ok: bool
    note: str = ""


@dataclass
class DiagnosticReport:
    entries: list
    status: str  # PASS | PASS_WITH_NOTE | FAIL

    def entry(self, name: str) -> DiagnosticEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


_ADMISSIBILITY_CAP = 1e12


def admissibility_diagnostic(model: mkt.MarketModel, pref: mkt.Preference,
                             policy: hjb.GaussianPolicyField,
                             cfg: SimConfig) -> DiagnosticReport:
    """Sampled estimates of the admissibility integrability quantities.

    Report-only: estimates of E[int sigma^2 (M^2+V) ds], E[int |mu M| ds],
    E[exp(int 2 lambda |1-gamma| |H| ds)] and E[U(W_T)^2]; any non-finite or
    > 1e12 estimate flags FAIL.  A degenerate (zero-variance) policy skips the
    entropy moment and reports PASS with a note.
    """
    degenerate = bool(np.min(policy.variance.values) <= 0.0)
    out = _run_exploratory(model, pref, policy, cfg, record=False,
                           track_payoff=False, track_diag=True,
                           accumulate_entropy=not degenerate)
    diag = out["diag"]
    entries = []

    def add(name, value, note=""):
        ok = value is not None and np.isfinite(value) and value <= _ADMISSIBILITY_CAP
        entries.append(DiagnosticEntry(name, value if value is None else float(value),
                                       bool(ok or value is None), note))

    with np.errstate(over="ignore"):
        add("int_sigma2_mean2_var", np.mean(diag[0]))
        add("int_abs_mu_mean", np.mean(diag[1]))
        if degenerate:
            entries.append(DiagnosticEntry("exp_entropy_moment", None, True,
                                           "skipped: degenerate policy"))
        else:
            add("exp_entropy_moment", np.mean(np.exp(diag[2])))
        u_term = _bequest_from_logw(pref, out["lnW"])
        add("bequest_second_moment", np.mean(u_term * u_term))

    if not all(e.ok for e in entries):
        status = "FAIL"
    elif degenerate:
        status = "PASS_WITH_NOTE"
    else:
        status = "PASS"
    return DiagnosticReport(entries=entries, status=status)


def positive_weight_check(ensemble: PathEnsemble, pref: mkt.Preference,
                          value_fn: Callable[[float, np.ndarray, np.ndarray], np.ndarray]) -> bool:
    """True iff (1-gamma) J_t + 1 > 0 at every node of every path, where
    J_t = value_fn(t, W_t, X_t) is the pathwise recursive utility."""
    if ensemble.W is None:
        raise ValueError("ensemble has no wealth paths")
    one_mg = 1.0 - pref.gamma
    for k, t in enumerate(ensemble.t_values):
        j = value_fn(float(t), ensemble.W[:, k], ensemble.X[:, k])
        if not np.all(one_mg * np.asarray(j) + 1.0 > 0.0):
            return False
    return True


def surface_value_fn(surface: hjb.ValueSurface) -> Callable:
    """Vectorized (t, w, x) -> V for pathwise evaluation along an ensemble."""
    grid = surface.grid

    def fn(t, w, x):
        row = surface.u.interp_row(min(t, grid.horizon))
        pos = np.clip((np.asarray(x) - grid.x_lo) / grid.dx, 0.0, grid.x_nodes - 1.0)
        j = np.minimum(pos.astype(int), grid.x_nodes - 2)
        frac = pos - j
        u_vals = row[j] * (1.0 - frac) + row[j + 1] * frac
        w = np.asarray(w)
        if surface.utility == mkt.LOG or surface.gamma == 1.0:
            return np.log(w) + u_vals
        g = surface.gamma
        return (np.power(w, 1.0 - g) * np.exp(u_vals) - 1.0) / (1.0 - g)

    return fn


def policy_value_pde(model: mkt.MarketModel, pref: mkt.Preference,
                     policy: hjb.GaussianPolicyField, grid: pde.Grid,
                     opts: pde.SolverOptions | None = None) -> pde.ScalarField:
    """Exponent q of the policy value V^pi = (w^(1-gamma) e^q - 1)/(1-gamma).

    Valid for wealth-independent Gaussian policies.  For log utility the
    homothetic reduction is additive instead (V^pi = ln w + q) and q solves
    the corresponding drift equation; in that parameterization q is the
    expected log-growth plus entropy flow, not the (identically zero) optimal
    exponent.
    """
    g = pref.gamma
    one_mg = 1.0 - g
    r = model.r
    rho = model.rho
    lam_grid = hjb.temperature_grid(pref, grid)
    lam_positive = bool(np.all(lam_grid > 0.0))
    lam_zero = bool(np.all(lam_grid == 0.0))
    if not (lam_positive or lam_zero):
        raise ValueError("temperature must be positive everywhere or identically zero")
    if lam_positive and np.min(policy.variance.values) <= 0.0:
        raise DegeneratePolicy("policy value with lambda > 0 needs variance > 0")

    def rows(t, x):
        mean = np.interp(x, policy.grid.x_values, policy.mean.interp_row(t))
        var = np.interp(x, policy.grid.x_values, policy.variance.interp_row(t))
        return mean, np.maximum(var, 0.0)

    def drift(t, x):
        _, _, m, _ = mkt.coefficients(model, t, x)
        return m

    def diffusion(t, x):
        return mkt.coefficients(model, t, x)[3]

    def ux_coeff(t, x):
        if g == 1.0:
            return np.zeros_like(x)
        mean, _ = rows(t, x)
        mu, sigma, _, nu = mkt.coefficients(model, t, x)
        return one_mg * rho * nu * sigma * mean

    def const(t, x):
        mean, var = rows(t, x)
        mu, sigma, _, _ = mkt.coefficients(model, t, x)
        if g == 1.0:
            out = r + (mu - r) * mean - 0.5 * sigma ** 2 * (mean ** 2 + var)
        else:
            out = one_mg * (r + (mu - r) * mean - 0.5 * g * sigma ** 2 * (mean ** 2 + var))
        if lam_positive:
            lam = pref.temperature_values(t, x)
            entropy = 0.5 * np.log(TWO_PI * np.e * var)
            weight = 1.0 if g == 1.0 else one_mg
            out = out + weight * lam * entropy
        return out

    def nonlinear(t, x, q, qx):
        nu = mkt.coefficients(model, t, x)[3]
        return 0.5 * nu ** 2 * qx ** 2

    source = pde.SplitSource(const=const, ux_coeff=ux_coeff,
                             nonlinear=None if g == 1.0 else nonlinear)
    problem = pde.SemilinearProblem(drift=drift, diffusion=diffusion,
                                    source=source,
                                    terminal=lambda x: np.zeros_like(x))
    return pde.solve_backward(problem, grid, opts)
