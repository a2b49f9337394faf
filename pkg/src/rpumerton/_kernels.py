"""Hot inner loops: per-step path updates and the collapse-ODE integrator.

Each kernel exists twice: a scalar-loop version compiled with numba ``@njit``
and a vectorized pure-numpy fallback.  The active backend is chosen at import
from the ``RPUMERTON_NUMBA`` environment variable (``0`` forces the numpy
path) and from numba availability; ``set_backend`` overrides it at runtime
(used by tests and the benchmark).

Coefficient arrays (mu, sigma, m, nu) are evaluated outside the kernels, so
both backends consume identical inputs; policy surfaces enter as
time-interpolated rows sampled linearly in x, clamped at the domain edges.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap


_env = os.environ.get("RPUMERTON_NUMBA", "1").strip().lower()
_USE_NUMBA = HAVE_NUMBA and _env not in ("0", "false", "off")


def use_numba() -> bool:
    return _USE_NUMBA


def set_backend(name: str) -> str:
    """Select 'numba' or 'numpy'; returns the previously active backend."""
    global _USE_NUMBA
    prev = "numba" if _USE_NUMBA else "numpy"
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not importable")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def active_backend() -> str:
    return "numba" if _USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# exploratory wealth step
# ---------------------------------------------------------------------------

def _step_exploratory_loop(X, lnW, K, pay, diag, mu, sig, m, nu,
                           mean_row, var_row, ent_row, lam_row,
                           x_lo, inv_dx, zb, zbt, zbb,
                           r, rho, srho, one_mg, abs_one_mg, dt, sdt,
                           with_entropy, track_payoff, track_diag):
    n = X.shape[0]
    nx = mean_row.shape[0]
    for i in range(n):
        x = X[i]
        pos = (x - x_lo) * inv_dx
        if pos < 0.0:
            pos = 0.0
        elif pos > nx - 1.0:
            pos = nx - 1.0
        j = int(pos)
        if j > nx - 2:
            j = nx - 2
        w = pos - j
        mean = mean_row[j] * (1.0 - w) + mean_row[j + 1] * w
        var = var_row[j] * (1.0 - w) + var_row[j + 1] * w
        if var < 0.0:
            var = 0.0
        mu_i = mu[i]
        sig_i = sig[i]
        drift = r + (mu_i - r) * mean - 0.5 * sig_i * sig_i * (mean * mean + var)
        if with_entropy:
            ent = ent_row[j] * (1.0 - w) + ent_row[j + 1] * w
            lam = lam_row[j] * (1.0 - w) + lam_row[j + 1] * w
            if track_payoff:
                pay[i] += math.exp(K[i]) * lam * ent * dt
            if track_diag:
                diag[2, i] += 2.0 * lam * abs_one_mg * abs(ent) * dt
            K[i] += lam * one_mg * ent * dt
        if track_diag:
            diag[0, i] += sig_i * sig_i * (mean * mean + var) * dt
            diag[1, i] += abs(mu_i * mean) * dt
        lnW[i] += drift * dt + sig_i * mean * sdt * zb[i] + sig_i * math.sqrt(var) * sdt * zbb[i]
        X[i] = x + m[i] * dt + nu[i] * (rho * zb[i] + srho * zbt[i]) * sdt


def _interp_rows_numpy(row, X, x_lo, inv_dx):
    nx = row.shape[0]
    pos = np.clip((X - x_lo) * inv_dx, 0.0, nx - 1.0)
    j = np.minimum(pos.astype(np.int64), nx - 2)
    w = pos - j
    return row[j] * (1.0 - w) + row[j + 1] * w


def _step_exploratory_numpy(X, lnW, K, pay, diag, mu, sig, m, nu,
                            mean_row, var_row, ent_row, lam_row,
                            x_lo, inv_dx, zb, zbt, zbb,
                            r, rho, srho, one_mg, abs_one_mg, dt, sdt,
                            with_entropy, track_payoff, track_diag):
    mean = _interp_rows_numpy(mean_row, X, x_lo, inv_dx)
    var = np.maximum(_interp_rows_numpy(var_row, X, x_lo, inv_dx), 0.0)
    drift = r + (mu - r) * mean - 0.5 * sig * sig * (mean * mean + var)
    if with_entropy:
        ent = _interp_rows_numpy(ent_row, X, x_lo, inv_dx)
        lam = _interp_rows_numpy(lam_row, X, x_lo, inv_dx)
        if track_payoff:
            pay += np.exp(K) * lam * ent * dt
        if track_diag:
            diag[2] += 2.0 * lam * abs_one_mg * np.abs(ent) * dt
        K += lam * one_mg * ent * dt
    if track_diag:
        diag[0] += sig * sig * (mean * mean + var) * dt
        diag[1] += np.abs(mu * mean) * dt
    lnW += drift * dt + sig * mean * sdt * zb + sig * np.sqrt(var) * sdt * zbb
    X += m * dt + nu * (rho * zb + srho * zbt) * sdt


# ---------------------------------------------------------------------------
# classical (deterministic feedback) wealth step
# ---------------------------------------------------------------------------

def _step_classical_loop(X, lnW, mu, sig, m, nu, a_row, x_lo, inv_dx,
                         zb, zbt, r, rho, srho, dt, sdt):
    n = X.shape[0]
    nx = a_row.shape[0]
    for i in range(n):
        x = X[i]
        pos = (x - x_lo) * inv_dx
        if pos < 0.0:
            pos = 0.0
        elif pos > nx - 1.0:
            pos = nx - 1.0
        j = int(pos)
        if j > nx - 2:
            j = nx - 2
        w = pos - j
        a = a_row[j] * (1.0 - w) + a_row[j + 1] * w
        sig_i = sig[i]
        lnW[i] += (r + (mu[i] - r) * a - 0.5 * sig_i * sig_i * a * a) * dt \
            + sig_i * a * sdt * zb[i]
        X[i] = x + m[i] * dt + nu[i] * (rho * zb[i] + srho * zbt[i]) * sdt


def _step_classical_numpy(X, lnW, mu, sig, m, nu, a_row, x_lo, inv_dx,
                          zb, zbt, r, rho, srho, dt, sdt):
    a = _interp_rows_numpy(a_row, X, x_lo, inv_dx)
    lnW += (r + (mu - r) * a - 0.5 * sig * sig * a * a) * dt + sig * a * sdt * zb
    X += m * dt + nu * (rho * zb + srho * zbt) * sdt


# ---------------------------------------------------------------------------
# factor-only step
# ---------------------------------------------------------------------------

def _step_factor_loop(X, m, nu, zb, zbt, rho, srho, dt, sdt):
    for i in range(X.shape[0]):
        X[i] += m[i] * dt + nu[i] * (rho * zb[i] + srho * zbt[i]) * sdt


def _step_factor_numpy(X, m, nu, zb, zbt, rho, srho, dt, sdt):
    X += m * dt + nu * (rho * zb + srho * zbt) * sdt


# ---------------------------------------------------------------------------
# collapse ODE: phi' = a*phi + b - c*ln(phi), classic RK4, fixed step
# ---------------------------------------------------------------------------

def _rk4_collapse_loop(a, b, c, dt, n_steps, phi0, stop_level, phis):
    """Integrate until tau = n_steps*dt or until phi drops below stop_level.

    Returns (last_index, phi_last, stopped) where stopped means the
    trajectory breached stop_level (endgame is refined by the caller).
    """
    phi = phi0
    phis[0] = phi
    for k in range(n_steps):
        y1 = phi
        f1 = a * y1 + b - c * math.log(y1)
        y2 = phi + 0.5 * dt * f1
        if y2 <= stop_level:
            return k, phi, True
        f2 = a * y2 + b - c * math.log(y2)
        y3 = phi + 0.5 * dt * f2
        if y3 <= stop_level:
            return k, phi, True
        f3 = a * y3 + b - c * math.log(y3)
        y4 = phi + dt * f3
        if y4 <= stop_level:
            return k, phi, True
        f4 = a * y4 + b - c * math.log(y4)
        nxt = phi + dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        if nxt <= stop_level or not math.isfinite(nxt):
            return k, phi, True
        phi = nxt
        phis[k + 1] = phi
    return n_steps, phi, False


if HAVE_NUMBA:
    _step_exploratory_jit = njit(cache=True)(_step_exploratory_loop)
    _step_classical_jit = njit(cache=True)(_step_classical_loop)
    _step_factor_jit = njit(cache=True)(_step_factor_loop)
    _rk4_collapse_jit = njit(cache=True)(_rk4_collapse_loop)


def step_exploratory(*args):
    if _USE_NUMBA:
        _step_exploratory_jit(*args)
    else:
        _step_exploratory_numpy(*args)


def step_classical(*args):
    if _USE_NUMBA:
        _step_classical_jit(*args)
    else:
        _step_classical_numpy(*args)


def step_factor(*args):
    if _USE_NUMBA:
        _step_factor_jit(*args)
    else:
        _step_factor_numpy(*args)


def rk4_collapse(a, b, c, dt, n_steps, phi0, stop_level, phis):
    if _USE_NUMBA:
        return _rk4_collapse_jit(a, b, c, dt, n_steps, phi0, stop_level, phis)
    return _rk4_collapse_loop(a, b, c, dt, n_steps, phi0, stop_level, phis)
