"""Backward Crank-Nicolson solver for 1-d semilinear parabolic PDEs.

Solves, backward from a terminal condition,

    u_t + a(t,x) u_x + (b(t,x)^2 / 2) u_xx + s(t, x, u, u_x) = 0,  u(T, .) = g,

on a uniform rectangle.  The source may declare linear structure
(:class:`SplitSource`): declared-linear parts are folded into the implicit
operator, so a problem with no nonlinear remainder needs exactly one linear
solve per step.  Any remaining nonlinearity (quadratic gradient terms) is
resolved by Picard iteration with a lagged source.

Boundary closure at x_lo and x_hi is zero second derivative (linear
extrapolation), the least-committal choice for a truncated whole-line problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .errors import (InsufficientGrids, NonFiniteField, OutOfDomain,
                     PicardDivergence)

ArrayFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Grid:
    """Uniform rectangle [0, horizon] x [x_lo, x_hi]."""

    horizon: float
    t_nodes: int
    x_lo: float
    x_hi: float
    x_nodes: int

    def __post_init__(self):
        if self.t_nodes < 2 or self.x_nodes < 3:
            raise ValueError("need t_nodes >= 2 and x_nodes >= 3")
        if not self.x_lo < self.x_hi:
            raise ValueError("need x_lo < x_hi")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / (self.t_nodes - 1)

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.x_nodes - 1)

    @property
    def t_values(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.t_nodes)

    @property
    def x_values(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.x_nodes)

    def refine(self, factor: int = 2) -> "Grid":
        """Grid with both spacings divided by ``factor`` (nodes nest)."""
        return Grid(self.horizon, (self.t_nodes - 1) * factor + 1,
                    self.x_lo, self.x_hi, (self.x_nodes - 1) * factor + 1)


def default_grid(model, t_nodes: int = 401, x_nodes: int = 201) -> Grid:
    """Default solve rectangle: +-5 stationary standard deviations for OU
    factors, [-5, 5] otherwise."""
    if getattr(model, "kappa", 0.0) > 0.0 and getattr(model, "nu_const", 0.0) > 0.0:
        sd = model.nu_const / np.sqrt(2.0 * model.kappa)
        lo, hi = model.theta - 5.0 * sd, model.theta + 5.0 * sd
    else:
        lo, hi = -5.0, 5.0
    return Grid(model.horizon, t_nodes, lo, hi, x_nodes)


class ScalarField:
    """Values of a function of (t, x) on a grid, with derivative access.

    Immutable once constructed; ``values[i, j]`` is the value at time node i,
    space node j.
    """

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.t_nodes, grid.x_nodes):
            raise ValueError(f"values shape {values.shape} does not match grid")
        values = values.copy()
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    def time_index(self, t: float) -> int:
        idx = int(round(t / self.grid.dt))
        if not (0 <= idx < self.grid.t_nodes) or abs(idx * self.grid.dt - t) > 1e-9 * max(1.0, self.grid.horizon):
            raise OutOfDomain(f"t={t} is not a grid time level")
        return idx

    def row(self, t: float) -> np.ndarray:
        """Slice at an exact grid time level."""
        return self.values[self.time_index(t)]

    def interp_row(self, t: float) -> np.ndarray:
        """Row at arbitrary t in [0, horizon] by linear blending in time."""
        g = self.grid
        if not 0.0 <= t <= g.horizon + 1e-12:
            raise OutOfDomain(f"t={t} outside [0, {g.horizon}]")
        pos = min(t, g.horizon) / g.dt
        i0 = min(int(pos), g.t_nodes - 2)
        w = pos - i0
        return (1.0 - w) * self.values[i0] + w * self.values[i0 + 1]

    def at(self, t: float, x: float) -> float:
        """Bilinear interpolation inside the rectangle."""
        g = self.grid
        if not (g.x_lo - 1e-12 <= x <= g.x_hi + 1e-12):
            raise OutOfDomain(f"x={x} outside [{g.x_lo}, {g.x_hi}]")
        row = self.interp_row(t)
        pos = (min(max(x, g.x_lo), g.x_hi) - g.x_lo) / g.dx
        j0 = min(int(pos), g.x_nodes - 2)
        w = pos - j0
        return float((1.0 - w) * row[j0] + w * row[j0 + 1])


@dataclass(frozen=True)
class SplitSource:
    """Source term with declared linear structure.

    s(t, x, u, u_x) = const(t, x) + u_coeff(t, x) * u + ux_coeff(t, x) * u_x
                      + nonlinear(t, x, u, u_x)

    Declared parts are treated implicitly by the stepper; only ``nonlinear``
    is Picard-lagged.
    """

    const: Optional[ArrayFn] = None
    u_coeff: Optional[ArrayFn] = None
    ux_coeff: Optional[ArrayFn] = None
    nonlinear: Optional[Callable] = None


@dataclass(frozen=True)
class SemilinearProblem:
    """drift a(t,x), diffusion b(t,x) >= 0, source, terminal g(x).

    Callbacks are vectorized over x: they receive the full x array for one
    time level.  ``source`` is either a :class:`SplitSource` or a plain
    callable (t, x, u, u_x) treated as fully lagged.
    """

    drift: ArrayFn
    diffusion: ArrayFn
    source: object
    terminal: Callable[[np.ndarray], np.ndarray]

    def split_source(self) -> SplitSource:
        if isinstance(self.source, SplitSource):
            return self.source
        return SplitSource(nonlinear=self.source)


@dataclass(frozen=True)
class SolverOptions:
    picard_tol: float = 1e-10
    picard_max_iter: int = 50


@dataclass
class SolveStats:
    """Per-step Picard iteration counts (index 0 = step into the last-but-one
    time level)."""

    picard_iterations: np.ndarray

    @property
    def max_picard(self) -> int:
        return int(self.picard_iterations.max(initial=0))


def _eval(fn: Optional[ArrayFn], t: float, x: np.ndarray) -> np.ndarray:
    if fn is None:
        return np.zeros_like(x)
    out = np.asarray(fn(t, x), dtype=float)
    return np.broadcast_to(out, x.shape).astype(float, copy=False)


def _apply_operator(alpha, beta, react, u, dx):
    """Apply a u_x + (b^2/2) u_xx + react * u with the zero-curvature closure.

    At the boundary rows the second derivative is taken as zero and the first
    derivative is one-sided second order, so the node next to the boundary
    keeps its full central stencil.
    """
    out = np.empty_like(u)
    out[1:-1] = (alpha[1:-1] * (u[2:] - u[:-2]) / (2.0 * dx)
                 + beta[1:-1] * (u[2:] - 2.0 * u[1:-1] + u[:-2]) / dx ** 2
                 + react[1:-1] * u[1:-1])
    out[0] = (alpha[0] * (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx)
              + react[0] * u[0])
    out[-1] = (alpha[-1] * (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * dx)
               + react[-1] * u[-1])
    return out


def _banded_matrix(alpha, beta, react, dx, half_dt):
    """Banded (2,2) storage of I - half_dt * A (same closure as above)."""
    n = alpha.shape[0]
    ab = np.zeros((5, n))
    # interior tridiagonal entries
    sub = -half_dt * (-alpha[1:-1] / (2.0 * dx) + beta[1:-1] / dx ** 2)
    dia = 1.0 - half_dt * (-2.0 * beta[1:-1] / dx ** 2 + react[1:-1])
    sup = -half_dt * (alpha[1:-1] / (2.0 * dx) + beta[1:-1] / dx ** 2)
    ab[2, 1:-1] = dia
    ab[3, 0:-2] = sub          # entries M[i, i-1]
    ab[1, 2:] = sup            # entries M[i, i+1]
    # boundary rows: one-sided advection, zero curvature
    c = half_dt / (2.0 * dx)
    ab[2, 0] = 1.0 - half_dt * react[0] + 3.0 * c * alpha[0]
    ab[1, 1] = -4.0 * c * alpha[0]
    ab[0, 2] = c * alpha[0]
    ab[2, n - 1] = 1.0 - half_dt * react[-1] - 3.0 * c * alpha[-1]
    ab[3, n - 2] = 4.0 * c * alpha[-1]
    ab[4, n - 3] = -c * alpha[-1]
    return ab


def derivative_x(fld: ScalarField) -> ScalarField:
    """d/dx by central differences, second-order one-sided at the edges.

    Exact for data linear in x everywhere and for quadratics at interior nodes.
    """
    u = fld.values
    dx = fld.grid.dx
    out = np.empty_like(u)
    out[:, 1:-1] = (u[:, 2:] - u[:, :-2]) / (2.0 * dx)
    out[:, 0] = (-3.0 * u[:, 0] + 4.0 * u[:, 1] - u[:, 2]) / (2.0 * dx)
    out[:, -1] = (3.0 * u[:, -1] - 4.0 * u[:, -2] + u[:, -3]) / (2.0 * dx)
    return ScalarField(fld.grid, out)


def _derivative_x_row(row: np.ndarray, dx: float) -> np.ndarray:
    out = np.empty_like(row)
    out[1:-1] = (row[2:] - row[:-2]) / (2.0 * dx)
    out[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dx)
    out[-1] = (3.0 * row[-1] - 4.0 * row[-2] + row[-3]) / (2.0 * dx)
    return out


def derivative_t(fld: ScalarField) -> ScalarField:
    """d/dt by central differences, second-order one-sided at t = 0 and t = T."""
    u = fld.values
    dt = fld.grid.dt
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - u[:-2]) / (2.0 * dt)
    out[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dt)
    out[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * dt)
    return ScalarField(fld.grid, out)


def solve_backward(problem: SemilinearProblem, grid: Grid,
                   opts: SolverOptions | None = None,
                   return_stats: bool = False):
    """March the Crank-Nicolson discretization backward from t = horizon.

    Returns the solved :class:`ScalarField`; with ``return_stats=True`` also
    returns :class:`SolveStats` carrying the Picard iteration count per step
    (exactly 1 for sources with no nonlinear remainder).
    """
    opts = opts or SolverOptions()
    x = grid.x_values
    t = grid.t_values
    dx = grid.dx
    half_dt = 0.5 * grid.dt
    src = problem.split_source()
    nl = src.nonlinear

    values = np.empty((grid.t_nodes, grid.x_nodes))
    terminal = np.broadcast_to(np.asarray(problem.terminal(x), dtype=float), x.shape)
    values[-1] = terminal
    iter_counts = np.zeros(grid.t_nodes - 1, dtype=int)

    def level(tv: float):
        a = _eval(problem.drift, tv, x) + _eval(src.ux_coeff, tv, x)
        b = _eval(problem.diffusion, tv, x)
        if np.any(b < 0.0):
            raise ValueError(f"diffusion must be >= 0 (t={tv})")
        beta = 0.5 * b * b
        react = _eval(src.u_coeff, tv, x)
        const = _eval(src.const, tv, x)
        return a, beta, react, const

    a_old, beta_old, react_old, const_old = level(t[-1])
    for k in range(grid.t_nodes - 2, -1, -1):
        t_new, t_old = t[k], t[k + 1]
        u_old = values[k + 1]
        a_new, beta_new, react_new, const_new = level(t_new)

        explicit = u_old + half_dt * _apply_operator(a_old, beta_old, react_old, u_old, dx)
        s_old = const_old.copy()
        if nl is not None:
            s_old = s_old + nl(t_old, x, u_old, _derivative_x_row(u_old, dx))
        ab = _banded_matrix(a_new, beta_new, react_new, dx, half_dt)

        def solve_once(source_new):
            rhs = explicit + half_dt * (s_old + source_new)
            return solve_banded((2, 2), ab, rhs)

        if nl is None:
            u_new = solve_once(const_new)
            iter_counts[k] = 1
        else:
            guess = u_old
            u_new = None
            for p in range(1, opts.picard_max_iter + 1):
                s_new = const_new + nl(t_new, x, guess, _derivative_x_row(guess, dx))
                u_new = solve_once(s_new)
                if p >= 2 and np.max(np.abs(u_new - guess)) <= opts.picard_tol:
                    iter_counts[k] = p
                    break
                guess = u_new
            else:
                raise PicardDivergence(
                    f"Picard cap {opts.picard_max_iter} hit at t={t_new:.6g}")
        if not np.all(np.isfinite(u_new)):
            raise NonFiniteField(f"non-finite values at t={t_new:.6g}")
        values[k] = u_new
        a_old, beta_old, react_old, const_old = a_new, beta_new, react_new, const_new

    fld = ScalarField(grid, values)
    if return_stats:
        return fld, SolveStats(iter_counts)
    return fld


@dataclass
class ObservedOrders:
    """Successive-difference convergence summary over a refinement sequence."""

    diffs: list
    orders: list
    exact_on_all_grids: bool

    @property
    def order(self) -> Optional[float]:
        if self.exact_on_all_grids or not self.orders:
            return None
        return float(np.mean(self.orders))


def convergence_probe(problem: SemilinearProblem, grids: Sequence[Grid],
                      opts: SolverOptions | None = None) -> ObservedOrders:
    """Observed order from successive differences over nested grid refinements.

    Each grid must halve both spacings of the previous one.  Differences are
    taken on the common (coarse) nodes; order k is log2(diff_k / diff_{k+1}).
    """
    grids = list(grids)
    if len(grids) < 3:
        raise InsufficientGrids("need at least 3 grids")
    for g0, g1 in zip(grids, grids[1:]):
        nested = (g1.t_nodes - 1 == 2 * (g0.t_nodes - 1)
                  and g1.x_nodes - 1 == 2 * (g0.x_nodes - 1)
                  and g1.x_lo == g0.x_lo and g1.x_hi == g0.x_hi
                  and g1.horizon == g0.horizon)
        if not nested:
            raise ValueError("grids must form a nested halving sequence")
    fields = [solve_backward(problem, g, opts) for g in grids]
    diffs = []
    for coarse, fine in zip(fields, fields[1:]):
        diffs.append(float(np.max(np.abs(coarse.values - fine.values[::2, ::2]))))
    if max(diffs) < 1e-13:
        return ObservedOrders(diffs=diffs, orders=[], exact_on_all_grids=True)
    orders = [float(np.log2(d0 / d1)) for d0, d1 in zip(diffs, diffs[1:])]
    return ObservedOrders(diffs=diffs, orders=orders, exact_on_all_grids=False)
