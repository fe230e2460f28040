"""Parisi PDE solver, functional minimization and the discrete SDE.

The PDE is solved backward from Phi(1, x) = |x|:

    Phi_t = -(xi''(t) / 2) (Phi_xx + mu(t) Phi_x^2).

On an interval where mu = m is constant, exp(m Phi) solves a backward heat
equation in the clock xi'(t), so each step is a Gaussian convolution.  A
semi-implicit finite-difference scheme is provided as an independent check.
"""

import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.linalg import solve_banded

from . import _kernels
from .predicate import MixturePolynomial


class ParisiConvergenceWarning(RuntimeWarning):
    pass


class GridError(ValueError):
    pass


# -- order parameter ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function on [0, 1].

    ``values[j]`` holds on ``[breakpoints[j], breakpoints[j+1])``; the last
    value extends through t = 1.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.breakpoints, dtype=np.float64))
        v = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if b.shape != v.shape or b.size == 0:
            raise ValueError("breakpoints and values must be non-empty and of equal length")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if b[0] < 0 or b[-1] >= 1:
            raise ValueError("breakpoints must lie in [0, 1)")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("values must be finite and non-negative")
        if b[0] > 0:
            b = np.concatenate(([0.0], b))
            v = np.concatenate(([0.0], v))
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value=0.0):
        return cls([0.0], [value])

    @classmethod
    def equispaced(cls, values, end=1.0):
        """Pieces of equal length on [0, end); the last value continues to 1."""
        k = len(values)
        return cls(np.arange(k) * (end / k), values)

    def __call__(self, t):
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        out = self.values[np.clip(idx, 0, None)]
        return out if np.ndim(t) else float(out)

    def intervals(self):
        """(start, end, value) triples covering [0, 1]."""
        ends = np.append(self.breakpoints[1:], 1.0)
        return list(zip(self.breakpoints.tolist(), ends.tolist(), self.values.tolist()))

    def scaled(self, factor):
        return StepFunction(self.breakpoints, self.values * factor)

    def to_dict(self):
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["breakpoints"], d["values"])

    def __eq__(self, other):
        return (isinstance(other, StepFunction)
                and np.array_equal(self.breakpoints, other.breakpoints)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"StepFunction(breakpoints={self.breakpoints.tolist()}, values={self.values.tolist()})"


# -- grid configuration -------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    """Discretization of the (t, x) domain.

    ``x_max`` defaults to ``x_scale * sqrt(xi'(1))`` and the spacing is
    ``x_max / half_points``.
    """

    eta: float = 0.05
    dt: float = 1e-3
    x_scale: float = 6.0
    half_points: int = 2000
    x_max: float = None
    backend: str = "cole_hopf"
    fd_refine: int = 4

    @classmethod
    def for_delta(cls, delta, **kw):
        return cls(dt=min(delta / 4, 1e-3), **kw)

    def resolve_x_max(self, xi):
        x_max = self.x_max if self.x_max is not None else self.x_scale * math.sqrt(float(xi.dxi(1.0)))
        if x_max < 4 * math.sqrt(float(xi.dxi(1.0))):
            raise GridError("x_max must be at least 4 sqrt(xi'(1))")
        return x_max

    def validate(self):
        if not self.dt > 0 or self.half_points <= 0:
            raise GridError("dt and dx must be positive")
        if not 0 < self.eta < 1:
            raise GridError("eta must lie in (0, 1)")
        if self.backend not in ("cole_hopf", "fd"):
            raise GridError(f"unknown backend {self.backend!r}")

    def to_dict(self):
        return {"eta": self.eta, "dt": self.dt, "x_scale": self.x_scale,
                "half_points": self.half_points, "x_max": self.x_max,
                "backend": self.backend, "fd_refine": self.fd_refine}


@dataclass(eq=False)
class PdeGrid:
    t_grid: np.ndarray
    x_grid: np.ndarray
    phi: np.ndarray
    phi_x: np.ndarray
    phi_xx: np.ndarray

    @property
    def dt(self):
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def dx(self):
        return float(self.x_grid[1] - self.x_grid[0])

    @property
    def x_max(self):
        return float(self.x_grid[-1])

    def phi00(self):
        return float(self.phi[0, len(self.x_grid) // 2])

    def _lookup(self, table, t, x):
        # bilinear in (t, x); x clamped to the grid edge
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        s = float(np.clip(t / self.dt, 0, len(self.t_grid) - 1))
        j = min(int(s), len(self.t_grid) - 2)
        f = s - j
        x0 = float(self.x_grid[0])
        lo = _kernels.interp_row(table[j], x0, self.dx, x, np.empty_like(x))
        if f == 0.0:
            return lo
        hi = _kernels.interp_row(table[j + 1], x0, self.dx, x, np.empty_like(x))
        return lo * (1.0 - f) + hi * f

    def value(self, t, x):
        return self._lookup(self.phi, t, x)

    def dx_at(self, t, x):
        return self._lookup(self.phi_x, t, x)

    def dxx_at(self, t, x):
        return self._lookup(self.phi_xx, t, x)


@dataclass(eq=False)
class ParisiSolution:
    mu: StepFunction
    grid: PdeGrid
    functional_value: float
    xi: MixturePolynomial
    eta: float
    config: GridConfig = field(default_factory=GridConfig)
    converged: bool = True


@dataclass(eq=False)
class SdeStats:
    delta: float
    n_paths: int
    mean_phixx: np.ndarray
    mean_phixx_sq: np.ndarray
    tilde_z_sq: np.ndarray
    increment_mean: np.ndarray
    increment_stderr: np.ndarray
    var_x: np.ndarray
    tilde_z_final: np.ndarray = field(default=None, repr=False)

    @property
    def steps(self):
        return len(self.mean_phixx)


# -- Gaussian steps -----------------------------------------------------------

def _discrete_gaussian(var, dx, width=8.0):
    """Symmetric lattice kernel with total variance ``var`` (in x units)."""
    target = var / dx**2
    if target <= 0:
        return np.ones(1)
    if target >= 9.0:
        half = int(math.ceil(width * math.sqrt(target))) + 1
        k = np.arange(-half, half + 1)
        w = np.exp(-0.5 * k**2 / target)
        return w / w.sum()
    # small variance: a sampled Gaussian under-resolves the spread, so pick the
    # lattice scale whose discrete second moment equals the requested variance
    half = 12
    k = np.arange(-half, half + 1, dtype=np.float64)

    def moment(s):
        w = np.exp(-0.5 * k**2 / s)
        return (w * k**2).sum() / w.sum() - target

    s = optimize.brentq(moment, 1e-6, 40.0, xtol=1e-14, rtol=1e-14)
    w = np.exp(-0.5 * k**2 / s)
    return w / w.sum()


def _pad_asymptote(phi, x_grid, pad):
    """Extend phi beyond the grid along the slope-one asymptote |x| + c."""
    if pad == 0:
        return phi
    dx = x_grid[1] - x_grid[0]
    ext = dx * np.arange(1, pad + 1)
    left = phi[0] + ext[::-1]
    right = phi[-1] + ext
    return np.concatenate((left, phi, right))


def _heat_step(phi, x_grid, var, m):
    """Advance phi backward by clock increment ``var`` at constant mu = m."""
    if var <= 0:
        return phi
    dx = x_grid[1] - x_grid[0]
    kernel = _discrete_gaussian(var, dx)
    pad = (len(kernel) - 1) // 2
    ext = _pad_asymptote(phi, x_grid, pad)
    if m == 0.0:
        return _kernels.convolve_valid(ext, kernel)
    shift = m * ext.max()
    if shift - m * ext.min() > 700.0:
        raise GridError(f"mu = {m:g} too large for this grid (exp overflow)")
    psi = np.exp(m * ext - shift)
    return (np.log(_kernels.convolve_valid(psi, kernel)) + shift) / m


def _derivatives(phi, x_grid):
    dx = x_grid[1] - x_grid[0]
    ext = _pad_asymptote(phi, x_grid, 1)
    phi_x = (ext[2:] - ext[:-2]) / (2 * dx)
    phi_xx = (ext[2:] - 2 * ext[1:-1] + ext[:-2]) / dx**2
    return phi_x, phi_xx


def _time_grid(dt):
    steps = int(round(1.0 / dt))
    if steps < 1 or abs(steps * dt - 1.0) > 1e-9:
        steps = int(math.ceil(1.0 / dt))
    return np.linspace(0.0, 1.0, steps + 1)


def _x_grid(xi, cfg):
    x_max = cfg.resolve_x_max(xi)
    return np.linspace(-x_max, x_max, 2 * cfg.half_points + 1)


def _clock_steps(xi, mu, t_hi, t_lo):
    """Split [t_lo, t_hi] at breakpoints; yield (clock variance, mu) backward."""
    cuts = [t_hi] + [b for b in mu.breakpoints[::-1] if t_lo < b < t_hi] + [t_lo]
    for a, b in zip(cuts[:-1], cuts[1:]):
        yield float(xi.dxi(a) - xi.dxi(b)), mu((a + b) / 2)


def _solve_cole_hopf(xi, mu, cfg, t_grid, x_grid):
    phi = np.empty((len(t_grid), len(x_grid)))
    phi[-1] = np.abs(x_grid)
    for j in range(len(t_grid) - 2, -1, -1):
        cur = phi[j + 1]
        for var, m in _clock_steps(xi, mu, t_grid[j + 1], t_grid[j]):
            cur = _heat_step(cur, x_grid, var, m)
        phi[j] = cur
    return phi


def _fd_sweep(xi, mu, t_grid, x_grid, refine):
    """Linearly implicit Euler from t=1 to t=0; returns Phi on ``t_grid``.

    Each grid step is split into ``refine`` substeps, and again at breakpoints
    of mu, so that mu is constant over every substep.
    """
    dx = x_grid[1] - x_grid[0]
    n = len(x_grid)
    cur = np.abs(x_grid)
    out = np.empty((len(t_grid), n))
    out[-1] = cur
    for j in range(len(t_grid) - 2, -1, -1):
        t_lo, t_hi = t_grid[j], t_grid[j + 1]
        marks = list(np.linspace(t_hi, t_lo, refine + 1))
        marks += [b for b in mu.breakpoints if t_lo < b < t_hi]
        marks = sorted(set(marks), reverse=True)
        for s_hi, s_lo in zip(marks[:-1], marks[1:]):
            h = s_hi - s_lo
            a = float(xi.d2xi(s_lo)) / 2 * h
            m = mu((s_hi + s_lo) / 2)
            ext = _pad_asymptote(cur, x_grid, 1)
            p = (ext[2:] - ext[:-2]) / (2 * dx)
            diff = a / dx**2
            adv = a * m * p / (2 * dx)
            # (I - a D2 - a m p D1) phi_new = phi_old with slope -1 / +1 ghosts
            lower = -(diff - adv)
            upper = -(diff + adv)
            main = np.full(n, 1 + 2 * diff)
            rhs = cur.copy()
            main[0] += lower[0]
            rhs[0] -= lower[0] * dx
            main[-1] += upper[-1]
            rhs[-1] -= upper[-1] * dx
            ab = np.zeros((3, n))
            ab[0, 1:] = upper[:-1]
            ab[1] = main
            ab[2, :-1] = lower[1:]
            cur = solve_banded((1, 1), ab, rhs)
        out[j] = cur
    return out


def _solve_fd(xi, mu, cfg, t_grid, x_grid):
    # Richardson extrapolation of two refinements cancels the leading O(dt)
    # error of implicit Euler
    coarse = _fd_sweep(xi, mu, t_grid, x_grid, cfg.fd_refine)
    fine = _fd_sweep(xi, mu, t_grid, x_grid, 2 * cfg.fd_refine)
    return 2 * fine - coarse


def solve_pde(xi, mu, cfg=None):
    """Tabulate Phi, Phi_x and Phi_xx on the (t, x) grid of ``cfg``."""
    cfg = cfg or GridConfig()
    cfg.validate()
    t_grid = _time_grid(cfg.dt)
    x_grid = _x_grid(xi, cfg)
    solver = _solve_cole_hopf if cfg.backend == "cole_hopf" else _solve_fd
    phi = solver(xi, mu, cfg, t_grid, x_grid)
    phi_x = np.empty_like(phi)
    phi_xx = np.empty_like(phi)
    for j in range(len(t_grid)):
        phi_x[j], phi_xx[j] = _derivatives(phi[j], x_grid)
    phi[-1] = np.abs(x_grid)
    return PdeGrid(t_grid, x_grid, phi, phi_x, phi_xx)


def initial_value(xi, mu, cfg=None):
    """Phi(0, 0) without tabulating intermediate time slices.

    The Cole-Hopf step is exact in time, so one convolution per constant piece
    of mu suffices.
    """
    cfg = cfg or GridConfig()
    cfg.validate()
    x_grid = _x_grid(xi, cfg)
    if cfg.backend == "fd":
        return solve_pde(xi, mu, cfg).phi00()
    cur = np.abs(x_grid)
    for var, m in _clock_steps(xi, mu, 1.0, 0.0):
        cur = _heat_step(cur, x_grid, var, m)
    return float(cur[len(x_grid) // 2])


def correction_integral(xi, mu):
    """(1/2) int_0^1 xi''(t) t mu(t) dt, exact for step mu.

    Uses the antiderivative t xi'(t) - xi(t) of t xi''(t).
    """
    g = lambda t: t * xi.dxi(t) - xi.xi(t)
    return 0.5 * sum(m * float(g(b) - g(a)) for a, b, m in mu.intervals())


def functional_value(sol, xi, mu):
    """Parisi functional Phi(0,0) - (1/2) int xi'' t mu dt.

    ``sol`` is a solved :class:`PdeGrid` or a precomputed Phi(0, 0).
    """
    phi00 = sol.phi00() if isinstance(sol, PdeGrid) else float(sol)
    return phi00 - correction_integral(xi, mu)


def parisi_value(xi, mu, cfg=None):
    return functional_value(initial_value(xi, mu, cfg), xi, mu)


# -- path moments and minimization ---------------------------------------------

def _slices(xi, mu, x_grid, times):
    """Phi on the grid at each of ``times`` (ascending), by exact Cole-Hopf steps."""
    out = {}
    cur = np.abs(x_grid)
    t_prev = 1.0
    for t in sorted(set(times) | {1.0}, reverse=True):
        for var, m in _clock_steps(xi, mu, t_prev, t):
            cur = _heat_step(cur, x_grid, var, m)
        out[t] = cur
        t_prev = t
    return out


def path_moments(xi, mu, times, cfg=None):
    """E[Phi_x^2], E[Phi_xx], E[Phi_xx^2] along the continuous-time process.

    X solves dX = xi'' mu Phi_x dt + sqrt(xi'') dW, X_0 = 0.  On a piece with
    mu = m the drift is an h-transform of Brownian motion in the clock xi'
    with h = exp(m Phi), so the law of X_t is propagated exactly by the same
    Gaussian steps as the PDE.  ``times`` must lie in (0, 1).
    """
    cfg = cfg or GridConfig()
    x_grid = _x_grid(xi, cfg)
    dx = x_grid[1] - x_grid[0]
    times = np.asarray(sorted(times), dtype=np.float64)
    nodes = sorted(set(times.tolist()) | {float(b) for b in mu.breakpoints if b > 0})
    phis = _slices(xi, mu, x_grid, [0.0] + nodes)
    centre = len(x_grid) // 2
    moments = {"phi_x_sq": [], "phi_xx": [], "phi_xx_sq": []}
    dens = None
    t_prev = 0.0
    want = set(times.tolist())
    for t in nodes:
        m = mu((t_prev + t) / 2)
        var = float(xi.dxi(t) - xi.dxi(t_prev))
        kernel = _discrete_gaussian(var, dx)
        pad = (len(kernel) - 1) // 2
        if dens is None:
            src = np.zeros(len(x_grid))
            src[centre] = 1.0 / dx
        else:
            src = dens
        if m > 0:
            lift = m * phis[t_prev]
            lift = lift - lift.min()
            src = src * np.exp(-lift)
        spread = _kernels.convolve_valid(np.pad(src, pad), kernel)
        if m > 0:
            spread = spread * np.exp(m * phis[t] - m * phis[t_prev].min())
        dens = spread / (spread.sum() * dx)
        if t in want:
            px, pxx = _derivatives(phis[t], x_grid)
            moments["phi_x_sq"].append(float((dens * px**2).sum() * dx))
            moments["phi_xx"].append(float((dens * pxx).sum() * dx))
            moments["phi_xx_sq"].append(float((dens * pxx**2).sum() * dx))
        t_prev = t
    return {k: np.asarray(v) for k, v in moments.items()}


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def functional_gradient(xi, mu, cfg=None):
    """Derivative of the Parisi functional with respect to each piece of mu.

    For the piece [a, b): (1/2) int_a^b xi''(t) (E[Phi_x(t, X_t)^2] - t) dt,
    by 8-point Gauss-Legendre quadrature.
    """
    pieces = mu.intervals()
    nodes, weights = [], []
    for a, b, _ in pieces:
        nodes.append(a + (b - a) * (_GL_NODES + 1) / 2)
        weights.append((b - a) / 2 * _GL_WEIGHTS)
    flat = np.concatenate(nodes)
    order = np.argsort(flat)
    mom = path_moments(xi, mu, flat[order], cfg)["phi_x_sq"]
    ex2 = np.empty_like(flat)
    ex2[order] = mom
    grad = []
    for j, (t, w) in enumerate(zip(nodes, weights)):
        e = ex2[j * len(_GL_NODES):(j + 1) * len(_GL_NODES)]
        grad.append(0.5 * float(np.sum(w * xi.d2xi(t) * (e - t))))
    return np.asarray(grad)


def mu_cap(xi, cfg):
    """Largest mu the exponential step can represent on this grid."""
    x_max = cfg.resolve_x_max(xi)
    return 300.0 / (x_max + 8 * math.sqrt(float(xi.dxi(1.0))))


def minimize_alg(xi, k, cfg=None, max_iter=500, tol=1e-10, return_info=False):
    """Minimize the Parisi functional over k equal pieces on [0, 1 - eta].

    The last piece continues through t = 1.  Returns ``(mu_star, value)``; if
    the optimizer exhausts its budget a :class:`ParisiConvergenceWarning` is
    issued and the best point found is returned.
    """
    cfg = cfg or GridConfig()
    if xi.is_degenerate():
        raise ValueError("mixture polynomial is identically zero")
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        mu = StepFunction.constant(0.0)
        value = parisi_value(xi, mu, cfg)
        return (mu, value, True) if return_info else (mu, value)
    end = 1.0 - cfg.eta
    cap = mu_cap(xi, cfg)
    scale = math.sqrt(float(xi.dxi(1.0)))

    def objective(v):
        mu = StepFunction.equispaced(np.clip(v, 0, cap), end)
        return parisi_value(xi, mu, cfg), functional_gradient(xi, mu, cfg)

    # optimal mu tends to increase in t, so start from a ramp
    start = np.linspace(0.5, 2.0, k) / scale
    res = optimize.minimize(objective, start, jac=True, method="L-BFGS-B",
                            bounds=[(0.0, cap)] * k,
                            options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-8})
    best = np.clip(res.x, 0, cap)
    mu = StepFunction.equispaced(best, end)
    value = float(res.fun)
    converged = bool(res.success)
    if not converged:
        warnings.warn(f"Parisi minimization did not converge: {res.message}",
                      ParisiConvergenceWarning, stacklevel=2)
    if return_info:
        return mu, value, converged
    return mu, value


def build_solution(xi, k, cfg=None):
    """Minimize, then tabulate the PDE for the minimizer."""
    cfg = cfg or GridConfig()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ParisiConvergenceWarning)
        mu, value, ok = minimize_alg(xi, k, cfg, return_info=True)
    grid = solve_pde(xi, mu, cfg)
    return ParisiSolution(mu=mu, grid=grid, functional_value=functional_value(grid, xi, mu),
                          xi=xi, eta=cfg.eta, config=cfg, converged=ok)


# -- SDE ----------------------------------------------------------------------

def simulate_sde(sol, delta, n_paths, seed, keep_final=True):
    """Euler scheme for dX = xi'' mu Phi_x dt + sqrt(xi'') dW on the grid t = l delta.

    Also runs the normalized martingale with increments
    B sqrt(delta) Phi_xx / sqrt(E[Phi_xx^2]) started from N(0, delta).
    """
    if not 0 < delta <= 0.5:
        raise ValueError("delta must lie in (0, 0.5]")
    grid = sol.grid
    if delta < grid.dt * (1 - 1e-9):
        raise GridError("delta is finer than the PDE time step")
    xi, mu = sol.xi, sol.mu
    L = int(math.floor(1.0 / delta + 1e-9))
    rng = np.random.default_rng(seed)
    x = np.zeros(n_paths)
    zt = rng.normal(0.0, math.sqrt(delta), n_paths)
    mean_pxx = np.empty(L)
    mean_pxx_sq = np.empty(L)
    inc_mean = np.empty(L)
    inc_se = np.empty(L)
    var_x = np.empty(L + 1)
    zt_sq = np.empty(L + 1)
    var_x[0] = 0.0
    zt_sq[0] = float(np.mean(zt**2))
    for ell in range(L):
        t = delta * ell
        pxx = grid.dxx_at(t, x)
        px = grid.dx_at(t, x)
        mean_pxx[ell] = pxx.mean()
        mean_pxx_sq[ell] = np.mean(pxx**2)
        b = rng.standard_normal(n_paths)
        inc = b * math.sqrt(delta) * pxx / math.sqrt(mean_pxx_sq[ell])
        inc_mean[ell] = inc.mean()
        inc_se[ell] = inc.std() / math.sqrt(n_paths)
        zt = zt + inc
        step = float(xi.dxi(delta * (ell + 1)) - xi.dxi(t))
        x = x + float(xi.d2xi(t)) * mu(t) * px * delta + math.sqrt(step) * b
        var_x[ell + 1] = x.var()
        zt_sq[ell + 1] = float(np.mean(zt**2))
    return SdeStats(delta=delta, n_paths=n_paths, mean_phixx=mean_pxx,
                    mean_phixx_sq=mean_pxx_sq, tilde_z_sq=zt_sq,
                    increment_mean=inc_mean, increment_stderr=inc_se, var_x=var_x,
                    tilde_z_final=zt if keep_final else None)


def normalization_drift(xi, stats):
    """Per-step |(xi'((l+1)delta) - xi'(l delta)) / delta * E[Phi_xx^2] - 1|."""
    delta = stats.delta
    ell = np.arange(stats.steps)
    rate = (xi.dxi(delta * (ell + 1)) - xi.dxi(delta * ell)) / delta
    return np.abs(rate * stats.mean_phixx_sq - 1.0)


def nonlinearity_constants(sol, stats, delta, r):
    """c_l = sqrt(delta / (nu_{l+1} E[Phi_xx(l delta, X_l)^2])) for l = 0..L-1."""
    from .analysis import nu

    if np.any(stats.mean_phixx_sq <= 0):
        raise ValueError("E[Phi_xx^2] must be positive at every step")
    L = stats.steps
    nus = np.array([nu(sol.xi, delta, ell + 1, r) for ell in range(L)])
    return np.sqrt(delta / (nus * stats.mean_phixx_sq))


def alg_energy_estimate(sol, stats, eta=None):
    """sum_l xi''(l delta) E[Phi_xx(l delta, X_l)] delta over l delta <= 1 - eta."""
    eta = sol.eta if eta is None else eta
    delta = stats.delta
    ell = np.arange(stats.steps)
    t = delta * ell
    keep = t <= 1 - eta + 1e-12
    return float(np.sum(sol.xi.d2xi(t[keep]) * stats.mean_phixx[keep]) * delta)


# -- persistence ----------------------------------------------------------------

TABLE_MAGIC = b"CSPAMP-PARISI-TABLE 1\n"


def save_table(sol, path):
    """Header line of JSON, then row-major Phi_x and Phi_xx as little-endian float64."""
    g = sol.grid
    header = {
        "xi": sol.xi.coefficients.tolist(),
        "eta": sol.eta,
        "n_t": len(g.t_grid),
        "n_x": len(g.x_grid),
        "x_max": g.x_max,
        "mu": sol.mu.to_dict(),
        "functional_value": sol.functional_value,
        "phi00": g.phi00(),
        "config": sol.config.to_dict(),
        "converged": sol.converged,
    }
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(g.phi_x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(g.phi_xx, dtype="<f8").tobytes())


def load_table(path):
    with open(path, "rb") as fh:
        if fh.readline() != TABLE_MAGIC:
            raise ValueError(f"{path} is not a Parisi table file")
        header = json.loads(fh.readline())
        n_t, n_x = header["n_t"], header["n_x"]
        size = n_t * n_x
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != 2 * size:
        raise ValueError(f"{path} is truncated")
    phi_x = data[:size].reshape(n_t, n_x).astype(np.float64)
    phi_xx = data[size:].reshape(n_t, n_x).astype(np.float64)
    x_max = header["x_max"]
    t_grid = np.linspace(0.0, 1.0, n_t)
    x_grid = np.linspace(-x_max, x_max, n_x)
    # only Phi(0, 0) is kept; the full Phi table is not part of the format
    phi = np.full((n_t, n_x), np.nan)
    phi[0, n_x // 2] = header["phi00"]
    phi[-1] = np.abs(x_grid)
    grid = PdeGrid(t_grid, x_grid, phi, phi_x, phi_xx)
    cfg_d = dict(header["config"])
    cfg = GridConfig(**cfg_d)
    xi = MixturePolynomial(np.asarray(header["xi"])[1:])
    return ParisiSolution(mu=StepFunction.from_dict(header["mu"]), grid=grid,
                          functional_value=header["functional_value"], xi=xi,
                          eta=header["eta"], config=cfg, converged=header["converged"])


def cache_key(xi, k, cfg):
    blob = json.dumps({"xi": [float(c).hex() for c in xi.coefficients], "k": int(k),
                       "grid": cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def cached_solution(xi, k, cfg=None, cache_dir=None):
    """Load the solution for (xi, k, cfg) from ``cache_dir``, building it on a miss."""
    cfg = cfg or GridConfig()
    if cache_dir is None:
        return build_solution(xi, k, cfg)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"parisi-{cache_key(xi, k, cfg)}.bin")
    if os.path.exists(path):
        return load_table(path)
    sol = build_solution(xi, k, cfg)
    tmp = path + f".tmp{os.getpid()}"
    save_table(sol, tmp)
    os.replace(tmp, path)
    return sol


def with_backend(cfg, backend):
    return replace(cfg, backend=backend)
