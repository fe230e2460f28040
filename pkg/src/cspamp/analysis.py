"""Statistical checks of the message-passing dynamics.

Gaussian state-evolution predictions, the exact conditional-variance
recurrence for messages, 1-D Wasserstein distances and cross-seed spread.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .predicate import MixturePolynomial


def nu(xi, delta, ell, r):
    """Predicted message variance at step ell: (xi'(l delta) - xi'((l-1) delta)) / r."""
    L = int(math.floor(1.0 / delta + 1e-9))
    if not 1 <= ell <= L:
        raise ValueError(f"ell must lie in [1, {L}]")
    return float((xi.dxi(ell * delta) - xi.dxi((ell - 1) * delta)) / r)


def double_factorial(k):
    return math.prod(range(k, 0, -2)) if k > 0 else 1


def gaussian_moment(k, var):
    return 0.0 if k % 2 else double_factorial(k - 1) * var ** (k // 2)


# -- moments ---------------------------------------------------------------------

@dataclass
class MomentReport:
    ell: int
    nu: float
    count: int
    empirical: np.ndarray
    stderr: np.ndarray
    predicted: np.ndarray
    passed: np.ndarray
    node_empirical: np.ndarray = None
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return bool(np.all(self.passed))

    def to_dict(self):
        return {
            "ell": self.ell, "nu": self.nu, "count": self.count,
            "moments": [
                {"k": k + 1, "empirical": float(self.empirical[k]), "stderr": float(self.stderr[k]),
                 "predicted": float(self.predicted[k]), "pass": bool(self.passed[k])}
                for k in range(len(self.empirical))
            ],
            "warnings": list(self.warnings),
        }


def moment_report(samples, ell, xi, delta, r, node_samples=None, max_k=6,
                  odd_stderr=3.0, var_rtol=0.05, fourth_rtol=0.10, even_rtol=0.25,
                  min_count=1000, subsample=None, seed=0):
    """Compare empirical moments 1..max_k of u^ell with N(0, nu_ell).

    ``samples`` are message increments u_{i->a}^ell (for example one row of
    ``History.u_edge``).  Odd moments must lie within ``odd_stderr`` standard
    errors of zero; the second and fourth within ``var_rtol``/``fourth_rtol``
    relative error, higher even moments within ``even_rtol``.
    """
    u = np.asarray(samples, dtype=np.float64).ravel()
    if subsample is not None and u.size > subsample:
        u = np.random.default_rng(seed).choice(u, size=subsample, replace=False)
    v = nu(xi, delta, ell, r)
    warnings = []
    if u.size < min_count:
        warnings.append(f"only {u.size} samples (< {min_count})")
    ks = np.arange(1, max_k + 1)
    emp = np.array([np.mean(u**k) for k in ks]) if u.size else np.full(max_k, np.nan)
    se = (np.array([np.std(u**k) for k in ks]) / math.sqrt(max(u.size, 1))
          if u.size else np.full(max_k, np.nan))
    pred = np.array([gaussian_moment(k, v) for k in ks])
    passed = np.zeros(max_k, dtype=bool)
    for i, k in enumerate(ks):
        if k % 2:
            passed[i] = abs(emp[i]) <= odd_stderr * se[i]
        else:
            tol = var_rtol if k == 2 else fourth_rtol if k == 4 else even_rtol
            passed[i] = abs(emp[i] - pred[i]) <= tol * pred[i]
    if u.size < min_count:
        passed[:] = False
    node_emp = None
    if node_samples is not None:
        un = np.asarray(node_samples, dtype=np.float64).ravel()
        node_emp = np.array([np.mean(un**k) for k in ks])
    return MomentReport(ell=ell, nu=v, count=int(u.size), empirical=emp, stderr=se,
                        predicted=pred, passed=passed, node_empirical=node_emp,
                        warnings=warnings)


def step_correlation(history, a, b):
    """Correlation of u^a and u^b at the same recorded directed pairs, with stderr."""
    x = history.u_edge[a - 1]
    y = history.u_edge[b - 1]
    prod = (x - x.mean()) * (y - y.mean())
    rho = prod.mean() / (x.std() * y.std())
    se = prod.std() / (x.std() * y.std()) / math.sqrt(x.size)
    return float(rho), float(se)


# -- variance recurrence ------------------------------------------------------------

@dataclass
class TauDiagnostics:
    ell: np.ndarray
    mean_sq_dev: np.ndarray
    count: int


def _pair_terms(p):
    """For each position j: list of (c1 c2, symmetric difference mask, common mask)."""
    coef, mask, count = p.derivative_terms()
    out = []
    for j in range(p.r):
        rows = []
        for t1 in range(count[j]):
            for t2 in range(count[j]):
                m1, m2 = int(mask[j, t1]), int(mask[j, t2])
                rows.append((coef[j, t1] * coef[j, t2], m1 ^ m2, m1 & m2))
        out.append(rows)
    return out


def tau_base(inst, p, delta):
    """(tau^1)^2 for every directed pair: sum_{S contains j} f^(S)^2 delta^{|S|-1}, averaged."""
    per_pos = np.zeros(p.r)
    for j in range(p.r):
        for s in range(1 << p.r):
            if s >> j & 1:
                per_pos[j] += p.fourier[s] ** 2 * delta ** (bin(s).count("1") - 1)
    return np.tile(per_pos, inst.m)


def _edge_h(inst, p, z_prev, A_prev, tau_sq):
    """Per-edge E[(D f_b(z_prev + A u) - D f_b(z_prev))^2] with u ~ (0, tau^2)."""
    m, r = inst.m, inst.r
    y = (inst.signs * z_prev.reshape(m, r)).astype(np.float64)
    s = (A_prev.reshape(m, r) ** 2) * tau_sq.reshape(m, r)
    y2 = y * y
    h = np.zeros((m, r))
    for j, rows in enumerate(_pair_terms(p)):
        for c, sym, common in rows:
            if common == 0:
                continue
            prod_sym = np.ones(m)
            full = np.ones(m)
            base = np.ones(m)
            for k in range(r):
                if sym >> k & 1:
                    prod_sym *= y[:, k]
                if common >> k & 1:
                    full *= y2[:, k] + s[:, k]
                    base *= y2[:, k]
            h[:, j] += c * prod_sym * (full - base)
    return h.reshape(-1)


def tau_step(inst, p, z_prev, A_prev, tau_sq):
    """(tau^{l+1})^2 on every directed pair from z^{l-1}, A^{l-1} and (tau^l)^2.

    Each clause-side term depends only on its edge, so the sum over the other
    clauses of a variable is its total minus the edge's own term.
    """
    d = inst.m * inst.r // inst.n
    h = _edge_h(inst, p, z_prev, A_prev, tau_sq)
    ev = inst.edge_var
    total = np.bincount(ev, weights=h, minlength=inst.n)
    return (total[ev] - h) / (d - 1)


class TauTracker:
    """Engine observer that advances the variance recurrence alongside a run."""

    def __init__(self, inst, p, xi, delta, sample=None, seed=0):
        self.inst, self.p, self.xi, self.delta = inst, p, xi, delta
        self.tau_sq = None
        self.prev = None
        self.ells = []
        self.devs = []
        self.sample = None
        E = inst.m * inst.r
        if sample is not None and sample < E:
            self.sample = np.sort(np.random.default_rng(seed).choice(E, sample, replace=False))
        self.last_tau_sq = None

    def __call__(self, ell, state, u_node, u_edge):
        # at iteration ell the increment u^{ell+1} is about to be applied
        if ell == 0:
            tau = tau_base(self.inst, self.p, self.delta)
        else:
            z_prev, A_prev = self.prev
            tau = tau_step(self.inst, self.p, z_prev, A_prev, self.tau_sq)
        self.tau_sq = tau
        self.prev = (state.z_edge.copy(), state.A_edge.copy())
        v = nu(self.xi, self.delta, ell + 1, self.inst.r)
        sel = tau if self.sample is None else tau[self.sample]
        self.ells.append(ell + 1)
        self.devs.append(float(np.mean((sel - v) ** 2)))
        self.last_tau_sq = tau

    def diagnostics(self):
        count = self.inst.m * self.inst.r if self.sample is None else len(self.sample)
        return TauDiagnostics(ell=np.array(self.ells), mean_sq_dev=np.array(self.devs), count=count)


def tau_recurrence(state, inst, p, delta, prev=None, tau_sq=None):
    """(tau^{l+1})^2 for every directed pair.

    With ``prev`` and ``tau_sq`` unset this is the base case; otherwise
    ``prev = (z_edge, A_edge)`` from step l-1 and ``tau_sq`` holds (tau^l)^2.
    """
    if prev is None:
        if tau_sq is not None:
            raise ValueError("prior-step state is required with tau_sq")
        return tau_base(inst, p, delta)
    if tau_sq is None:
        raise ValueError("missing prior-step tau")
    return tau_step(inst, p, prev[0], prev[1], tau_sq)


# -- Wasserstein -------------------------------------------------------------------

def w1_distance(samples, sigma_sq):
    """W1 between the empirical law of ``samples`` and N(0, sigma_sq).

    Sorted samples are matched with Gaussian quantiles at the mid-ranks.
    """
    if not sigma_sq > 0:
        raise ValueError("sigma_sq must be positive")
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size < 100:
        raise ValueError("need at least 100 samples")
    q = ndtri((np.arange(x.size) + 0.5) / x.size) * math.sqrt(sigma_sq)
    return float(np.mean(np.abs(x - q)))


# -- concentration -----------------------------------------------------------------

@dataclass
class Concentration:
    mean: float
    std: float
    n: int
    count: int


def _config_signature(res):
    d = res.config.to_dict()
    d.pop("seed", None)
    d.pop("rounding_seed", None)
    return tuple(sorted(d.items())), len(res.z_final)


def seed_concentration(results, min_results=5):
    """Mean and (ddof=1) standard deviation of the satisfying fraction across seeds."""
    results = list(results)
    if len(results) < min_results:
        raise ValueError(f"need at least {min_results} results")
    sigs = {_config_signature(r) for r in results}
    if len(sigs) != 1:
        raise ValueError("results come from different configurations")
    vals = np.array([r.satisfying_fraction for r in results])
    return Concentration(mean=float(vals.mean()), std=float(vals.std(ddof=1)),
                         n=len(results[0].z_final), count=len(vals))
