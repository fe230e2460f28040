"""Message passing with Parisi-derived nonlinearities on index-regular CSPs.

State lives on variables (``*_node``, length n) and on directed variable-to-
clause pairs (``*_edge``, length m*r, edge ``a*r + j`` = position j of clause a).
One iteration:

    g[e]         = partial derivative of clause a's signed predicate at position j,
                   evaluated at the incoming edge spins of a
    w_node       = sum of g over incident edges / sqrt(d)
    w_edge[e]    = (sqrt(d) w_node[i] - g[e]) / sqrt(d - 1)
    u            = increment of w
    z           += A * u,      A = clamp(c_l * Phi_xx(l delta, x), +-K)
    x           += xi'' mu Phi_x delta + sqrt(r) u

The output spins are truncated to [-1, 1] and rounded independently.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .instance import clause_values, evaluate
from .predicate import mixture, predicate_flags


class PredicateRejected(ValueError):
    pass


class EngineNaNError(FloatingPointError):
    def __init__(self, iteration):
        super().__init__(f"non-finite state at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class RunConfig:
    delta: float = 0.05
    seed: int = 0
    clamp: float = None
    record_history: bool = False
    history_pairs: int = 1 << 17
    rounding_seed: int = None

    @property
    def L(self):
        return int(math.floor(1.0 / self.delta + 1e-9))

    def validate(self):
        if not 0 < self.delta <= 0.5:
            raise ValueError("delta must lie in (0, 0.5]")
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError("clamp K must be positive")

    def to_dict(self):
        return {"delta": self.delta, "L": self.L, "seed": self.seed, "clamp": self.clamp,
                "record_history": self.record_history, "history_pairs": self.history_pairs,
                "rounding_seed": self.rounding_seed}


@dataclass(eq=False)
class MessageState:
    ell: int
    z_node: np.ndarray
    w_node: np.ndarray
    x_node: np.ndarray
    z_edge: np.ndarray
    w_edge: np.ndarray
    x_edge: np.ndarray
    A_node: np.ndarray = None
    A_edge: np.ndarray = None


@dataclass(eq=False)
class History:
    """Per-iteration arrays; edge histories cover ``pairs`` only."""

    z0_node: np.ndarray
    u_node: np.ndarray
    A_node: np.ndarray
    pairs: np.ndarray
    u_edge: np.ndarray
    z_edge: np.ndarray
    A_edge: np.ndarray


@dataclass(eq=False)
class RunResult:
    z_final: np.ndarray
    truncated: np.ndarray
    assignment: np.ndarray
    satisfying_fraction: float
    diagnostics: dict
    config: RunConfig
    clamp: float
    timing: dict
    history: History = None
    state: MessageState = field(default=None, repr=False)

    def to_json_dict(self):
        return {
            "config": self.config.to_dict(),
            "clamp": self.clamp,
            "satisfying_fraction": self.satisfying_fraction,
            "diagnostics": {k: np.asarray(v).tolist() for k, v in self.diagnostics.items()},
            "timing": self.timing,
        }


# -- randomness keyed by (seed, vertex) ----------------------------------------

def _keyed_uniforms(seed, stream, count, per=1):
    """Uniforms in (0, 1): draw k of vertex i depends only on (seed, stream, i, k)."""
    bitgen = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))
    raw = bitgen.random_raw(count * per)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53


def keyed_normals(seed, stream, count):
    u = _keyed_uniforms(seed, stream, count, per=2).reshape(count, 2)
    return np.sqrt(-2.0 * np.log(u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])


def truncate(z):
    return np.clip(z, -1.0, 1.0)


def randomized_round(z_final, seed):
    """Truncate to [-1, 1], then set +1 with probability (1 + trnc z) / 2."""
    trunc = truncate(np.asarray(z_final, dtype=np.float64))
    u = _keyed_uniforms(seed, 1, trunc.size).reshape(trunc.shape)
    assignment = np.where(u < (1.0 + trunc) / 2.0, 1, -1).astype(np.int8)
    return trunc, assignment


round = randomized_round


# -- run -----------------------------------------------------------------------

def check_predicate(p):
    if mixture(p).is_degenerate():
        raise PredicateRejected("predicate has no non-constant Fourier weight")
    if predicate_flags(p).has_linear:
        raise PredicateRejected("predicate has a linear Fourier part")


def default_clamp(sol, consts, delta):
    """10 x the largest |Phi_xx| c_l over the tabulated steps up to the cutoff."""
    grid = sol.grid
    best = 0.0
    for ell, c in enumerate(consts):
        t = delta * ell
        if t > 1 - sol.eta + 1e-12 and ell > 0:
            break
        j = int(np.argmin(np.abs(grid.t_grid - t)))
        best = max(best, float(np.abs(grid.phi_xx[j]).max()) * c)
    return 10.0 * best


def _init_state(inst, seed, delta):
    n, E = inst.n, inst.m * inst.r
    z0 = keyed_normals(seed, 0, n) * math.sqrt(delta)
    return z0, MessageState(
        ell=0,
        z_node=z0.copy(), w_node=np.zeros(n), x_node=np.zeros(n),
        z_edge=z0[inst.edge_var].astype(np.float64), w_edge=np.zeros(E), x_edge=np.zeros(E),
    )


def _sample_pairs(edge_var, count, seed):
    """At most one directed pair per variable: messages leaving the same
    variable share sqrt(d) w_i and are almost perfectly correlated."""
    E = edge_var.size
    if count is None:
        return np.arange(E)
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(E)
    _, first = np.unique(edge_var[order], return_index=True)
    picked = order[first]
    if count < picked.size:
        picked = rng.choice(picked, size=count, replace=False)
    return np.sort(picked)


def run(inst, p, sol, consts, cfg, observers=()):
    """Run L = floor(1/delta) iterations and round the result.

    ``observers`` are called as ``obs(ell, state, u_node, u_edge)`` after the
    nonlinearities for step ``ell`` are fixed and before the spins move.
    """
    t_start = time.perf_counter()
    cfg.validate()
    check_predicate(p)
    if inst.r != p.r:
        raise ValueError("instance arity does not match predicate")
    deg = inst.degrees()
    d = int(deg[0]) if inst.n else 0
    if inst.d is not None and inst.d != d or np.any(deg != d):
        raise ValueError("instance is not degree-regular")
    if d < 2:
        raise ValueError("degree must be at least 2")
    L, delta, r = cfg.L, cfg.delta, inst.r
    if len(consts) < L:
        raise ValueError(f"need {L} nonlinearity constants, got {len(consts)}")
    grid = sol.grid
    if grid.t_grid[-1] < 1 - sol.eta or delta < grid.dt * (1 - 1e-9):
        raise ValueError("Parisi table does not cover [0, 1 - eta] at this delta")
    xi, mu = sol.xi, sol.mu
    K = cfg.clamp if cfg.clamp is not None else default_clamp(sol, consts, delta)
    coef, mask, count = p.derivative_terms()
    ev = inst.edge_var.astype(np.int64)
    signs = inst.signs.astype(np.float64)
    n, E = inst.n, inst.m * r
    sd, sd1 = math.sqrt(d), math.sqrt(d - 1)

    z0, st = _init_state(inst, cfg.seed, delta)

    pairs = _sample_pairs(ev, cfg.history_pairs, cfg.seed) if cfg.record_history else None
    if cfg.record_history:
        hist = History(z0_node=z0.copy(), u_node=np.empty((L, n)), A_node=np.empty((L, n)),
                       pairs=pairs, u_edge=np.empty((L, len(pairs))),
                       z_edge=np.empty((L + 1, len(pairs))), A_edge=np.empty((L, len(pairs))))
        hist.z_edge[0] = st.z_edge[pairs]
    else:
        hist = None

    diag = {k: np.zeros(L) for k in (
        "A_u_sq_node", "u_edge_mean", "u_edge_sq", "u_edge_m4", "u_node_sq",
        "u_sqdiff", "A_sqdiff", "A_edge_mean", "A_node_mean", "clamped_fraction", "frozen")}
    diag["z_edge_sq"] = np.zeros(L + 1)
    diag["z_node_sq"] = np.zeros(L + 1)
    diag["z_edge_sq"][0] = np.mean(st.z_edge**2)
    diag["z_node_sq"][0] = np.mean(st.z_node**2)

    g = np.empty((inst.m, r))
    cutoff = 1 - sol.eta + 1e-12
    A_node = A_edge = None
    for ell in range(L):
        t = delta * ell
        st.ell = ell
        if A_node is None or t <= cutoff:
            c = consts[ell]
            A_node = np.clip(grid.dxx_at(t, st.x_node) * c, -K, K)
            A_edge = np.clip(grid.dxx_at(t, st.x_edge) * c, -K, K)
            diag["clamped_fraction"][ell] = np.mean(np.abs(A_edge) >= K)
        else:
            diag["frozen"][ell] = 1.0
        st.A_node, st.A_edge = A_node, A_edge

        _kernels.clause_partials(st.z_edge.reshape(inst.m, r), signs, coef, mask, count, g)
        gf = g.reshape(-1)
        w_node = _kernels.node_sum(ev, gf, n) / sd
        w_edge = (sd * w_node[ev] - gf) / sd1
        u_node = w_node - st.w_node
        u_edge = w_edge - st.w_edge

        for obs in observers:
            obs(ell, st, u_node, u_edge)

        drift = float(xi.d2xi(t)) * mu(t) * delta
        st.z_node = st.z_node + A_node * u_node
        st.z_edge = st.z_edge + A_edge * u_edge
        if drift:
            st.x_node = st.x_node + drift * grid.dx_at(t, st.x_node)
            st.x_edge = st.x_edge + drift * grid.dx_at(t, st.x_edge)
        st.x_node = st.x_node + math.sqrt(r) * u_node
        st.x_edge = st.x_edge + math.sqrt(r) * u_edge
        st.w_node, st.w_edge = w_node, w_edge

        if not (np.isfinite(st.z_node).all() and np.isfinite(st.x_edge).all()):
            raise EngineNaNError(ell)

        diag["A_u_sq_node"][ell] = np.mean(A_node * u_node**2)
        u2 = u_edge * u_edge
        diag["u_edge_mean"][ell] = u_edge.mean()
        diag["u_edge_sq"][ell] = u2.mean()
        diag["u_edge_m4"][ell] = np.mean(u2 * u2)
        diag["u_node_sq"][ell] = np.mean(u_node**2)
        diag["u_sqdiff"][ell] = np.mean((u_node[ev] - u_edge) ** 2)
        diag["A_sqdiff"][ell] = np.mean((A_node[ev] - A_edge) ** 2)
        diag["A_edge_mean"][ell] = A_edge.mean()
        diag["A_node_mean"][ell] = A_node.mean()
        diag["z_edge_sq"][ell + 1] = np.mean(st.z_edge**2)
        diag["z_node_sq"][ell + 1] = np.mean(st.z_node**2)
        if hist is not None:
            hist.u_node[ell] = u_node
            hist.A_node[ell] = A_node
            hist.u_edge[ell] = u_edge[pairs]
            hist.A_edge[ell] = A_edge[pairs]
            hist.z_edge[ell + 1] = st.z_edge[pairs]
    st.ell = L
    t_loop = time.perf_counter()

    rseed = cfg.rounding_seed if cfg.rounding_seed is not None else cfg.seed
    trunc, assignment = randomized_round(st.z_node, rseed)
    frac = evaluate(inst, p, assignment)
    diag["value_pre_truncation"] = np.array([np.mean(clause_values(inst, p, st.z_node))])
    diag["value_truncated"] = np.array([np.mean(clause_values(inst, p, trunc))])
    timing = {"iterations_s": t_loop - t_start, "total_s": time.perf_counter() - t_start}
    return RunResult(z_final=st.z_node, truncated=trunc, assignment=assignment,
                     satisfying_fraction=frac, diagnostics=diag, config=cfg, clamp=K,
                     timing=timing, history=hist, state=st)


@dataclass
class ValueDecomposition:
    lhs: float
    rhs: float
    gap: float


def value_decomposition(result, inst, p, d, delta):
    """Compare mean clause value at z^L with E[f] + (r/sqrt d) sum_l mean_i A_i^l (u_i^{l+1})^2."""
    if result.history is None:
        raise ValueError("run with record_history=True to decompose the value")
    h = result.history
    lhs = float(np.mean(clause_values(inst, p, result.z_final)))
    L = h.u_node.shape[0]
    terms = np.array([np.mean(h.A_node[ell] * h.u_node[ell] ** 2) for ell in range(L)])
    rhs = p.mean + inst.r / math.sqrt(d) * float(terms.sum())
    return ValueDecomposition(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))


def replay_spins(history):
    """z_i^L rebuilt from the stored node histories, in the engine's summation order."""
    z = history.z0_node.copy()
    for A, u in zip(history.A_node, history.u_node):
        z = z + A * u
    return z
