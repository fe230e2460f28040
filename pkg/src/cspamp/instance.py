"""Random CSP instances as r-uniform hypergraphs with per-clause signs.

Clause ``a`` has ordered variables ``vars[a, 0..r-1]`` and signs
``signs[a, 0..r-1]``; it is satisfied by ``x`` when ``f(signs[a] * x[vars[a]]) = 1``.
Edge ``e = a * r + j`` denotes position ``j`` of clause ``a``.
"""

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class RegularizationError(RuntimeError):
    pass


@dataclass(eq=False)
class CspInstance:
    n: int
    vars: np.ndarray
    signs: np.ndarray
    d: int = None
    _adj: tuple = field(default=None, repr=False)

    def __post_init__(self):
        self.vars = np.ascontiguousarray(self.vars, dtype=np.int32)
        self.signs = np.ascontiguousarray(self.signs, dtype=np.int8)
        if self.vars.ndim != 2 or self.vars.shape != self.signs.shape:
            raise ValueError("vars and signs must be (m, r) arrays of equal shape")
        if self.vars.size and (self.vars.min() < 0 or self.vars.max() >= self.n):
            raise ValueError("variable id out of range")
        if not np.all(np.abs(self.signs) == 1):
            raise ValueError("signs must be +1 or -1")

    @property
    def m(self):
        return self.vars.shape[0]

    @property
    def r(self):
        return self.vars.shape[1]

    @property
    def alpha(self):
        return self.m / self.n

    @property
    def edge_var(self):
        """Variable at each edge, flattened in clause-major order."""
        return self.vars.reshape(-1)

    @property
    def adjacency(self):
        """CSR arrays ``(ptr, edges)``: variable i owns ``edges[ptr[i]:ptr[i+1]]``."""
        if self._adj is None:
            ev = self.edge_var
            order = np.argsort(ev, kind="stable").astype(np.int64)
            ptr = np.zeros(self.n + 1, dtype=np.int64)
            np.cumsum(np.bincount(ev, minlength=self.n), out=ptr[1:])
            self._adj = (ptr, order)
        return self._adj

    def neighbors(self, i):
        """(clause, position) pairs incident to variable ``i``."""
        ptr, edges = self.adjacency
        e = edges[ptr[i]:ptr[i + 1]]
        return list(zip((e // self.r).tolist(), (e % self.r).tolist()))

    def degrees(self):
        return np.bincount(self.edge_var, minlength=self.n)

    def index_degrees(self):
        """(n, r) array: occurrences of each variable at each position."""
        out = np.zeros((self.n, self.r), dtype=np.int64)
        for j in range(self.r):
            out[:, j] = np.bincount(self.vars[:, j], minlength=self.n)
        return out

    def is_index_regular(self, d=None):
        d = self.d if d is None else d
        if d is None or d % self.r:
            return False
        return bool(np.all(self.index_degrees() == d // self.r))

    def repeated_clauses(self):
        """Number of clauses that use some variable more than once."""
        s = np.sort(self.vars, axis=1)
        return int(np.any(s[:, 1:] == s[:, :-1], axis=1).sum())

    def with_signs(self, signs):
        return CspInstance(self.n, self.vars, signs, self.d)

    def to_text(self):
        buf = io.StringIO()
        buf.write(f"{self.n} {self.m} {self.r} {self.d or 0}\n")
        sym = np.where(self.signs > 0, "+", "-")
        ids = self.vars.astype(str)
        rows = np.concatenate((ids, sym), axis=1)
        buf.write("\n".join(" ".join(row) for row in rows))
        if self.m:
            buf.write("\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        head, _, body = text.partition("\n")
        n, m, r, d = (int(v) for v in head.split())
        tok = np.array(body.split())
        if tok.size != m * 2 * r:
            raise ValueError("instance body does not match header")
        tok = tok.reshape(m, 2 * r)
        vars_ = tok[:, :r].astype(np.int64)
        bad = ~np.isin(tok[:, r:], ("+", "-"))
        if bad.any():
            raise ValueError("signs must be '+' or '-'")
        signs = np.where(tok[:, r:] == "+", 1, -1)
        if m == 0:
            vars_ = np.zeros((0, r), dtype=np.int64)
            signs = np.zeros((0, r), dtype=np.int64)
        return cls(n, vars_, signs, d or None)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


@dataclass
class RegularizationStats:
    removed_clauses: int
    added_clauses: int
    alpha_prime: int
    treelike_fraction_before: float = None
    treelike_fraction_after: float = None
    attempts: int = 1


def _arity(p):
    return p if isinstance(p, (int, np.integer)) else p.r


def _random_signs(rng, shape):
    return (1 - 2 * rng.integers(0, 2, size=shape)).astype(np.int8)


def sample_csp(n, alpha, p, seed):
    """m = round(alpha n) clauses with i.i.d. uniform variables and signs.

    ``p`` is a predicate or just its arity.  Repeated variables within a
    clause are allowed.
    """
    r = _arity(p)
    if n < 1:
        raise ValueError("need at least one variable")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    m = int(round(alpha * n))
    if m * r >= 2**31 or n >= 2**31:
        raise OverflowError("instance too large for 32-bit edge indexing")
    rng = np.random.default_rng(seed)
    vars_ = rng.integers(0, n, size=(m, r), dtype=np.int64)
    return CspInstance(n, vars_, _random_signs(rng, (m, r)))


def sample_index_regular(n, d, r, seed):
    """Configuration model: each position gets a uniform permutation of the n*(d/r) slots."""
    if d % r:
        raise ValueError("r must divide d")
    per = d // r
    m = n * per
    if m < 1:
        raise ValueError("need n*d/r >= 1")
    if m * r >= 2**31:
        raise OverflowError("instance too large for 32-bit edge indexing")
    rng = np.random.default_rng(seed)
    slots = np.repeat(np.arange(n, dtype=np.int32), per)
    vars_ = np.empty((m, r), dtype=np.int32)
    for j in range(r):
        vars_[:, j] = rng.permutation(slots)
    return CspInstance(n, vars_, _random_signs(rng, (m, r)), d)


def regularized_alpha(d, r):
    """ceil((d + sqrt(d) ln d) / r), the per-position target degree."""
    if d <= 1:
        return int(math.ceil(d / r))
    return int(math.ceil((d + math.sqrt(d) * math.log(d)) / r))


def index_regularize(inst, L=0, seed=0, max_attempts=1000, distinct=False, treelike=True):
    """Trim over-full (variable, position) pairs, then top every pair up to alpha'.

    Removal takes the highest-id clauses first.  New clauses draw the variable
    at each position with probability proportional to its residual degree,
    which amounts to a uniform permutation of the residual slots.  With
    ``distinct=True`` clauses that repeat a variable swap one slot with a random
    new clause, for at most ``max_attempts`` rounds.
    """
    r = inst.r
    d = r * inst.alpha
    ap = regularized_alpha(d, r)
    rng = np.random.default_rng(seed)
    vars_ = inst.vars
    keep = np.ones(inst.m, dtype=bool)
    for j in range(r):
        col = vars_[:, j]
        counts = np.bincount(col, minlength=inst.n)
        over = np.flatnonzero(counts > ap)
        if not len(over):
            continue
        order = np.argsort(col, kind="stable")
        start = np.concatenate(([0], np.cumsum(counts)))
        for v in over:
            ids = order[start[v]:start[v + 1]]
            # earlier removals may already have brought this pair down
            ids = ids[keep[ids]]
            excess = len(ids) - ap
            if excess > 0:
                keep[ids[-excess:]] = False
    kept_vars = vars_[keep]
    kept_signs = inst.signs[keep]
    removed = int(inst.m - keep.sum())
    residual = ap - np.stack([np.bincount(kept_vars[:, j], minlength=inst.n)
                              for j in range(r)], axis=1)
    assert np.all(residual >= 0)
    need = int(residual[:, 0].sum())
    assert np.all(residual.sum(axis=0) == need)
    new = np.empty((need, r), dtype=np.int32)
    for j in range(r):
        new[:, j] = rng.permutation(np.repeat(np.arange(inst.n, dtype=np.int32), residual[:, j]))
    attempt = 0
    while distinct and need > 1:
        s = np.sort(new, axis=1)
        bad = np.flatnonzero(np.any(s[:, 1:] == s[:, :-1], axis=1))
        if not len(bad):
            break
        attempt += 1
        if attempt > max_attempts:
            raise RegularizationError(f"repeated variables left after {max_attempts} repair rounds")
        # swapping a slot with a random clause at the same position keeps residual degrees
        pos = rng.integers(0, r, len(bad))
        other = rng.integers(0, need, len(bad))
        for b, j, o in zip(bad, pos, other):
            new[b, j], new[o, j] = new[o, j], new[b, j]
    out = CspInstance(inst.n, np.concatenate((kept_vars, new)),
                      np.concatenate((kept_signs, _random_signs(rng, (need, r)))), r * ap)
    if not out.is_index_regular():
        raise RegularizationError("output is not index-regular")
    stats = RegularizationStats(removed_clauses=removed, added_clauses=need, alpha_prime=ap,
                                attempts=attempt)
    if treelike:
        stats.treelike_fraction_before = treelike_fraction(inst, L)
        stats.treelike_fraction_after = treelike_fraction(out, L)
    return out, stats


def treelike_flags(inst, L):
    """Per-variable flag: radius-(L+1) neighborhood is a tree without repeats."""
    if L < 0:
        raise ValueError("L must be non-negative")
    ptr, edges = inst.adjacency
    return _kernels.treelike_flags(inst.vars.astype(np.int64), ptr, edges, L + 1)


def treelike_fraction(inst, L):
    return float(np.mean(treelike_flags(inst, L))) if inst.n else 1.0


def evaluate(inst, p, assignment):
    """Fraction of satisfied clauses under a ±1 assignment."""
    x = np.asarray(assignment)
    if x.shape != (inst.n,):
        raise ValueError("assignment must have length n")
    if not np.all(np.abs(x) == 1):
        raise ValueError("assignment entries must be +1 or -1")
    if inst.m == 0:
        return 0.0
    lit = inst.signs * x.astype(np.int8)[inst.vars]
    weights = 1 << (inst.r - 1 - np.arange(inst.r))
    idx = (lit < 0).astype(np.int64) @ weights
    return float(p.truth_table[idx].mean())


def clause_values(inst, p, z):
    """Multilinear extension of f at each clause's signed spins."""
    y = inst.signs * np.asarray(z, dtype=np.float64)[inst.vars]
    return p.multilinear(y)
