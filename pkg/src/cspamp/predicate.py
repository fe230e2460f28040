"""Boolean predicates on {±1}^r, their Fourier expansions and mixture polynomials.

Truth tables are indexed lexicographically by sign pattern with +1 before -1
and coordinate 0 most significant, so bit ``r-1-j`` of the table index is set
exactly when ``x_j = -1``.

Fourier subsets are bitmasks in which bit ``j`` stands for coordinate ``j``.
Coordinates are zero-based throughout.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

MIN_ARITY = 2
MAX_ARITY = 12


def walsh_hadamard(values):
    """Unnormalized fast Walsh-Hadamard transform along the last axis."""
    h = np.array(values, dtype=np.float64, copy=True)
    n = h.shape[-1]
    if n & (n - 1):
        raise ValueError("length must be a power of two")
    step = 1
    while step < n:
        h = h.reshape(h.shape[:-1] + (n // (2 * step), 2, step))
        a = h[..., 0, :].copy()
        b = h[..., 1, :]
        h[..., 0, :] = a + b
        h[..., 1, :] = a - b
        h = h.reshape(h.shape[:-3] + (n,))
        step *= 2
    return h


def _reverse_bits(r):
    idx = np.arange(1 << r)
    out = np.zeros_like(idx)
    for j in range(r):
        out |= ((idx >> j) & 1) << (r - 1 - j)
    return out


def popcount(masks):
    masks = np.asarray(masks, dtype=np.int64)
    out = np.zeros_like(masks)
    for j in range(MAX_ARITY + 1):
        out += (masks >> j) & 1
    return out


def sign_patterns(r):
    """All points of {±1}^r in truth-table order, shape (2^r, r)."""
    idx = np.arange(1 << r)[:, None]
    bits = (idx >> (r - 1 - np.arange(r))[None, :]) & 1
    return 1 - 2 * bits


def table_index(x):
    """Truth-table index of sign vectors ``x`` (last axis = coordinates)."""
    x = np.asarray(x)
    r = x.shape[-1]
    weights = 1 << (r - 1 - np.arange(r))
    return ((x < 0).astype(np.int64) * weights).sum(axis=-1)


@dataclass(frozen=True)
class MixturePolynomial:
    """xi(s) = sum_j weights[j-1] s^j, the Fourier weight profile of a predicate."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if np.any(w < 0):
            raise ValueError("mixture weights must be non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def coefficients(self):
        """Power-series coefficients c_0..c_r with c_0 = 0."""
        return np.concatenate(([0.0], self.weights))

    @property
    def degree(self):
        return len(self.weights)

    def xi(self, s):
        return np.polynomial.polynomial.polyval(s, self.coefficients)

    def dxi(self, s):
        c = np.polynomial.polynomial.polyder(self.coefficients)
        return np.polynomial.polynomial.polyval(s, c)

    def d2xi(self, s):
        c = np.polynomial.polynomial.polyder(self.coefficients, 2)
        return np.polynomial.polynomial.polyval(s, c)

    def is_degenerate(self):
        return not np.any(self.weights > 0)

    def scaled(self, factor):
        return MixturePolynomial(self.weights * factor)

    def __eq__(self, other):
        return isinstance(other, MixturePolynomial) and np.array_equal(
            self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())


class PredicateFlags(NamedTuple):
    is_even: bool
    has_linear: bool


@dataclass(frozen=True, eq=False)
class Predicate:
    """A predicate f: {±1}^r -> {0,1} together with its Fourier coefficients.

    ``fourier[mask]`` is the coefficient of the monomial prod_{j in mask} x_j.
    Build instances with :func:`fourier_transform`.
    """

    r: int
    truth_table: np.ndarray
    fourier: np.ndarray
    name: str = ""
    _terms: tuple = field(default=None, repr=False)

    @property
    def mean(self):
        return float(self.fourier[0])

    def coefficient(self, subset):
        mask = 0
        for j in subset:
            mask |= 1 << int(j)
        return float(self.fourier[mask])

    def fourier_dict(self, tol=0.0):
        """Nonzero coefficients keyed by sorted coordinate tuples."""
        out = {}
        for mask, c in enumerate(self.fourier):
            if abs(c) > tol:
                out[tuple(j for j in range(self.r) if mask >> j & 1)] = float(c)
        return out

    def __call__(self, x):
        """Truth-table value at sign vectors ``x``."""
        return self.truth_table[table_index(x)]

    def multilinear(self, y):
        """Multilinear extension sum_S f^(S) prod_{j in S} y_j (last axis = coords)."""
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros(y.shape[:-1])
        for mask in np.flatnonzero(self.fourier):
            term = np.full(y.shape[:-1], self.fourier[mask])
            for j in range(self.r):
                if mask >> j & 1:
                    term = term * y[..., j]
            out += term
        return out

    def derivative_terms(self):
        """Per-coordinate monomials of the partial derivative.

        Returns ``(coef, mask, count)`` arrays of shape (r, T), (r, T), (r,):
        D_j f(y) = sum_t coef[j,t] prod_{k in mask[j,t]} y_k, and no mask contains j.
        """
        if self._terms is None:
            per = []
            for j in range(self.r):
                rows = [(float(self.fourier[s]), s & ~(1 << j))
                        for s in range(1 << self.r)
                        if s >> j & 1 and self.fourier[s] != 0.0]
                per.append(rows)
            width = max(1, max(len(p) for p in per))
            coef = np.zeros((self.r, width))
            mask = np.zeros((self.r, width), dtype=np.int64)
            count = np.zeros(self.r, dtype=np.int64)
            for j, rows in enumerate(per):
                count[j] = len(rows)
                for t, (c, s) in enumerate(rows):
                    coef[j, t] = c
                    mask[j, t] = s
            object.__setattr__(self, "_terms", (coef, mask, count))
        return self._terms

    def to_text(self):
        bits = " ".join(str(int(b)) for b in self.truth_table)
        return f"{self.r}\n{bits}\n"


def fourier_transform(r, table, name=""):
    """Build a :class:`Predicate` from its truth table via the fast cube transform."""
    r = int(r)
    if not MIN_ARITY <= r <= MAX_ARITY:
        raise ValueError(f"arity must lie in [{MIN_ARITY}, {MAX_ARITY}], got {r}")
    table = np.asarray(table)
    if table.shape != (1 << r,):
        raise ValueError(f"truth table must have length 2^{r} = {1 << r}")
    if not np.all((table == 0) | (table == 1)):
        raise ValueError("truth table entries must be 0 or 1")
    table = table.astype(np.uint8)
    # reorder so that bit j of the index means x_j = -1, then transform
    natural = table[_reverse_bits(r)].astype(np.float64)
    coeffs = walsh_hadamard(natural) / (1 << r)
    table.setflags(write=False)
    coeffs.setflags(write=False)
    return Predicate(r=r, truth_table=table, fourier=coeffs, name=name)


def from_function(r, fn, name=""):
    """Tabulate ``fn`` (taking a ±1 vector) and transform it."""
    pts = sign_patterns(r)
    return fourier_transform(r, [int(fn(x)) for x in pts], name=name)


def mixture(p):
    weights = np.zeros(p.r)
    sizes = popcount(np.arange(1 << p.r))
    np.add.at(weights, sizes[1:] - 1, p.fourier[1:] ** 2)
    return MixturePolynomial(weights)


def partial_derivative(p, coord, point):
    """D_coord f at ``point``; the value at ``coord`` itself is ignored."""
    if not 0 <= coord < p.r:
        raise IndexError(f"coordinate {coord} out of range for arity {p.r}")
    point = np.asarray(point, dtype=np.float64)
    if point.shape[-1] != p.r:
        raise ValueError("point must have r entries")
    if not np.all(np.isfinite(point)):
        raise ValueError("point entries must be finite")
    coef, mask, count = p.derivative_terms()
    total = np.zeros(point.shape[:-1])
    for t in range(count[coord]):
        term = np.full(point.shape[:-1], coef[coord, t])
        for k in range(p.r):
            if mask[coord, t] >> k & 1:
                term = term * point[..., k]
        total += term
    return total if total.ndim else float(total)


def predicate_flags(p, tol=1e-14):
    sizes = popcount(np.arange(1 << p.r))
    odd = np.abs(p.fourier[sizes % 2 == 1])
    linear = p.fourier[sizes == 1] ** 2
    return PredicateFlags(is_even=bool(np.all(odd <= tol)),
                          has_linear=bool(linear.sum() > tol))


def _maxcut2():
    return from_function(2, lambda x: x[0] != x[1], name="maxcut2")


def _nae3():
    return from_function(3, lambda x: not (x[0] == x[1] == x[2]), name="nae3")


def _xor4even():
    return from_function(4, lambda x: x[0] * x[1] * x[2] * x[3] == 1, name="xor4even")


NAMED = {"maxcut2": _maxcut2, "nae3": _nae3, "xor4even": _xor4even}


def named(name):
    try:
        return NAMED[name]()
    except KeyError:
        raise KeyError(f"unknown predicate {name!r}; choose from {sorted(NAMED)}") from None


def parse_text(text, name=""):
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise ValueError("predicate text must have exactly two lines")
    r = int(lines[0])
    bits = [int(b) for b in lines[1].split()]
    return fourier_transform(r, bits, name=name)


def load(source):
    """Resolve a built-in name or read a predicate text file."""
    if source in NAMED:
        return named(source)
    with open(source) as fh:
        return parse_text(fh.read(), name=str(source))


def save(p, path):
    with open(path, "w") as fh:
        fh.write(p.to_text())
