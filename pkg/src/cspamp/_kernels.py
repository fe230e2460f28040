"""Hot loops, compiled with numba when available.

Set ``CSPAMP_DISABLE_NUMBA=1`` to force the vectorized numpy versions; both
paths return identical results up to floating-point summation order.
"""

import os

import numpy as np

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

USE_NUMBA = nb is not None and os.environ.get("CSPAMP_DISABLE_NUMBA", "") not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"


def _jit(fn):
    if nb is None:
        return fn
    return nb.njit(cache=True, nogil=True)(fn)


# -- Gaussian convolution on a padded line -----------------------------------

@_jit
def _convolve_nb(values, kernel):
    # valid-mode correlation with a symmetric kernel
    k = kernel.shape[0]
    n = values.shape[0] - k + 1
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(k):
            acc += kernel[j] * values[i + j]
        out[i] = acc
    return out


def _convolve_np(values, kernel):
    return np.convolve(values, kernel[::-1], mode="valid")


# -- linear interpolation in x on a fixed time slice -------------------------

@_jit
def _interp_nb(row, x0, dx, xs, out):
    n = row.shape[0]
    for i in range(xs.shape[0]):
        s = (xs[i] - x0) / dx
        if s <= 0.0:
            out[i] = row[0]
        elif s >= n - 1:
            out[i] = row[n - 1]
        else:
            j = int(s)
            f = s - j
            out[i] = row[j] * (1.0 - f) + row[j + 1] * f
    return out


def _interp_np(row, x0, dx, xs, out):
    n = row.shape[0]
    s = np.clip((xs - x0) / dx, 0.0, n - 1)
    j = np.minimum(s.astype(np.int64), n - 2)
    f = s - j
    out[:] = row[j] * (1.0 - f) + row[j + 1] * f
    return out


# -- clause-side partial derivatives -----------------------------------------

@_jit
def _partials_nb(zmsg, signs, coef, mask, count, out):
    # zmsg, signs, out: (m, r); out[a, j] = eps_j * (D_j f)(eps * zmsg[a])
    m, r = zmsg.shape
    y = np.empty(r)
    for a in range(m):
        for k in range(r):
            y[k] = signs[a, k] * zmsg[a, k]
        for j in range(r):
            acc = 0.0
            for t in range(count[j]):
                term = coef[j, t]
                bits = mask[j, t]
                k = 0
                while bits:
                    if bits & 1:
                        term *= y[k]
                    bits >>= 1
                    k += 1
                acc += term
            out[a, j] = signs[a, j] * acc
    return out


def _partials_np(zmsg, signs, coef, mask, count, out, chunk=1 << 18):
    m, r = zmsg.shape
    for lo in range(0, m, chunk):
        hi = min(m, lo + chunk)
        y = signs[lo:hi] * zmsg[lo:hi]
        cache = {}
        for j in range(r):
            acc = np.zeros(hi - lo)
            for t in range(count[j]):
                s = int(mask[j, t])
                if s not in cache:
                    mono = np.ones(hi - lo)
                    for k in range(r):
                        if s >> k & 1:
                            mono = mono * y[:, k]
                    cache[s] = mono
                acc += coef[j, t] * cache[s]
            out[lo:hi, j] = signs[lo:hi, j] * acc
    return out


# -- per-variable sums over incident edges -----------------------------------

@_jit
def _node_sum_nb(edge_var, values, n):
    out = np.zeros(n)
    for e in range(edge_var.shape[0]):
        out[edge_var[e]] += values[e]
    return out


def _node_sum_np(edge_var, values, n):
    return np.bincount(edge_var, weights=values, minlength=n)


# -- locally-treelike census --------------------------------------------------

@_jit
def _treelike_nb(clause_vars, adj_ptr, adj_edge, radius):
    m, r = clause_vars.shape
    n = adj_ptr.shape[0] - 1
    var_stamp = np.full(n, -1, dtype=np.int64)
    clause_stamp = np.full(m, -1, dtype=np.int64)
    queue_v = np.empty(n, dtype=np.int64)
    queue_from = np.empty(n, dtype=np.int64)
    queue_depth = np.empty(n, dtype=np.int64)
    ok = np.zeros(n, dtype=np.bool_)
    for root in range(n):
        var_stamp[root] = root
        head = 0
        tail = 1
        queue_v[0] = root
        queue_from[0] = -1
        queue_depth[0] = 0
        tree = True
        while head < tail and tree:
            v = queue_v[head]
            via = queue_from[head]
            depth = queue_depth[head]
            head += 1
            if depth >= radius:
                continue
            for p in range(adj_ptr[v], adj_ptr[v + 1]):
                e = adj_edge[p]
                if e == via:
                    continue
                a = e // r
                if clause_stamp[a] == root:
                    tree = False
                    break
                clause_stamp[a] = root
                for k in range(r):
                    if a * r + k == e:
                        continue
                    u = clause_vars[a, k]
                    if var_stamp[u] == root:
                        tree = False
                        break
                    var_stamp[u] = root
                    if tail >= queue_v.shape[0]:
                        tree = False
                        break
                    queue_v[tail] = u
                    queue_from[tail] = a * r + k
                    queue_depth[tail] = depth + 1
                    tail += 1
                if not tree:
                    break
        ok[root] = tree
    return ok


if USE_NUMBA:
    convolve_valid = _convolve_nb
    interp_row = _interp_nb
    clause_partials = _partials_nb
    node_sum = _node_sum_nb
else:
    convolve_valid = _convolve_np
    interp_row = _interp_np
    clause_partials = _partials_np
    node_sum = _node_sum_np

# the census is a graph walk with no vectorized analogue; without numba it runs
# as plain Python through the undecorated function
treelike_flags = _treelike_nb if nb is not None and USE_NUMBA else _treelike_nb.py_func \
    if hasattr(_treelike_nb, "py_func") else _treelike_nb
