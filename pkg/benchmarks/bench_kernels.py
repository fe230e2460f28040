"""Time the compiled kernels against their numpy fallbacks.

Both variants are imported from the same module, so one process compares
them directly.  ``--engine`` additionally times a full message-passing run in
two subprocesses, with and without ``CSPAMP_DISABLE_NUMBA``.

    python benchmarks/bench_kernels.py [--repeat 5] [--engine]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cspamp import _kernels, predicate


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    out = []
    for name, m in (("maxcut2", 1 << 22), ("nae3", 1 << 21), ("xor4even", 1 << 20)):
        p = predicate.named(name)
        coef, mask, count = p.derivative_terms()
        z = rng.normal(size=(m, p.r))
        signs = np.where(rng.random((m, p.r)) < 0.5, 1.0, -1.0)
        buf = np.empty((m, p.r))
        out.append((f"clause_partials {name} m={m}",
                    lambda k, z=z, s=signs, c=coef, ma=mask, co=count, b=buf: k(z, s, c, ma, co, b),
                    _kernels._partials_nb, _kernels._partials_np))
    E, n = 1 << 23, 1 << 15
    ev = rng.integers(0, n, E)
    vals = rng.normal(size=E)
    out.append((f"node_sum E={E}", lambda k: k(ev, vals, n), _kernels._node_sum_nb, _kernels._node_sum_np))
    row = rng.normal(size=4001)
    xs = rng.normal(0, 2, 1 << 22)
    dst = np.empty(xs.size)
    out.append((f"interp_row points={xs.size}", lambda k: k(row, -6.0, 0.003, xs, dst),
                _kernels._interp_nb, _kernels._interp_np))
    padded = rng.normal(size=6000)
    kernel = rng.random(41)
    out.append(("convolve_valid 6000x41", lambda k: k(padded, kernel),
                _kernels._convolve_nb, _kernels._convolve_np))
    return out


ENGINE_SCRIPT = """
import time
from cspamp import _kernels, engine, instance, parisi, predicate
p = predicate.named("maxcut2")
sol = parisi.build_solution(predicate.mixture(p), 1, parisi.GridConfig(dt=0.01, half_points=400))
st = parisi.simulate_sde(sol, 0.1, 10000, 0)
c = parisi.nonlinearity_constants(sol, st, 0.1, 2)
inst = instance.sample_index_regular(1 << 14, 256, 2, 0)
engine.run(inst, p, sol, c, engine.RunConfig(delta=0.1))
t0 = time.perf_counter()
engine.run(inst, p, sol, c, engine.RunConfig(delta=0.1))
print(_kernels.BACKEND, time.perf_counter() - t0)
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--engine", action="store_true", help="also time a full engine run per backend")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<36} {'numba s':>10} {'numpy s':>10} {'speedup':>8}")
    for label, call, nb_fn, np_fn in cases(rng):
        t_nb = best_of(lambda: call(nb_fn), args.repeat)
        t_np = best_of(lambda: call(np_fn), args.repeat)
        print(f"{label:<36} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.2f}")
    if args.engine:
        for flag in ("0", "1"):
            env = dict(os.environ, CSPAMP_DISABLE_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", ENGINE_SCRIPT], env=env,
                                 capture_output=True, text=True, check=True).stdout.split()
            print(f"engine run n=2^14 d=256 delta=0.1, {out[0]:<6} backend: {float(out[1]):.2f} s")


if __name__ == "__main__":
    main()
