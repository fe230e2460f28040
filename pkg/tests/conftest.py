import functools
import os
import tempfile

import pytest

from cspamp import parisi, predicate

_LINES = []


class CriterionLog:
    def __init__(self):
        self.lines = _LINES

    def __call__(self, number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        self.lines.append((number, line))
        print(line)
        return passed


@pytest.fixture(scope="session")
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)


_CACHE = os.environ.get("CSPAMP_TEST_CACHE") or tempfile.mkdtemp(prefix="cspamp-test-")


@functools.lru_cache(maxsize=None)
def parisi_solution(name, k, delta, eta=0.05):
    """Memoized, disk-cached minimizer table for a named predicate."""
    xi = predicate.mixture(predicate.named(name))
    return parisi.cached_solution(xi, k, parisi.GridConfig.for_delta(delta, eta=eta), _CACHE)


@functools.lru_cache(maxsize=None)
def nonlinearities(name, k, delta, paths=100_000, seed=0):
    sol = parisi_solution(name, k, delta)
    stats = parisi.simulate_sde(sol, delta, paths, seed, keep_final=False)
    consts = parisi.nonlinearity_constants(sol, stats, delta, predicate.named(name).r)
    return sol, stats, consts
