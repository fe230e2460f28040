import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cspamp import _kernels, analysis, engine, instance, parisi, predicate
from cspamp.analysis import moment_report, nu, seed_concentration, tau_step, w1_distance

XI = predicate.mixture(predicate.named("maxcut2"))


def test_nu_values_and_range():
    assert nu(XI, 0.1, 1, 2) == pytest.approx((0.05 - 0.0) / 2)
    assert nu(XI, 0.1, 10, 2) == pytest.approx(0.05 / 2)
    with pytest.raises(ValueError):
        nu(XI, 0.1, 0, 2)
    with pytest.raises(ValueError):
        nu(XI, 0.1, 11, 2)


@given(st.floats(0.01, 0.5), st.integers(2, 4))
def test_nu_telescopes(delta, r):
    xi = predicate.MixturePolynomial([0.1, 0.2, 0.3])
    L = int(math.floor(1 / delta + 1e-9))
    total = sum(nu(xi, delta, ell, r) for ell in range(1, L + 1))
    assert total == pytest.approx(float(xi.dxi(L * delta) - xi.dxi(0)) / r)


def test_engine_uses_the_same_nu():
    # the nonlinearity constants are defined through analysis.nu
    sol = parisi.build_solution(XI, 0, parisi.GridConfig(dt=0.01, half_points=300))
    stats = parisi.simulate_sde(sol, 0.1, 2000, 0)
    c = parisi.nonlinearity_constants(sol, stats, 0.1, 2)
    nus = np.array([nu(XI, 0.1, ell + 1, 2) for ell in range(10)])
    np.testing.assert_allclose(nus / 0.1 * stats.mean_phixx_sq * c**2, 1.0, rtol=1e-14)


def test_double_factorial_and_moments():
    assert [analysis.double_factorial(k) for k in range(-1, 8)] == [1, 1, 1, 2, 3, 8, 15, 48, 105]
    assert analysis.gaussian_moment(4, 2.0) == 12.0
    assert analysis.gaussian_moment(3, 2.0) == 0.0


def test_moment_report_calibrates_on_gaussians():
    ell, delta = 3, 0.1
    v = nu(XI, delta, ell, 2)
    rng = np.random.default_rng(0)
    passes = 0
    for trial in range(20):
        rep = moment_report(rng.normal(0, math.sqrt(v), 20_000), ell, XI, delta, 2, max_k=4)
        passes += rep.ok
    # odd moments at 3 stderr fail about 0.5% of the time each
    assert passes >= 18


def test_moment_report_flags_wrong_variance():
    v = nu(XI, 0.1, 2, 2)
    u = np.random.default_rng(1).normal(0, math.sqrt(1.2 * v), 50_000)
    rep = moment_report(u, 2, XI, 0.1, 2)
    assert not rep.ok and not rep.passed[1]
    small = moment_report(u[:10], 2, XI, 0.1, 2)
    assert not small.ok and small.warnings


def test_w1_distance():
    rng = np.random.default_rng(4)
    assert w1_distance(rng.normal(0, 2.0, 100_000), 4.0) <= 0.01 * 2.0
    assert w1_distance(np.zeros(1000), 1.0) == pytest.approx(math.sqrt(2 / math.pi), rel=0.01)
    with pytest.raises(ValueError):
        w1_distance(np.zeros(1000), 0.0)
    with pytest.raises(ValueError):
        w1_distance(np.zeros(10), 1.0)


def _fake_result(frac, seed, delta=0.1):
    return engine.RunResult(z_final=np.zeros(4), truncated=None, assignment=None,
                            satisfying_fraction=frac, diagnostics={},
                            config=engine.RunConfig(delta=delta, seed=seed), clamp=1.0, timing={})


def test_seed_concentration():
    same = [_fake_result(0.55, s) for s in range(5)]
    c = seed_concentration(same)
    assert c.std == 0.0 and c.mean == 0.55 and c.count == 5
    vals = [0.5, 0.52, 0.54, 0.56, 0.58]
    c = seed_concentration([_fake_result(v, s) for s, v in enumerate(vals)])
    assert c.std == pytest.approx(np.std(vals, ddof=1))
    with pytest.raises(ValueError):
        seed_concentration(same[:4])
    with pytest.raises(ValueError):
        seed_concentration(same[:4] + [_fake_result(0.5, 9, delta=0.05)])


def test_tau_base_case():
    p = predicate.named("nae3")
    inst = instance.sample_index_regular(30, 6, 3, 0)
    tau = analysis.tau_recurrence(None, inst, p, 0.1)
    # two pair terms of weight 1/16 contain each coordinate
    np.testing.assert_allclose(tau, 2 * 0.0625 * 0.1)
    with pytest.raises(ValueError):
        analysis.tau_recurrence(None, inst, p, 0.1, tau_sq=tau)


@pytest.mark.parametrize("name", ["maxcut2", "xor4even"])
def test_tau_recurrence_matches_resampling(name):
    """Conditional second moment of the next message under fresh Gaussian inputs.

    Freeze spins, nonlinearities and input variances on an n=200, d=16
    instance, resample the incoming increments 10^4 times and push them
    through the engine's clause kernel and node sums.  Variables that occupy
    two positions of one clause are excluded: their clause terms share inputs,
    which the treelike recurrence does not model.
    """
    p = predicate.named(name)
    n, d = 200, 16
    inst = instance.sample_index_regular(n, d, p.r, 3)
    rng = np.random.default_rng(5)
    E = inst.m * inst.r
    z_prev = rng.uniform(-0.8, 0.8, E)
    A_prev = rng.uniform(0.5, 2.0, E)
    tau_sq = rng.uniform(0.01, 0.05, E)
    want = tau_step(inst, p, z_prev, A_prev, tau_sq)

    coef, mask, count = p.derivative_terms()
    signs = inst.signs.astype(np.float64)
    ev = inst.edge_var.astype(np.int64)
    g0 = np.empty((inst.m, inst.r))
    _kernels.clause_partials(z_prev.reshape(inst.m, inst.r), signs, coef, mask, count, g0)
    g0 = g0.reshape(-1)
    g1 = np.empty((inst.m, inst.r))
    acc = np.zeros(E)
    acc2 = np.zeros(E)
    reps = 10_000
    for _ in range(reps):
        z = z_prev + A_prev * rng.normal(size=E) * np.sqrt(tau_sq)
        _kernels.clause_partials(z.reshape(inst.m, inst.r), signs, coef, mask, count, g1)
        h = g1.reshape(-1) - g0
        total = _kernels.node_sum(ev, h, n)
        u = (total[ev] - h) / math.sqrt(d - 1)
        acc += u * u
        acc2 += u**4
    mean = acc / reps
    se = np.sqrt(np.maximum(acc2 / reps - mean**2, 0) / reps)
    s = np.sort(inst.vars, axis=1)
    repeated = np.zeros(n, dtype=bool)
    rows = np.flatnonzero(np.any(s[:, 1:] == s[:, :-1], axis=1))
    for a in rows:
        vals, cnt = np.unique(inst.vars[a], return_counts=True)
        repeated[vals[cnt > 1]] = True
    simple = ~repeated[ev]
    assert simple.mean() > 0.8
    zscore = (mean - want)[simple] / se[simple]
    assert np.max(np.abs(zscore)) < 5.5
    assert mean[simple].mean() == pytest.approx(want[simple].mean(), rel=0.01)


def test_tau_tracker_runs_with_engine():
    p = predicate.named("maxcut2")
    sol = parisi.build_solution(XI, 1, parisi.GridConfig(dt=0.01, half_points=300))
    stats = parisi.simulate_sde(sol, 0.1, 5000, 0)
    consts = parisi.nonlinearity_constants(sol, stats, 0.1, 2)
    inst = instance.sample_index_regular(4096, 64, 2, 0)
    tracker = analysis.TauTracker(inst, p, XI, 0.1, sample=5000)
    engine.run(inst, p, sol, consts, engine.RunConfig(delta=0.1), observers=[tracker])
    diag = tracker.diagnostics()
    assert len(diag.ell) == 10 and diag.count == 5000
    v = np.array([nu(XI, 0.1, ell, 2) for ell in diag.ell])
    # per-pair variances concentrate around nu as d grows
    assert np.all(np.sqrt(diag.mean_sq_dev) / v < 0.5)


def test_step_correlation_of_independent_steps():
    p = predicate.named("maxcut2")
    sol = parisi.build_solution(XI, 1, parisi.GridConfig(dt=0.01, half_points=300))
    stats = parisi.simulate_sde(sol, 0.1, 5000, 0)
    consts = parisi.nonlinearity_constants(sol, stats, 0.1, 2)
    inst = instance.sample_index_regular(4096, 64, 2, 1)
    res = engine.run(inst, p, sol, consts, engine.RunConfig(delta=0.1, record_history=True))
    rho, se = analysis.step_correlation(res.history, 2, 5)
    assert abs(rho) < 5 * se + 0.05
