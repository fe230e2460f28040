import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cspamp import instance, predicate
from cspamp.instance import (CspInstance, index_regularize, regularized_alpha, sample_csp,
                             sample_index_regular, treelike_flags, treelike_fraction)


def test_sample_csp_shapes_and_determinism():
    a = sample_csp(50, 3.0, 3, seed=4)
    b = sample_csp(50, 3.0, predicate.named("nae3"), seed=4)
    assert a.m == 150 and a.r == 3
    np.testing.assert_array_equal(a.vars, b.vars)
    np.testing.assert_array_equal(a.signs, b.signs)
    assert set(np.unique(a.signs)) <= {-1, 1}
    # a single variable is allowed; every clause then repeats it
    one = sample_csp(1, 2.0, 2, seed=0)
    assert one.repeated_clauses() == one.m
    with pytest.raises(ValueError):
        sample_csp(0, 1.0, 2, seed=0)
    with pytest.raises(ValueError):
        sample_csp(10, 0.0, 2, seed=0)


@given(st.integers(1, 60), st.sampled_from([(2, 2), (4, 2), (6, 3), (8, 4), (12, 3)]),
       st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_index_regular_sampler(n, dr, seed):
    d, r = dr
    inst = sample_index_regular(n, d, r, seed)
    assert inst.is_index_regular()
    assert np.all(inst.degrees() == d)
    assert inst.m == n * d // r


def test_index_regular_requires_divisibility():
    with pytest.raises(ValueError):
        sample_index_regular(10, 5, 2, 0)


@given(st.integers(5, 200), st.floats(0.5, 6.0), st.sampled_from([2, 3]), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_regularization_invariants(n, alpha, r, seed):
    inst = sample_csp(n, alpha, r, seed)
    out, stats = index_regularize(inst, seed=seed, treelike=False)
    assert out.is_index_regular()
    assert stats.removed_clauses <= inst.m
    assert stats.alpha_prime >= int(np.ceil(inst.alpha))
    assert out.m == inst.m - stats.removed_clauses + stats.added_clauses
    assert np.all(out.index_degrees() == stats.alpha_prime)


def test_regularization_keeps_low_ids_when_trimming():
    # variable 0 sits at position 0 of 20 clauses, one more than alpha' = 19 allows
    vars_ = np.array([[0, 1]] * 20 + [[1, 0]] * 2)
    inst = CspInstance(2, vars_, np.ones_like(vars_))
    out, stats = index_regularize(inst, treelike=False)
    assert stats.alpha_prime == regularized_alpha(22, 2) == 19
    assert stats.removed_clauses == 1
    assert out.is_index_regular()
    np.testing.assert_array_equal(out.vars[:19], vars_[:19])
    np.testing.assert_array_equal(out.vars[19:21], vars_[20:])


def test_distinct_regularization():
    inst = sample_csp(300, 4.0, 3, seed=1)
    out, stats = index_regularize(inst, seed=2, distinct=True, treelike=False)
    new = out.vars[out.m - stats.added_clauses:]
    s = np.sort(new, axis=1)
    assert not np.any(s[:, 1:] == s[:, :-1])


def test_regularized_alpha_formula():
    assert regularized_alpha(256, 2) == int(np.ceil((256 + 16 * np.log(256)) / 2))
    assert regularized_alpha(1, 2) == 1


def test_treelike_small_cases():
    triangle = CspInstance(3, np.array([[0, 1], [1, 2], [2, 0]]), np.ones((3, 2)))
    assert treelike_fraction(triangle, 0) == 1.0
    assert treelike_fraction(triangle, 1) == 0.0
    path = CspInstance(4, np.array([[0, 1], [1, 2], [2, 3]]), np.ones((3, 2)))
    assert treelike_flags(path, 5).all()
    repeat = CspInstance(2, np.array([[0, 0]]), np.ones((1, 2)))
    flags = treelike_flags(repeat, 0)
    assert not flags[0] and flags[1]  # variable 1 has no clauses at all


def test_treelike_brute_force():
    """Compare with an explicit ball search on small random instances."""
    rng = np.random.default_rng(9)
    for trial in range(20):
        inst = sample_csp(30, 0.6, 2 + trial % 2, seed=trial)
        L = int(rng.integers(0, 3))
        got = treelike_flags(inst, L)
        want = np.array([_brute_treelike(inst, v, L + 1) for v in range(inst.n)])
        np.testing.assert_array_equal(got, want)


def _brute_treelike(inst, root, radius):
    seen_v, seen_c = {root}, set()
    frontier = [(root, None)]
    for _ in range(radius):
        nxt = []
        for v, via in frontier:
            for a, j in inst.neighbors(v):
                if (a, j) == via:
                    continue
                if a in seen_c:
                    return False
                seen_c.add(a)
                for k in range(inst.r):
                    if k == j:
                        continue
                    u = int(inst.vars[a, k])
                    if u in seen_v:
                        return False
                    seen_v.add(u)
                    nxt.append((u, (a, k)))
        frontier = nxt
    return True


@given(st.integers(1, 40), st.integers(0, 50), st.sampled_from([2, 3, 4]), st.integers(0, 99))
@settings(max_examples=40, deadline=None)
def test_text_round_trip(n, m, r, seed):
    rng = np.random.default_rng(seed)
    inst = CspInstance(n, rng.integers(0, n, (m, r)), np.where(rng.random((m, r)) < 0.5, 1, -1))
    back = CspInstance.from_text(inst.to_text())
    assert back.n == n and back.m == m
    np.testing.assert_array_equal(back.vars, inst.vars)
    np.testing.assert_array_equal(back.signs, inst.signs)


def test_file_round_trip(tmp_path):
    inst = sample_index_regular(20, 4, 2, 0)
    inst.save(tmp_path / "g.txt")
    back = CspInstance.load(tmp_path / "g.txt")
    assert back.d == 4 and back.is_index_regular()


def test_bad_text():
    with pytest.raises(ValueError):
        CspInstance.from_text("2 1 2 0\n0 1 + *\n")
    with pytest.raises(ValueError):
        CspInstance.from_text("2 2 2 0\n0 1 + +\n")


def test_evaluate_matches_truth_table():
    p = predicate.named("nae3")
    inst = sample_csp(20, 5.0, 3, seed=2)
    rng = np.random.default_rng(0)
    x = np.where(rng.random(20) < 0.5, 1, -1)
    lit = inst.signs * x[inst.vars]
    want = np.mean([0.0 if abs(row.sum()) == 3 else 1.0 for row in lit])
    assert instance.evaluate(inst, p, x) == pytest.approx(want)
    # on the cube the multilinear extension equals the predicate
    assert np.mean(instance.clause_values(inst, p, x)) == pytest.approx(want)
    with pytest.raises(ValueError):
        instance.evaluate(inst, p, np.zeros(20))
