import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from qprob.discrete_model import (MarkovModel, load_markov_model, markov_a_before_b_analytic,
                                  markov_a_before_b_exact, markov_hit_analytic,
                                  markov_query_exact, next_dist, random_markov_model,
                                  restricted_tensor_product, save_markov_model, steady_state)
from qprob.discrete_query import (PrunedTree, Query, QueryBlock, a_before_b_bounds,
                                  build_query, coverage_beam_search, exact_enumerate,
                                  hybrid_estimate, hybrid_variance_diagnostic,
                                  hybrid_variance_terms, importance_estimate,
                                  importance_samples, naive_estimate, naive_samples,
                                  proposal_next_dist, query_from_dict, query_to_dict,
                                  split_point, surrogate_ground_truth,
                                  tail_splitting_beam_search)
from qprob.discrete_query.beam import _enumerate_block
from qprob.estcore import RngStream

U3 = MarkovModel(1, np.full((3, 3), 1 / 3))
DET = MarkovModel(1, np.eye(3))


def within(s, exact, k=4.0):
    return abs(s.mean - exact) <= k * s.se + 1e-12


# --- model -----------------------------------------------------------------

def test_next_dist_examples():
    assert np.allclose(next_dist(U3, [0, 2, 1]), 1 / 3)
    assert np.array_equal(next_dist(DET, [0, 2]), [0, 0, 1])
    gen = np.random.default_rng(0)
    m2 = random_markov_model(3, 2, gen)
    assert np.array_equal(next_dist(m2, [1, 2]), m2.table[1, 2])
    # short histories use the pad context
    assert np.array_equal(next_dist(m2, [1]), m2.table[3, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 2 ** 32 - 1),
       st.lists(st.integers(0, 4), max_size=6))
def test_next_dist_normalized(V, m, seed, hist):
    model = random_markov_model(V, m, np.random.default_rng(seed))
    h = [x % V for x in hist]
    assert abs(next_dist(model, h).sum() - 1) < 1e-9


def test_model_rejects_bad_rows():
    with pytest.raises(ValueError, match="rows do not sum"):
        MarkovModel(1, [[0.5, 0.4], [0.5, 0.5]])
    with pytest.raises(ValueError):
        next_dist(U3, [3])


def test_model_roundtrip(tmp_path):
    m = random_markov_model(4, 2, np.random.default_rng(5))
    save_markov_model(m, tmp_path / "m.json")
    assert load_markov_model(tmp_path / "m.json") == m


def test_tensor_product_unrestricted_is_matrix_product():
    gen = np.random.default_rng(1)
    m = random_markov_model(3, 1, gen)
    P = m.rows
    left = np.zeros((4, 3))
    left[:3] = m.first_order_matrix()
    out = restricted_tensor_product(left, m, [0, 1, 2])
    assert np.allclose(out[:3], m.first_order_matrix() @ m.first_order_matrix())
    assert P.shape == (4, 3)


def test_tensor_product_single_symbol_routes_mass():
    left = np.zeros((4, 3))
    left[:3] = np.arange(9).reshape(3, 3) / 10
    out = restricted_tensor_product(left, U3, [1])
    assert np.allclose(out[:, [0, 2]], 0)
    assert np.allclose(out[:, 1], left.sum(axis=1))


def test_tensor_product_zero_row_stays_zero():
    left = np.ones((4, 3)) / 3
    left[1] = 0
    out = restricted_tensor_product(left, U3, [0, 2])
    assert np.all(out[1] == 0)


def test_query_exact_examples():
    for K in range(1, 9):
        q = build_query("Q3", 3, A=[0], K=K)
        assert markov_query_exact(U3, q) == pytest.approx((2 / 3) ** (K - 1) / 3, abs=1e-15)
    full = Query([[range(3)] * 4], 3)
    assert markov_query_exact(U3, full) == pytest.approx(1.0, abs=1e-15)
    path = Query([[[1]] * 3], 3)
    assert markov_query_exact(DET, path, [1]) == 1.0
    assert markov_query_exact(DET, path, [2]) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(1, 2), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_query_exact_matches_enumeration(V, m, K, seed):
    gen = np.random.default_rng(seed)
    model = random_markov_model(V, m, gen)
    sets = [gen.choice(V, size=gen.integers(1, V + 1), replace=False) for _ in range(K)]
    q = Query([sets], V)
    hist = gen.integers(0, V, size=gen.integers(0, 3)).tolist()
    assert markov_query_exact(model, q, hist) == pytest.approx(
        exact_enumerate(model, q, hist), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(1, 2), st.integers(0, 2 ** 32 - 1))
def test_query_homogeneity(V, m, seed):
    gen = np.random.default_rng(seed)
    model = random_markov_model(V, m, gen)
    tail = gen.integers(0, V, size=m).tolist()
    prefix = gen.integers(0, V, size=gen.integers(1, 5)).tolist()
    q = build_query("Q3", V, A=[0], K=3)
    assert markov_query_exact(model, q, tail) == pytest.approx(
        markov_query_exact(model, q, prefix + tail), abs=1e-15)


def test_hit_analytic_examples():
    assert markov_hit_analytic(U3, 0, 1, 1) == pytest.approx(1 / 3)
    assert markov_hit_analytic(U3, 0, 1, 4) == pytest.approx(8 / 81)
    sure = MarkovModel(1, [[1, 0, 0]] * 3)
    assert markov_hit_analytic(sure, 0, 1, 2) == 0.0
    with pytest.raises(ValueError):
        markov_hit_analytic(sure, 0, 1, 0)


def test_hit_analytic_exact_for_two_states():
    # with V=2 the complement of a is a single state, so lumping is exact
    m = MarkovModel(1, [[0.3, 0.7], [0.6, 0.4]])
    for k in range(1, 8):
        q = build_query("Q3", 2, A=[0], K=k)
        assert markov_hit_analytic(m, 0, 1, k) == pytest.approx(
            markov_query_exact(m, q, [1]), abs=1e-12)


def test_a_before_b_examples():
    pa, pb = markov_a_before_b_analytic(U3, 0, 1, 2)
    assert pa == pytest.approx(0.5) and pb == pytest.approx(0.5)
    m = MarkovModel(1, [[0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.1, 0.6, 0.3]])
    assert markov_a_before_b_analytic(m, 0, 2, 1)[0] == 1.0


def test_a_before_b_matches_truncated_series():
    m = MarkovModel(1, [[0.2, 0.3, 0.5], [0.5, 0.1, 0.4], [0.1, 0.6, 0.3]])
    lo, up = a_before_b_bounds(m, [0], [1], 60, history=[2])
    assert up - lo < 1e-10
    pa, pb = markov_a_before_b_analytic(m, 0, 1, 2)
    assert pa == pytest.approx(lo, abs=1e-10)
    assert pa + pb == pytest.approx(1.0, abs=1e-12)
    assert markov_a_before_b_exact(m, 0, 1, 2) == pytest.approx(lo, abs=1e-10)


def test_steady_state_rejects_reducible_chain():
    with pytest.raises(ValueError, match="steady state undefined"):
        steady_state(np.eye(3))


# --- query algebra ---------------------------------------------------------

def test_build_query_examples():
    q = build_query("Q3", 3, A=[0], K=2)
    assert q.blocks == (QueryBlock([[1, 2], [0]]),)
    q = build_query("Q5", 3, A=[0, 1], n=3, K=3)
    assert q.blocks == (QueryBlock([[0, 1]] * 3),)
    q = build_query("Q4", 3, A=[0], B=[1], K=3)
    assert q.blocks == (QueryBlock([[0]]), QueryBlock([[2], [0]]), QueryBlock([[2], [2], [0]]))


def test_overlapping_blocks_rejected():
    with pytest.raises(ValueError, match="overlap"):
        Query([[[0, 1]], [[1]]], 3)


def _predicate(kind, seq, p):
    A, B = set(p.get("A", ())), set(p.get("B", ()))
    if kind == "Q1":
        return seq[0] in p["x1"]
    if kind == "Q2":
        return seq[p["K"] - 1] in p["x"]
    if kind == "Q3":
        K = p["K"]
        return seq[K - 1] in A and not any(x in A for x in seq[:K - 1])
    if kind == "Q4":
        for x in seq[:p["K"]]:
            if x in A:
                return True
            if x in B:
                return False
        return False
    return sum(x in A for x in seq[:p["K"]]) == p["n"]


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(["Q1", "Q2", "Q3", "Q4", "Q5"]), st.integers(2, 4), st.integers(1, 6),
       st.integers(0, 2 ** 32 - 1))
def test_builder_partitions_predicate(kind, V, K, seed):
    gen = np.random.default_rng(seed)
    perm = gen.permutation(V).tolist()
    a = int(gen.integers(1, V))
    p = {"K": K, "A": perm[:a], "B": perm[a:a + 1], "x": perm[:1], "x1": perm[:1],
         "n": int(gen.integers(0, K + 1))}
    args = {"Q1": ["x1"], "Q2": ["x", "K"], "Q3": ["A", "K"], "Q4": ["A", "B", "K"],
            "Q5": ["A", "n", "K"]}[kind]
    q = build_query(kind, V, **{k: p[k] for k in args})
    for seq in itertools.product(range(V), repeat=K):
        hits = sum(b.contains(seq) for b in q.blocks)
        assert hits <= 1
        assert (hits == 1) == _predicate(kind, seq, p)


def test_query_dict_roundtrip():
    q = build_query("Q4", 4, A=[0], B=[1, 2], K=3)
    assert query_from_dict(query_to_dict(q)) == q
    assert query_from_dict({"kind": "Q4", "vocab_size": 4, "A": [0], "B": [1, 2], "K": 3}) == q


# --- estimators ------------------------------------------------------------

def test_exact_enumerate_examples():
    assert exact_enumerate(U3, Query([[range(3)] * 3], 3)) == pytest.approx(1.0)
    assert exact_enumerate(U3, build_query("Q3", 3, A=[0], K=3)) == pytest.approx(4 / 27)
    assert exact_enumerate(DET, Query([[[0], [0]]], 3), [0]) == 1.0
    assert exact_enumerate(DET, Query([[[0], [1]]], 3), [0]) == 0.0


def test_enumeration_budget():
    with pytest.raises(ValueError, match="intractable"):
        exact_enumerate(U3, Query([[range(3)] * 10], 3), budget=1000)


def test_proposal_next_dist_examples():
    q, s = proposal_next_dist(U3, range(3), [0])
    assert np.allclose(q, 1 / 3) and s == pytest.approx(1)
    q, s = proposal_next_dist(U3, [0, 1], [0])
    assert np.allclose(q, 0.5) and s == pytest.approx(2 / 3)
    q, s = proposal_next_dist(DET, [0, 1], [2])
    assert s == 0.0


def test_importance_examples():
    s = importance_estimate(U3, Query([[range(3)] * 3], 3), 500, rng=1)
    assert s.mean == 1.0 and s.var == 0.0
    s = importance_estimate(U3, build_query("Q3", 3, A=[0], K=3), 500, rng=1)
    assert s.mean == pytest.approx(4 / 27, abs=1e-15) and s.var == 0.0


def test_importance_order_two_random_query():
    gen = np.random.default_rng(8)
    m = random_markov_model(4, 2, gen)
    q = build_query("Q4", 4, A=[0], B=[1], K=5)
    s = importance_estimate(m, q, 100_000, rng=3)
    assert within(s, exact_enumerate(m, q))


def test_naive_examples():
    s = naive_estimate(U3, Query([[range(3)] * 3], 3), 500, rng=2)
    assert s.mean == 1.0 and s.var == 0.0
    s = naive_estimate(DET, Query([[[1], [1]]], 3), 500, rng=2, history=[0])
    assert s.mean == 0.0
    s = naive_estimate(U3, build_query("Q3", 3, A=[0], K=3), 100_000, rng=2)
    assert within(s, 4 / 27)


def test_samples_bounded_and_workers_invariant():
    gen = np.random.default_rng(4)
    m = random_markov_model(3, 2, gen)
    q = build_query("Q5", 3, A=[0], n=2, K=5)
    a = importance_samples(m, q, 5000, rng=7, workers=1)
    b = importance_samples(m, q, 5000, rng=7, workers=8)
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))
    assert np.array_equal(naive_samples(m, q, 3000, 1, workers=1),
                          naive_samples(m, q, 3000, 1, workers=8))


def test_estimators_unbiased_over_runs():
    m = MarkovModel(1, [[0.5, 0.3, 0.2], [0.2, 0.2, 0.6], [0.4, 0.4, 0.2]])
    q = build_query("Q4", 3, A=[0], B=[1], K=4)
    exact = exact_enumerate(m, q)
    root = RngStream(12)
    for name, fn in [("naive", naive_estimate), ("is", importance_estimate),
                     ("hybrid", lambda *a, **k: hybrid_estimate(*a, cap=2, **k))]:
        means = np.array([fn(m, q, 1000, rng=root.child(name, r)).mean for r in range(200)])
        se = means.std(ddof=1) / np.sqrt(means.size)
        assert abs(means.mean() - exact) <= 4 * se + 1e-12, name


def test_variance_ordering_soft_check():
    gen = np.random.default_rng(21)
    wins = 0
    for i in range(100):
        V = int(gen.integers(2, 6))
        m = random_markov_model(V, 1, gen)
        q = build_query("Q3", V, A=[0], K=int(gen.integers(1, 9)))
        wins += importance_estimate(m, q, 500, rng=i).var <= naive_estimate(m, q, 500, rng=i).var
    if wins < 95:
        warnings.warn(f"IS variance <= naive variance in only {wins}/100 trials")
    assert 0 <= wins <= 100


# --- beams -----------------------------------------------------------------

def test_coverage_beam_examples():
    b = coverage_beam_search(DET, [[0], [0], [0]], 0.5, history=[0])
    assert len(b.sequences) == 1 and b.coverage == pytest.approx(1.0) and b.lower_bound == 1.0
    block = build_query("Q3", 3, A=[0], K=2).blocks[0]
    b = coverage_beam_search(U3, block, 0.6)
    assert b.paths() == {(1, 0), (2, 0)}
    assert b.coverage == pytest.approx(1.0)
    assert b.lower_bound == pytest.approx(exact_enumerate(U3, Query([block], 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 4), st.integers(1, 2), st.integers(1, 5), st.floats(0.05, 0.95),
       st.integers(0, 2 ** 32 - 1))
def test_coverage_beam_soundness(V, m, K, alpha, seed):
    gen = np.random.default_rng(seed)
    model = random_markov_model(V, m, gen)
    sets = [gen.choice(V, size=gen.integers(1, V + 1), replace=False) for _ in range(K)]
    block = QueryBlock(sets)
    b = coverage_beam_search(model, block, alpha)
    truth = exact_enumerate(model, Query([block], V))
    assert b.lower_bound <= truth + 1e-12
    assert truth - b.lower_bound <= 1 - b.coverage + 1e-12


def test_split_point_examples():
    assert split_point([1, 1, 1, 1]) == 4
    assert split_point([0.9, 0.05, 0.05]) == 1
    assert split_point([0.7, 0.3]) >= 1


def test_tail_splitting_keeps_top_and_respects_cap():
    gen = np.random.default_rng(2)
    m = random_markov_model(4, 1, gen)
    block = QueryBlock([range(4)] * 3)
    b = tail_splitting_beam_search(m, block, cap=3)
    assert 1 <= len(b.sequences) <= 3
    assert b.lower_bound <= 1.0


def test_hybrid_examples():
    q = build_query("Q3", 3, A=[0], K=3)
    s = hybrid_estimate(U3, q, 1000, cap=10_000, rng=1)
    assert s.mean == pytest.approx(4 / 27, abs=1e-15) and s.var == pytest.approx(0, abs=1e-30)
    s = hybrid_estimate(U3, q, 10_000, cap=1, rng=1)
    assert within(s, 4 / 27)
    s0 = hybrid_estimate(U3, q, 0, cap=1)
    assert s0.mean <= 4 / 27 + 1e-15


def test_pruned_tree_reproduces_conditional_proposal():
    gen = np.random.default_rng(17)
    m = random_markov_model(3, 1, gen)
    block = QueryBlock([[0, 1, 2], [0, 1], [0, 1, 2]])
    beams = tail_splitting_beam_search(m, block, cap=2)
    tree = PrunedTree(m, beams)
    B = beams.paths()
    items = [(x, q) for x, p, q in _enumerate_block(m, block, [], 10 ** 6) if x not in B]
    rem = sum(q for _, q in items)
    assert rem == pytest.approx(tree.remaining, abs=1e-12)
    paths, _ = tree.sample(m, block.masks(3), [], 100_000, RngStream(4).generator())
    assert not any(tuple(p) in B for p in paths.tolist())
    index = {x: i for i, (x, _) in enumerate(items)}
    counts = np.zeros(len(items))
    for p in map(tuple, paths.tolist()):
        counts[index[p]] += 1
    expected = np.array([q for _, q in items]) / rem * paths.shape[0]
    assert chisquare(counts, expected).pvalue > 0.001


def test_hybrid_variance_diagnostic_examples():
    zero = MarkovModel(1, [[0.5, 0.5, 0.0]] * 3)
    block = QueryBlock([[0, 1, 2], [0, 1, 2]])
    assert hybrid_variance_diagnostic(zero, block, [], (0, 2))
    block = QueryBlock([[0], [0]])
    assert hybrid_variance_diagnostic(DET, block, [], (0, 0), history=[0])
    t = hybrid_variance_terms(DET, block, [], (0, 0), history=[0])
    assert t["var_after"] == 0.0


def test_hybrid_variance_diagnostic_matches_direct_delta():
    gen = np.random.default_rng(3)
    for _ in range(20):
        m = random_markov_model(3, 1, gen)
        block = QueryBlock([[0, 1, 2], [0, 1], [0, 2]])
        paths = [x for x, p, q in _enumerate_block(m, block, [], 10 ** 6)]
        chosen = [paths[i] for i in gen.choice(len(paths), size=3, replace=False)]
        B, cand = chosen[:2], chosen[2]
        t = hybrid_variance_terms(m, block, B, cand)
        assert hybrid_variance_diagnostic(m, block, B, cand) == (t["delta"] >= -1e-12)


# --- surrogate ground truth ------------------------------------------------

def test_surrogate_examples():
    s = surrogate_ground_truth(lambda m, g: np.full(m, 0.3), 0)
    assert s.n == 10_000 and s.extra["tolerance_met"] == 1.0
    s = surrogate_ground_truth(lambda m, g: (g.random(m) < 0.5).astype(float), 0)
    assert s.n == 100_000 and s.extra["tolerance_met"] == 0.0
    q = build_query("Q3", 3, A=[0], K=3)
    s = surrogate_ground_truth(lambda m, g: importance_samples(U3, q, m, int(g.integers(2 ** 32))), 0)
    assert s.n == 10_000 and s.var == 0.0


def test_surrogate_validation():
    with pytest.raises(ValueError):
        surrogate_ground_truth(lambda m, g: np.zeros(m), 0, tolerance=0)
    with pytest.raises(ValueError):
        surrogate_ground_truth(lambda m, g: np.zeros(m), 0, n_low=10, n_high=5)
