import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qprob.estcore import RngStream
from qprob.mtpp import (EventSequence, HawkesExp, PoissonMtpp, Thinner, next_event_cdf,
                        next_mark_prob, random_hawkes)
from qprob.mtpp_query import (MarkSchedule, a_before_b_estimate, a_before_b_naive,
                              a_before_b_samples, check_bernoulli_bound,
                              hitting_time_cdf_estimate, hitting_time_cdf_naive,
                              hitting_time_cdf_samples, naive_query_estimate,
                              nth_mark_estimate, nth_mark_naive, restricted_mark_is_estimate,
                              restricted_proposal)

P12 = PoissonMtpp([1.0, 2.0])


def mutual(a, b, k=4.0):
    return abs(a.mean - b.mean) <= k * math.hypot(a.se, b.se) + 1e-12


def within(s, exact, k=4.0):
    return abs(s.mean - exact) <= k * s.se + 1e-12


def test_empty_schedule_keeps_intensity():
    h = random_hawkes(2, np.random.default_rng(0))
    q = restricted_proposal(h, MarkSchedule([5.0], [[]]))
    s = q.new_state(3)
    assert np.allclose(q.rates(s, np.full(3, 1.0)), h.rates(h.new_state(3), np.full(3, 1.0)))


def test_all_forbidden_gives_no_events():
    q = restricted_proposal(P12, MarkSchedule([1.0], [[0, 1]]))
    res = Thinner(q).run(500, 1.0, RngStream(1).generator())
    assert res.counts.sum() == 0


def test_restricted_poisson_counts():
    q = restricted_proposal(P12, MarkSchedule([1.0], [[0]]))
    res = Thinner(q).run(10_000, 1.0, RngStream(2).generator())
    marks = np.concatenate([np.asarray(m, dtype=int) for m in res.marks])
    assert not np.any(marks == 0)
    c = res.counts
    assert abs(c.mean() - 2) <= 4 * c.std(ddof=1) / math.sqrt(c.size)


def test_restricted_is_examples():
    s = restricted_mark_is_estimate(P12, MarkSchedule([2.0], [[0]]), 200, rng=1)
    assert s.mean == pytest.approx(math.exp(-2), abs=1e-12) and s.var == 0.0
    s = restricted_mark_is_estimate(P12, MarkSchedule([2.0], [[]]), 200, rng=1)
    assert s.mean == 1.0 and s.var == 0.0


def test_restricted_is_matches_naive_on_hawkes():
    h = HawkesExp([0.3, 0.4], [[0.2, 0.3], [0.3, 0.2]], [[1.0, 1.2], [0.9, 1.0]])
    T = 2.0
    s = restricted_mark_is_estimate(h, MarkSchedule([T], [[0]]), 100_000, rng=3)
    nv = naive_query_estimate(h, lambda seq: 0 not in seq.marks, T, 100_000, rng=4)
    assert mutual(s, nv)
    assert s.var < nv.var


def test_naive_query_examples():
    assert naive_query_estimate(P12, lambda s: True, 1.0, 100, rng=1).mean == 1.0
    one = PoissonMtpp([1.0])
    s = naive_query_estimate(one, lambda seq: len(seq) == 0, 1.0, 100_000, rng=2)
    assert within(s, math.exp(-1))
    s = naive_query_estimate(P12, lambda seq: len(seq) > 0 and seq.marks[0] == 0, 30.0,
                             100_000, rng=3)
    assert within(s, 1 / 3)


def test_hitting_cdf_examples():
    h = random_hawkes(3, np.random.default_rng(4))
    s = hitting_time_cdf_estimate(h, [0, 1, 2], 1.5, 300, rng=1)
    assert s.var == 0.0
    assert s.mean == pytest.approx(next_event_cdf(h, None, 1.5), abs=1e-12)
    s = hitting_time_cdf_estimate(PoissonMtpp([1.0, 0.5]), [0], 1.0, 300, rng=1)
    assert s.mean == pytest.approx(1 - math.exp(-1), abs=1e-12) and s.var == 0.0


def test_hitting_cdf_hawkes_agrees_with_naive_and_is_tighter():
    h = random_hawkes(3, np.random.default_rng(5))
    grid = [0.5, 1.0, 2.0, 4.0]
    est = hitting_time_cdf_estimate(h, [1], grid, 20_000, rng=6)
    nv = hitting_time_cdf_naive(h, [1], grid, 20_000, rng=7)
    for a, b in zip(est, nv):
        assert mutual(a, b)
        assert a.var < b.var


def test_hitting_samples_bounded_and_worker_invariant():
    h = random_hawkes(2, np.random.default_rng(6))
    a = hitting_time_cdf_samples(h, [0], [1.0, 3.0], 5000, 2, workers=1)
    b = hitting_time_cdf_samples(h, [0], [1.0, 3.0], 5000, 2, workers=8)
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))
    assert np.all(np.diff(a, axis=1) >= 0)


def test_hitting_cdf_with_history():
    h = HawkesExp([0.2, 0.2], [[0.5, 0.0], [0.0, 0.5]], [[1.0, 1.0], [1.0, 1.0]])
    hist = EventSequence([0.5, 0.9], [0, 0], 1.0)
    s = hitting_time_cdf_estimate(h, [1], 2.0, 200, rng=1, history=hist)
    # mark 1 is not excited by mark 0, so its rate stays at 0.2
    assert s.mean == pytest.approx(1 - math.exp(-0.2), abs=1e-12)


def test_nth_mark_examples():
    h = random_hawkes(2, np.random.default_rng(7))
    s = nth_mark_estimate(h, [0, 1], 3, 200, rng=1)
    assert s.mean == pytest.approx(1.0, abs=1e-9)
    for k in (1, 2, 4):
        s = nth_mark_estimate(P12, [0], k, 1000, rng=k)
        assert s.mean == pytest.approx(1 / 3, abs=1e-12) and s.var == 0.0
        nv = nth_mark_naive(P12, [0], k, 100_000, rng=k)
        assert within(nv, 1 / 3)


def test_nth_mark_complement_and_literal_forms_agree():
    h = random_hawkes(3, np.random.default_rng(8))
    a = nth_mark_estimate(h, [0], 3, 20_000, rng=1)
    c = nth_mark_estimate(h, [0], 3, 20_000, rng=2, complement=True)
    lit = nth_mark_estimate(h, [0], 3, 20_000, rng=3, integrate_last=False)
    nv = nth_mark_naive(h, [0], 3, 20_000, rng=4)
    assert mutual(a, c) and mutual(a, lit) and mutual(a, nv)


def test_nth_mark_validation():
    with pytest.raises(ValueError):
        nth_mark_estimate(P12, [0], 0, 10, rng=1)


def test_a_before_b_poisson():
    s = a_before_b_estimate(P12, [0], [1], 200, rng=1, eps=1e-12)
    assert s.mean == pytest.approx(1 / 3, abs=1e-9)
    assert s.extra["lower"] <= 1 / 3 + 1e-12 <= s.extra["upper"] + 2e-12
    assert s.extra["biased"] == 1.0


def test_a_before_b_complement_is_next_mark():
    h = random_hawkes(3, np.random.default_rng(9))
    s = a_before_b_estimate(h, [0], [1, 2], 300, rng=2, eps=1e-10)
    assert s.var < 1e-18
    assert s.mean == pytest.approx(next_mark_prob(h, None, [0]), abs=1e-6)


def test_a_before_b_pair_sums_to_one():
    h = random_hawkes(3, np.random.default_rng(10))
    eps = 0.01
    ab = a_before_b_estimate(h, [0], [1], 2000, rng=3, eps=eps)
    ba = a_before_b_estimate(h, [1], [0], 2000, rng=3, eps=eps)
    assert abs(ab.mean + ba.mean - 1) <= 2 * eps


def test_a_before_b_matches_naive():
    h = random_hawkes(3, np.random.default_rng(11))
    s = a_before_b_estimate(h, [0], [1], 5000, rng=4, eps=1e-6)
    nv = a_before_b_naive(h, [0], [1], 10_000, rng=5, tau=40.0)
    assert mutual(s, nv)


def test_a_before_b_integrand_never_exceeds_one():
    h = random_hawkes(4, np.random.default_rng(12))
    out = a_before_b_samples(h, [0], [1], 2000, 6, eps=1e-4)
    assert np.all(out[:, 0] <= 1 + 1e-12) and np.all(out[:, 1] <= 1 + 1e-12)
    assert np.all(out[:, 0] + out[:, 1] + out[:, 2] <= 1 + 1e-9)


def test_a_before_b_fixed_tau_flags_gap():
    s = a_before_b_estimate(P12, [0], [1], 100, rng=1, tau=0.2)
    assert s.extra["mean_gap"] == pytest.approx(math.exp(-0.6), rel=1e-9)
    assert s.extra["lower"] < 1 / 3 < s.extra["upper"]


def test_bernoulli_bound_accepts_extremes():
    check_bernoulli_bound(np.array([0.0, 1.0] * 50))
    check_bernoulli_bound(np.full(100, 0.4))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=200))
def test_bernoulli_bound_holds_for_unit_samples(values):
    check_bernoulli_bound(np.asarray(values))


def test_bernoulli_bound_rejects_out_of_range():
    with pytest.raises(AssertionError):
        check_bernoulli_bound(np.array([0.0, 2.0, -1.0, 2.0]))
