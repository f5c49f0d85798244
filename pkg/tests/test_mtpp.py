import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from qprob.estcore import RngStream, trapezoid
from qprob.mtpp import (EventSequence, HawkesExp, PoissonMtpp, SelfCorrecting, Thinner,
                        load_model, log_likelihood, mark_integral, marked_intensity,
                        model_from_dict, model_to_dict, next_event_cdf, next_mark_prob,
                        random_hawkes, random_self_correcting, save_model, sequence_from_dict,
                        sequence_to_dict, thinning_sample)


def test_hawkes_intensity_examples():
    h = HawkesExp([0.1, 0.2], [[0.5, 0.1], [0.1, 0.5]], [[1, 1], [1, 1]])
    assert np.allclose(marked_intensity(h, 3.0), [0.1, 0.2])
    h1 = HawkesExp([0.1], [[0.5]], [[1.0]])
    lam = marked_intensity(h1, 1.0, EventSequence([0.0], [0]))
    assert lam[0] == pytest.approx(0.1 + 0.5 * math.exp(-1), abs=1e-12)
    assert lam[0] == pytest.approx(0.28394, abs=1e-5)


def test_self_correcting_intensity_example():
    sc = SelfCorrecting([1.0], [[0.5]])
    assert marked_intensity(sc, 1.0, EventSequence([0.5], [0]))[0] == pytest.approx(math.exp(0.5))


def test_non_causal_evaluation():
    h = HawkesExp([0.1], [[0.5]], [[1.0]])
    with pytest.raises(ValueError, match="non-causal"):
        marked_intensity(h, 0.5, EventSequence([1.0], [0]))


def test_zero_intensity_gives_empty_sample():
    seq = thinning_sample(PoissonMtpp([0.0, 0.0]), 0.0, 10.0, None, 1)
    assert len(seq) == 0


def _counts(model, T, n, seed):
    res = Thinner(model, record_events=False).run(n, T, RngStream(seed).generator())
    return res.counts


def test_poisson_count_law():
    c = _counts(PoissonMtpp([2.0]), 10.0, 10_000, 3)
    se = c.std(ddof=1) / math.sqrt(c.size)
    assert abs(c.mean() - 20) <= 4 * se
    assert abs(c.var(ddof=1) - 20) <= 2.0


def test_hawkes_count_matches_branching_formula():
    mu = np.array([0.3, 0.2])
    alpha = np.array([[0.2, 0.1], [0.1, 0.3]])
    beta = np.array([[1.0, 1.0], [1.0, 1.0]])
    h = HawkesExp(mu, alpha, beta)
    T = 50.0
    c = _counts(h, T, 10_000, 4)
    # stationary mean rate (I - A)^{-1} mu with A = alpha / beta, minus a start-up term
    rate = np.linalg.solve(np.eye(2) - alpha / beta, mu).sum()
    assert abs(c.mean() - rate * T) / (rate * T) < 0.05


def test_thinning_interevent_times_are_exponential():
    res = Thinner(PoissonMtpp([1.5]), max_events=200_000).run(1, 70_000.0, RngStream(5).generator())
    gaps = np.diff(np.concatenate([[0.0], res.times[0]]))[:100_000]
    assert gaps.size > 90_000
    assert kstest(gaps, "expon", args=(0, 1 / 1.5)).pvalue > 0.001


def _compensator(model, times, marks, T):
    state = model.new_state(1)
    total, last = 0.0, 0.0
    for t, m in zip(times, marks):
        total += model.compensator(state, np.array([last]), np.array([t])).sum()
        model.add_events(state, np.array([0]), np.array([t]), np.array([m]))
        last = t
    return total + model.compensator(state, np.array([last]), np.array([T])).sum()


def test_compensator_matches_event_count():
    h = random_hawkes(3, np.random.default_rng(1))
    n, T = 4000, 5.0
    res = Thinner(h).run(n, T, RngStream(6).generator())
    comp = np.array([_compensator(h, res.times[i], res.marks[i], T) for i in range(n)])
    diff = comp - res.counts
    assert abs(diff.mean()) <= 4 * diff.std(ddof=1) / math.sqrt(n)


def test_log_likelihood_examples():
    assert log_likelihood(PoissonMtpp([0.5, 1.5]), EventSequence((), (), 3.0)) == pytest.approx(-6.0)
    ll = log_likelihood(PoissonMtpp([1.0, 1.0]), EventSequence([1.0], [0], 2.0))
    assert ll == pytest.approx(-4.0)
    assert log_likelihood(PoissonMtpp([0.0, 1.0]), EventSequence([1.0], [0], 2.0)) == -math.inf


def test_hawkes_log_likelihood_matches_numeric_integration():
    h = random_hawkes(2, np.random.default_rng(9))
    for r in range(5):
        seq = thinning_sample(h, 0.0, 6.0, None, RngStream(r))
        ll = sum(math.log(marked_intensity(h, t, seq.before(t))[m])
                 for t, m in zip(seq.times, seq.marks))
        cuts = (0.0,) + seq.times + (6.0,)
        for a, b in zip(cuts, cuts[1:]):
            # intensity on [a, b] given the events up to and including a
            k = sum(t <= a for t in seq.times) if a > 0 else 0
            state = h.state_from_history(EventSequence(seq.times[:k], seq.marks[:k], a))
            g = np.linspace(a, b, 4001)
            lam = h.rates(state, g).sum(axis=1)
            ll -= trapezoid(lam, g)
        assert ll == pytest.approx(log_likelihood(h, seq), abs=1e-6)


def test_next_event_cdf_examples():
    p = PoissonMtpp([0.4, 0.6])
    hist = EventSequence([0.5], [1])
    assert next_event_cdf(p, hist, 0.5) == 0.0
    assert next_event_cdf(p, hist, 1.5) == pytest.approx(1 - math.exp(-1))
    h = random_hawkes(2, np.random.default_rng(3))
    vals = [next_event_cdf(h, None, t) for t in (1, 5, 20, 80)]
    assert all(a < b for a, b in zip(vals, vals[1:])) and vals[-1] > 1 - 1e-9


def test_next_mark_prob_examples():
    p = PoissonMtpp([1.0, 2.0])
    assert next_mark_prob(p, None, [0, 1]) == pytest.approx(1.0, abs=1e-9)
    assert next_mark_prob(p, None, [0]) == pytest.approx(1 / 3, abs=1e-9)
    assert next_mark_prob(p, None, [0], bounds=(1.0, 1.0)) == 0.0
    assert next_mark_prob(p, None, [0], bounds=(0.0, 1.0)) == pytest.approx(
        (1 - math.exp(-3)) / 3, abs=1e-12)


def test_mark_integral_exact_for_constant_ratio():
    p = PoissonMtpp([1.0, 3.0])
    val, lam = mark_integral(p, p.new_state(1), np.array([0.0]), np.array([2.0]), [True, False],
                             points=5)
    assert val[0] == pytest.approx((1 - math.exp(-8)) / 4, abs=1e-14)
    assert lam[0] == pytest.approx(8.0)


def test_piecewise_poisson_rates():
    p = PoissonMtpp([[1.0, 0.0], [0.0, 2.0]], breakpoints=[0.0, 1.0])
    assert np.allclose(marked_intensity(p, 0.5), [1, 0])
    assert np.allclose(marked_intensity(p, 1.5), [0, 2])
    assert log_likelihood(p, EventSequence((), (), 3.0)) == pytest.approx(-5.0)


def test_likelihood_ratio_mean_one():
    a, b = PoissonMtpp([1.0, 0.5]), PoissonMtpp([0.7, 0.9])
    T, n = 2.0, 20_000
    res = Thinner(b).run(n, T, RngStream(8).generator())
    w = np.array([math.exp(log_likelihood(a, EventSequence(res.times[i], res.marks[i], T))
                           - log_likelihood(b, EventSequence(res.times[i], res.marks[i], T)))
                  for i in range(n)])
    assert abs(w.mean() - 1) <= 4 * w.std(ddof=1) / math.sqrt(n)


def test_thinner_guards_dominating_rate():
    class Broken(PoissonMtpp):
        def rate_bounds(self, state, t0, t1):
            return np.broadcast_to(self._max * 0.5, (np.size(t0), self.n_marks))

    with pytest.raises(RuntimeError, match="dominating rate violated"):
        Thinner(Broken([1.0])).run(10, 100.0, RngStream(1).generator())


def test_self_correcting_sampling_is_stable():
    sc = random_self_correcting(3, np.random.default_rng(2))
    res = Thinner(sc, record_events=False).run(200, 5.0, RngStream(2).generator())
    assert np.all(res.counts > 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_model_roundtrip(K, seed):
    gen = np.random.default_rng(seed)
    for m in (random_hawkes(K, gen), random_self_correcting(K, gen),
              PoissonMtpp(gen.uniform(0.1, 2, K))):
        again = model_from_dict(model_to_dict(m))
        assert model_to_dict(again) == model_to_dict(m)


def test_model_file_roundtrip(tmp_path):
    h = random_hawkes(4, np.random.default_rng(0), "block", block=2)
    save_model(h, tmp_path / "h.json")
    assert model_to_dict(load_model(tmp_path / "h.json")) == model_to_dict(h)
    seq = EventSequence([0.1, 0.4], [1, 0], 2.0)
    assert sequence_from_dict(sequence_to_dict(seq)) == seq


def test_unknown_family_rejected():
    with pytest.raises(ValueError, match="unknown model family"):
        model_from_dict({"family": "neural"})


def test_random_hawkes_parameter_law():
    h = random_hawkes(20, np.random.default_rng(1), "block")
    a = np.asarray(h.alpha)
    g = np.arange(20) // 5
    assert np.all(a[g[:, None] != g[None, :]] == 0)
    inside = a[g[:, None] == g[None, :]]
    assert inside.min() >= 0.3 and inside.max() <= 0.8
    d = random_hawkes(20, np.random.default_rng(1))
    assert np.asarray(d.alpha).min() >= 0.075 and np.asarray(d.alpha).max() <= 0.2


def test_event_sequence_validation():
    with pytest.raises(ValueError):
        EventSequence([1.0, 0.5], [0, 0])
    with pytest.raises(ValueError):
        EventSequence([1.0], [0, 1])
    s = EventSequence([0.2, 0.6, 0.9], [0, 1, 0], 1.0)
    assert s.before(0.6).times == (0.2,)
