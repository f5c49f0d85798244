import math

import numpy as np
import pytest

from qprob.estcore import EFFICIENCY_INF
from qprob.hitting_est import (cdf_estimate, cdf_estimates, efficiency_report, joint_estimate,
                               ordered_estimate, simulate_bank)
from qprob.jump import HalfSpace, Hit, MultiPoisson, PoissonCounter, make_example_process

LAM = 1.5
POIS = PoissonCounter(rate=LAM)
FIRST = Hit(HalfSpace(0, 1.0))
GRID = [0.0, 0.25, 0.5, 1.0, 2.0]


def within(s, exact, k=4.0):
    return abs(s.mean - exact) <= k * s.se + 1e-12


def mutual(a, b, k=4.0):
    return abs(a.mean - b.mean) <= k * math.hypot(a.se, b.se) + 1e-12


def test_poisson_is_is_deterministic_and_equals_isp():
    c = cdf_estimates(POIS, FIRST, GRID, 500, ["IS", "ISP"], rng=1)
    exact = 1 - np.exp(-LAM * np.asarray(GRID))
    assert np.allclose(c["IS"].means, exact, atol=1e-12)
    assert np.all(c["IS"].variances == 0)
    assert np.array_equal(c["IS"].means, c["ISP"].means)


def test_is_and_isp_agree_sample_by_sample():
    m, ghts = make_example_process("merton")
    b = simulate_bank(m, [ghts["c=1.25"]], [0.5, 1.0], 300, rng=2, mode="euler", policy=("only", 0))
    L = np.exp(b.logL_grid)
    assert np.all(L <= 1.0)
    # the proposal never realizes the hitting time
    assert np.all(np.isinf(b.times[:, 0]))
    c = cdf_estimates(m, ghts["c=1.25"], [0.5, 1.0], 300, ["IS", "ISP"], "euler", rng=3)
    assert np.array_equal(c["IS"].means, c["ISP"].means)
    assert np.array_equal(c["IS"].variances, c["ISP"].variances)


def test_poisson_base_methods_unbiased():
    c = cdf_estimates(POIS, FIRST, GRID, 20_000, ["NE", "TR"], rng=4)
    for t, a, b in zip(GRID, c["NE"].summaries, c["TR"].summaries):
        exact = 1 - math.exp(-LAM * t)
        assert within(a, exact) and within(b, exact)
        # the Bernoulli variance of NE
        assert a.var == pytest.approx(exact * (1 - exact), abs=0.01)


def test_grid_zero_gives_zero_for_every_method():
    m, ghts = make_example_process("merton")
    for mode in ("euler",):
        c = cdf_estimates(m, ghts["c=2"], [0.0, 0.5], 200, mode=mode, rng=5)
        for curve in c.values():
            assert curve.summaries[0].mean == 0.0
    c = cdf_estimates(POIS, FIRST, [0.0, 1.0], 200, rng=5)
    assert all(curve.summaries[0].mean == 0.0 for curve in c.values())


def test_ne_is_monotone_in_t():
    m, ghts = make_example_process("merton")
    ne = cdf_estimate(m, ghts["c=1.25"], np.linspace(0.2, 2, 10), 2000, "NE", "euler", rng=6)
    assert np.all(np.diff(ne.means) >= 0)


def test_merton_estimators_agree():
    m, ghts = make_example_process("merton")
    grid = [1.0, 3.0, 5.0]
    c = cdf_estimates(m, ghts["c=2"], grid, 4000, mode="euler", rng=7)
    for j in range(len(grid)):
        ne = c["NE"].summaries[j]
        for k in ("TR", "IS"):
            assert mutual(ne, c[k].summaries[j])
        assert np.all((c["IS"].means >= 0) & (c["IS"].means <= 1))


def test_drift_exit_without_drift_agrees_and_stays_low():
    p, ghts = make_example_process("drift_exit", b=0.0)
    g = ghts["exit c=3"]
    c = cdf_estimates(p, g, [2.0, 5.0], 3000, ["NE", "IS"], "euler", rng=8)
    for a, b in zip(c["NE"].summaries, c["IS"].summaries):
        assert mutual(a, b)
    assert c["NE"].means[-1] < 0.5


def test_exact_mode_rejects_diffusion():
    m, ghts = make_example_process("merton")
    with pytest.raises(ValueError):
        cdf_estimate(m, ghts["c=2"], [1.0], 10, "NE", "exact")


def test_unknown_method_and_bad_grid():
    with pytest.raises(ValueError):
        cdf_estimates(POIS, FIRST, [1.0], 10, ["MLE"])
    with pytest.raises(ValueError):
        cdf_estimate(POIS, FIRST, [1.0, 0.5], 10)


def test_bank_is_worker_invariant():
    p, ghts = make_example_process("ctmc_cover", n_vertices=3)
    a = cdf_estimates(p, ghts["cover"], [1.0, 3.0], 5000, rng=9, workers=1)
    b = cdf_estimates(p, ghts["cover"], [1.0, 3.0], 5000, rng=9, workers=8)
    for k in a:
        assert np.array_equal(a[k].means, b[k].means)
        assert np.array_equal(a[k].variances, b[k].variances)


def test_efficiency_report_examples():
    c = cdf_estimates(POIS, FIRST, GRID, 2000, ["NE", "IS"], rng=10)
    rows = efficiency_report([c["NE"], c["NE"]])
    for r in rows:
        if r["t"] > 0:
            assert r["eff"] == 1.0
        else:
            assert r["eff"] is None
    rows = efficiency_report([c["IS"], c["NE"]])
    hit = [r for r in rows if r["a"] == "IS" and r["b"] == "NE" and r["t"] > 0]
    assert hit and all(r["eff"] == EFFICIENCY_INF for r in hit)
    other = cdf_estimate(POIS, FIRST, [1.0, 2.0], 10, "NE", rng=1)
    with pytest.raises(ValueError):
        efficiency_report([c["NE"], other])


def test_merton_far_barrier_efficiency_direction():
    m, ghts = make_example_process("merton")
    c = cdf_estimates(m, ghts["c=10"], [0.5, 1.0], 2000, ["NE", "IS"], "euler", rng=11)
    assert np.all(c["IS"].variances < 1e-6)
    assert np.all(c["IS"].means < 1e-3)


# ordered and joint

R1, R2 = 1.0, 2.0
MP = MultiPoisson([R1, R2])
H0, H1 = Hit(HalfSpace(0, 1.0)), Hit(HalfSpace(1, 1.0))


def ordered_exact(t):
    # P(T0 < T1 <= t) for independent exponentials
    return (1 - math.exp(-R2 * t)) - R2 / (R1 + R2) * (1 - math.exp(-(R1 + R2) * t))


def test_ordered_single_time_is_isp():
    o = ordered_estimate(POIS, [FIRST], GRID, 300, rng=1)
    isp = cdf_estimate(POIS, FIRST, GRID, 300, "ISP", rng=1)
    assert np.allclose(o.means, isp.means, atol=1e-15)


def test_ordered_matches_closed_form_and_ne():
    grid = [0.5, 1.0, 2.0]
    o = ordered_estimate(MP, [H0, H1], grid, 20_000, rng=2)
    base = simulate_bank(MP, [H0, H1], grid, 20_000, rng=3)
    T0, T1 = base.times[:, 0], base.times[:, 1]
    for j, t in enumerate(grid):
        assert within(o.summaries[j], ordered_exact(t))
        ne = ((T0 < T1) & (T1 <= t)).astype(float)
        se = ne.std(ddof=1) / math.sqrt(ne.size)
        assert abs(ne.mean() - o.summaries[j].mean) <= 4 * math.hypot(se, o.summaries[j].se)
    assert o.summaries[-1].var < ne.var()


def test_ordered_impossible_order_is_zero():
    two = Hit(HalfSpace(0, 2.0))
    o = ordered_estimate(POIS, [two, FIRST], [1.0, 3.0], 500, rng=4)
    assert np.all(o.means == 0.0)


def test_joint_single_time_is_isp():
    for v in ("ordered", "unordered"):
        s = joint_estimate(POIS, [FIRST], [1.0], 300, v, rng=5)
        assert s.mean == pytest.approx(1 - math.exp(-LAM), abs=1e-12)


def test_joint_product_of_marginals():
    t = [1.0, 0.7]
    exact = (1 - math.exp(-R1 * t[0])) * (1 - math.exp(-R2 * t[1]))
    o = joint_estimate(MP, [H0, H1], t, 10_000, "ordered", rng=6)
    u = joint_estimate(MP, [H0, H1], t, 10_000, "unordered", rng=7)
    assert within(o, exact) and within(u, exact)
    assert mutual(o, u)
    assert o.extra["terms"] == 2.0 and u.extra["terms"] == 2.0


def test_joint_cap_and_validation():
    ghts = [Hit(HalfSpace(k, 1.0)) for k in range(6)]
    p = MultiPoisson([1.0] * 6)
    with pytest.raises(ValueError, match="limited to 5"):
        joint_estimate(p, ghts, [1.0] * 6, 10, "ordered")
    s = joint_estimate(p, ghts, [1.0] * 6, 200, "unordered", rng=1)
    assert s.extra["terms"] == 6.0
    with pytest.raises(ValueError):
        joint_estimate(p, ghts[:2], [1.0], 10)
    with pytest.raises(ValueError):
        joint_estimate(p, ghts[:2], [1.0, 1.0], 10, "sideways")


def test_joint_three_coordinates():
    rates = [0.5, 1.0, 1.5]
    p = MultiPoisson(rates)
    ghts = [Hit(HalfSpace(k, 1.0)) for k in range(3)]
    t = [2.0, 1.5, 1.0]
    exact = math.prod(1 - math.exp(-r * s) for r, s in zip(rates, t))
    for v in ("ordered", "unordered"):
        assert within(joint_estimate(p, ghts, t, 5000, v, rng=8), exact)
