"""Restricted-mark queries on marked point processes: the mark-zeroing
proposal, its importance-sampling estimator, and hitting-time, n-th mark and
A-before-B queries with naive counterparts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .estcore import (EstimateSummary, Grid, as_stream, draw_chunked, mc_accumulate,
                      summarize_columns)
from .mtpp import (EventSequence, MtppModel, Thinner, _mark_integral_to_infinity,
                   mark_integral)

__all__ = [
    "MarkSchedule",
    "RestrictedProposal",
    "restricted_proposal",
    "restricted_mark_is_estimate",
    "naive_query_estimate",
    "hitting_time_cdf_estimate",
    "hitting_time_cdf_naive",
    "hitting_time_cdf_samples",
    "nth_mark_samples",
    "a_before_b_samples",
    "restricted_mark_is_samples",
    "nth_mark_estimate",
    "nth_mark_naive",
    "a_before_b_estimate",
    "a_before_b_naive",
    "check_bernoulli_bound",
]

BOUND_SLACK = 1e-12


def _mark_mask(K: int, marks) -> np.ndarray:
    m = np.zeros(K, dtype=bool)
    for k in marks:
        if not 0 <= int(k) < K:
            raise ValueError(f"mark {k} outside 0..{K - 1}")
        m[int(k)] = True
    return m


@dataclass(frozen=True)
class MarkSchedule:
    """Forbidden mark set ``forbidden[i]`` on ``(boundaries[i-1], boundaries[i]]``
    with ``boundaries[-1] = 0`` implied."""

    boundaries: tuple
    forbidden: tuple

    def __init__(self, boundaries: Sequence[float], forbidden: Sequence):
        b = tuple(float(x) for x in boundaries)
        f = tuple(frozenset(int(k) for k in s) for s in forbidden)
        if len(b) != len(f) or not b:
            raise ValueError("need one forbidden set per interval")
        if b[0] <= 0 or any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("boundaries must be positive and strictly increasing")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "forbidden", f)

    @property
    def end(self) -> float:
        return self.boundaries[-1]

    def masks(self, K: int) -> np.ndarray:
        return np.stack([_mark_mask(K, s) for s in self.forbidden])

    def phase(self, t) -> np.ndarray:
        # interval i covers (b_{i-1}, b_i]; segment starts sit at left edges
        return np.minimum(np.searchsorted(self.boundaries, t, side="right"),
                          len(self.boundaries) - 1)


class RestrictedProposal(MtppModel):
    """Base model with forbidden marks' intensities set to zero by phase."""

    def __init__(self, base: MtppModel, schedule: MarkSchedule):
        self.base = base
        self.schedule = schedule
        self.n_marks = base.n_marks
        self.bound_window = base.bound_window
        self._masks = schedule.masks(base.n_marks)

    def new_state(self, batch):
        return self.base.new_state(batch)

    def _phase_left(self, t):
        # the rate at time t uses the interval (b_{i-1}, b_i] containing t
        return np.minimum(np.searchsorted(self.schedule.boundaries, t, side="left"),
                          len(self.schedule.boundaries) - 1)

    def rates(self, state, t):
        t = np.asarray(t, dtype=float)
        lam = self.base.rates(state, t)
        return np.where(self._masks[self._phase_left(t)], 0.0, lam)

    def compensator(self, state, t0, t1):
        t0 = np.asarray(t0, dtype=float)
        t1 = np.asarray(t1, dtype=float)
        out = np.zeros((t0.size, self.n_marks))
        lo = t0.copy()
        edges = list(self.schedule.boundaries[:-1]) + [math.inf]
        for i, edge in enumerate(edges):
            hi = np.minimum(t1, edge)
            live = hi > lo
            if live.any():
                comp = self.base.compensator(state, lo, np.where(live, hi, lo))
                out += np.where(live[:, None] & ~self._masks[i][None], comp, 0.0)
            lo = np.maximum(lo, hi)
        return out

    def rate_bounds(self, state, t0, t1):
        return self.base.rate_bounds(state, t0, t1)

    def add_events(self, state, idx, t, marks):
        if np.size(idx):
            ph = self._phase_left(np.asarray(t, dtype=float))
            if np.any(self._masks[ph, marks]):
                raise AssertionError("proposal produced a forbidden mark")
        self.base.add_events(state, idx, t, marks)


def restricted_proposal(model: MtppModel, schedule: MarkSchedule) -> RestrictedProposal:
    return RestrictedProposal(model, schedule)


def _initial_state(model, history, n):
    return model.state_from_history(history, n)


def _start(history):
    return 0.0 if history is None else history.window_end


def restricted_mark_is_samples(model, schedule, n, rng, history=None, workers=None):
    masks = schedule.masks(model.n_marks)
    t0 = _start(history)
    # the schedule's first interval starts at the end of the history
    bounds = np.array(schedule.boundaries)

    def forbid(t, counts):
        return masks[np.minimum(np.searchsorted(bounds, t, side="right"), len(bounds) - 1)]

    def draw(m, gen):
        eng = Thinner(model, forbid=forbid, stops=bounds, record_events=False)
        res = eng.run(m, schedule.end, gen, state=_initial_state(model, history, m), t_start=t0)
        return np.exp(res.logw)

    vals = draw_chunked(draw, n, as_stream(rng).child("restricted"), workers=workers)
    _assert_unit(vals)
    return vals


def _assert_unit(vals):
    if np.any(vals < -BOUND_SLACK) or np.any(vals > 1 + BOUND_SLACK):
        raise AssertionError("importance-sampling value outside [0, 1]")


def check_bernoulli_bound(values, slack: float = 1e-9) -> None:
    """Variance of [0,1]-valued samples cannot exceed ``p(1-p)`` (plus the
    ``n/(n-1)`` sample-variance correction)."""
    v = np.asarray(values, dtype=float)
    n = v.size
    if n < 2:
        return
    p = v.mean()
    if v.var(ddof=1) > p * (1 - p) * n / (n - 1) + 3 * slack:
        raise AssertionError("sample variance exceeds the Bernoulli bound")


def restricted_mark_is_estimate(model: MtppModel, schedule: MarkSchedule, n: int, rng,
                                history: EventSequence | None = None, workers=None) -> EstimateSummary:
    """Probability of no forbidden mark in its interval, by importance sampling."""
    vals = restricted_mark_is_samples(model, schedule, n, rng, history, workers)
    check_bernoulli_bound(vals)
    return mc_accumulate(vals, "IS")


def _naive_sequences(model, tau, n, rng, history, label, workers, done=None):
    def draw(m, gen):
        res = Thinner(model).run(m, tau, gen, state=_initial_state(model, history, m),
                                 t_start=_start(history))
        out = np.empty(m, dtype=object)
        for i in range(m):
            out[i] = (tuple(res.times[i]), tuple(res.marks[i]))
        return out

    return draw_chunked(draw, n, as_stream(rng).child(label), workers=workers)


def naive_query_estimate(model: MtppModel, predicate: Callable[[EventSequence], bool], tau: float,
                         n: int, rng, history: EventSequence | None = None,
                         workers=None) -> EstimateSummary:
    """Relative frequency of ``predicate`` over unrestricted samples on
    ``[start, tau]`` (the sequence passed holds only the new events)."""
    seqs = _naive_sequences(model, tau, n, rng, history, "naive", workers)
    vals = np.array([1.0 if predicate(EventSequence(t, m, tau)) else 0.0 for t, m in seqs])
    return mc_accumulate(vals, "naive")


def _grid(t) -> tuple[np.ndarray, bool]:
    if isinstance(t, Grid):
        return t.array(), False
    arr = np.atleast_1d(np.asarray(t, dtype=float))
    Grid(arr)
    return arr, np.ndim(t) == 0


def hitting_time_cdf_samples(model, A, t, n, rng, history=None, workers=None):
    grid, _ = _grid(t)
    mask = _mark_mask(model.n_marks, A)
    t0 = _start(history)
    if grid[0] < t0:
        raise ValueError("grid starts before the end of the history")

    def draw(m, gen):
        eng = Thinner(model, forbid=lambda s, c: np.broadcast_to(mask, (s.size, mask.size)),
                      stops=grid, record_events=False)
        res = eng.run(m, grid[-1], gen, state=_initial_state(model, history, m), t_start=t0)
        return 1.0 - np.exp(res.checkpoints)

    vals = draw_chunked(draw, n, as_stream(rng).child("hit-is"), workers=workers)
    _assert_unit(vals)
    return vals


def hitting_time_cdf_estimate(model: MtppModel, A, t, n: int, rng,
                              history: EventSequence | None = None, workers=None):
    """``1 - E_Q[exp(-∫ λ_A)]`` under the proposal forbidding ``A``.

    ``t`` may be a scalar (one summary) or a grid (one summary per point,
    all from the same trajectories).
    """
    vals = hitting_time_cdf_samples(model, A, t, n, rng, history, workers)
    out = summarize_columns(vals, "IS")
    return out[0] if np.ndim(t) == 0 and not isinstance(t, Grid) else out


def hitting_time_cdf_naive(model: MtppModel, A, t, n: int, rng,
                           history: EventSequence | None = None, workers=None):
    grid, _ = _grid(t)
    mask = _mark_mask(model.n_marks, A)
    t0 = _start(history)

    def draw(m, gen):
        first = np.full(m, np.inf)

        eng = Thinner(model, record_events=True)
        res = eng.run(m, grid[-1], gen, state=_initial_state(model, history, m), t_start=t0)
        for i in range(m):
            for ti, mi in zip(res.times[i], res.marks[i]):
                if mask[mi]:
                    first[i] = ti
                    break
        return (first[:, None] <= grid[None, :]).astype(float)

    vals = draw_chunked(draw, n, as_stream(rng).child("hit-naive"), workers=workers)
    out = summarize_columns(vals, "naive")
    return out[0] if np.ndim(t) == 0 and not isinstance(t, Grid) else out


def _run_until_count(model, state, t, gen, target, horizon, retries, forbid=None):
    """Advance each path until it has ``target`` more events, doubling the
    horizon for stragglers.  Returns ``(t, counts, logw, marks, unfinished)``."""
    m = t.size
    t = t.copy()
    counts = np.zeros(m, dtype=np.int64)
    logw = np.zeros(m)
    marks = [[] for _ in range(m)]
    todo = np.arange(m) if target > 0 else np.arange(0)
    span = float(horizon)
    for _ in range(retries + 1):
        if todo.size == 0:
            break
        need = target - counts[todo]
        eng = Thinner(model, forbid=forbid, done=lambda idx, c, need=need: c >= need[idx])
        sub = model.take(state, todo)
        res = eng.run(todo.size, t[todo] + span, gen, state=sub, t_start=t[todo])
        model.put(state, todo, res.state)
        counts[todo] += res.counts
        logw[todo] += res.logw
        t[todo] = res.end_time
        for j, i in enumerate(todo.tolist()):
            marks[i].extend(res.marks[j])
        todo = todo[counts[todo] < target]
        span *= 2
    return t, counts, logw, marks, todo


def nth_mark_samples(model, A, n_idx, n, rng, history=None, integrate_last=True,
                     complement=False, horizon=100.0, retries=8, points=200,
                     tol=1e-10, workers=None):
    if n_idx < 1:
        raise ValueError("n_idx must be at least 1")
    K = model.n_marks
    mask_A = _mark_mask(K, A)
    target = ~mask_A if complement else mask_A
    t0 = _start(history)

    def draw(m, gen):
        state = _initial_state(model, history, m)
        t, _, _, _, todo = _run_until_count(model, state, np.full(m, t0), gen, n_idx - 1,
                                            horizon, retries)
        if todo.size:
            raise RuntimeError("trajectory cap reached before the requested event")
        if integrate_last:
            val, _ = _mark_integral_to_infinity(model, state, t, target, None, points, tol, 1e9)
        else:
            # the n-th event drawn with the other marks forbidden
            fm = np.broadcast_to(~target, (1, K))
            _, _, lw, _, _ = _run_until_count(model, state, t, gen, 1, horizon, retries,
                                              forbid=lambda s, c: np.repeat(fm, s.size, axis=0))
            val = np.exp(lw)
        return 1.0 - val if complement else val

    vals = draw_chunked(draw, n, as_stream(rng).child("nth", n_idx, int(complement),
                                                       int(integrate_last)), workers=workers)
    _assert_unit(vals)
    return vals


def nth_mark_estimate(model: MtppModel, A, n_idx: int, n: int, rng,
                      history: EventSequence | None = None, integrate_last: bool = True,
                      complement: bool = False, workers=None, **kw) -> EstimateSummary:
    """Probability that the ``n_idx``-th event (after the history) has a
    mark in ``A``.

    With ``integrate_last`` the final inter-event interval is integrated out
    given the simulated history up to event ``n_idx - 1``; otherwise it is
    sampled under the proposal that forbids the complement of ``A`` and
    weighted by ``exp(-∫ λ_{A'})``.  ``complement`` evaluates
    ``1 - P(mark ∉ A)`` instead.
    """
    vals = nth_mark_samples(model, A, n_idx, n, rng, history, integrate_last, complement,
                            workers=workers, **kw)
    check_bernoulli_bound(vals)
    tag = "IS-complement" if complement else "IS"
    return mc_accumulate(vals, tag)


def nth_mark_naive(model: MtppModel, A, n_idx: int, n: int, rng,
                   history: EventSequence | None = None, horizon: float = 100.0,
                   retries: int = 8, workers=None) -> EstimateSummary:
    """Frequency of the ``n_idx``-th new event having a mark in ``A``; paths
    where it never occurs count as misses."""
    mask = _mark_mask(model.n_marks, A)
    t0 = _start(history)

    def draw(m, gen):
        state = _initial_state(model, history, m)
        _, counts, _, marks, _ = _run_until_count(model, state, np.full(m, t0), gen, n_idx,
                                                  horizon, retries)
        return np.array([1.0 if c >= n_idx and mask[mk[n_idx - 1]] else 0.0
                         for c, mk in zip(counts, marks)])

    vals = draw_chunked(draw, n, as_stream(rng).child("nth-naive", n_idx), workers=workers)
    return mc_accumulate(vals, "naive")


def a_before_b_samples(model, A, B, n, rng, history=None, eps=0.01, tau=None,
                       tau_cap=1000.0, step=0.05, max_pieces=256, workers=None):
    """Per-sample ``(I_A, I_B, gap)`` with ``I_X = ∫ λ_X exp(-∫ λ_{A∪B})``."""
    K = model.n_marks
    mA = _mark_mask(K, A)
    mB = _mark_mask(K, B)
    if (mA & mB).any():
        raise ValueError("A and B must be disjoint")
    forbid_mask = mA | mB
    t0 = _start(history)
    fixed = tau is not None
    t_end = float(tau) if fixed else t0 + float(tau_cap)
    log_eps = math.log(eps) if eps > 0 else -math.inf

    def draw(m, gen):
        IA = np.zeros(m)
        IB = np.zeros(m)
        logS = np.zeros(m)

        def on_segment(idx, s0, s1, fm, sub):
            span = s1 - s0
            J = int(np.clip(np.ceil(np.max(span) / step), 1, max_pieces)) if span.size else 1
            for j in range(J):
                a = s0 + span * (j / J)
                b = s0 + span * ((j + 1) / J)
                comp = model.compensator(sub, a, b)
                dA = comp[:, mA].sum(axis=1)
                dB = comp[:, mB].sum(axis=1)
                d = dA + dB
                with np.errstate(invalid="ignore", divide="ignore"):
                    avg = np.where(d > 1e-12, -np.expm1(-d) / np.where(d > 0, d, 1.0), 1.0 - d / 2)
                S = np.exp(logS[idx])
                IA[idx] += S * dA * avg
                IB[idx] += S * dB * avg
                logS[idx] -= d

        def done(idx, counts):
            return logS[idx] <= log_eps if not fixed else np.zeros(idx.size, dtype=bool)

        eng = Thinner(model, forbid=lambda s, c: np.broadcast_to(forbid_mask, (s.size, K)),
                      on_segment=on_segment, done=done, record_events=False)
        eng.run(m, t_end, gen, state=_initial_state(model, history, m), t_start=t0)
        return np.stack([IA, IB, np.exp(logS)], axis=1)

    out = draw_chunked(draw, n, as_stream(rng).child("a-before-b"), workers=workers)
    if np.any(out[:, 0] > 1 + 1e-9) or np.any(out[:, 1] > 1 + 1e-9):
        raise AssertionError("accumulated integrand exceeds 1")
    return out


def a_before_b_estimate(model: MtppModel, A, B, n: int, rng, eps: float = 0.01,
                        tau: float | None = None, history: EventSequence | None = None,
                        tau_cap: float = 1000.0, workers=None, **kw) -> EstimateSummary:
    """Midpoint of the truncated lower bound ``I_A`` and upper bound
    ``1 - I_B`` (biased); both bounds are reported in ``extra``."""
    out = a_before_b_samples(model, A, B, n, rng, history, eps, tau, tau_cap, workers=workers, **kw)
    IA, IB, gap = out[:, 0], out[:, 1], out[:, 2]
    mid = 0.5 * (IA + 1.0 - IB)
    lo = mc_accumulate(IA)
    up = mc_accumulate(1.0 - IB)
    s = mc_accumulate(mid, "IS-midpoint")
    unmet = float(np.sum(gap > eps + 1e-15)) if tau is None else 0.0
    return s.with_method("IS-midpoint", biased=1.0, lower=lo.mean, lower_se=lo.se,
                         upper=up.mean, upper_se=up.se, mean_gap=float(gap.mean()),
                         unmet=unmet)


def a_before_b_naive(model: MtppModel, A, B, n: int, rng, tau: float,
                     history: EventSequence | None = None, workers=None) -> EstimateSummary:
    """Frequency with which an ``A`` mark precedes every ``B`` mark within
    ``tau``."""
    K = model.n_marks
    mA = _mark_mask(K, A)
    mB = _mark_mask(K, B)

    def pred(seq):
        for mk in seq.marks:
            if mA[mk]:
                return True
            if mB[mk]:
                return False
        return False

    return naive_query_estimate(model, pred, tau, n, rng, history, workers)
