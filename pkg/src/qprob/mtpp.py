"""Marked temporal point processes with a finite mark space.

Every model exposes a batched Markov state so many trajectories can be
simulated in lock-step: between events the intensity and its integral are
closed-form functions of the state and the clock.  Marks are ``0..K-1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .estcore import as_stream, sample_rows

__all__ = [
    "EventSequence",
    "MtppModel",
    "HawkesExp",
    "SelfCorrecting",
    "PoissonMtpp",
    "Thinner",
    "ThinningResult",
    "marked_intensity",
    "dominating_rate",
    "thinning_sample",
    "log_likelihood",
    "next_event_cdf",
    "next_mark_prob",
    "mark_integral",
    "random_hawkes",
    "random_self_correcting",
    "model_to_dict",
    "model_from_dict",
    "load_model",
    "save_model",
    "sequence_to_dict",
    "sequence_from_dict",
]

RATIO_SLACK = 1e-9


@dataclass(frozen=True)
class EventSequence:
    times: tuple
    marks: tuple
    window_end: float

    def __init__(self, times=(), marks=(), window_end: float | None = None):
        t = tuple(float(x) for x in times)
        m = tuple(int(x) for x in marks)
        if len(t) != len(m):
            raise ValueError("times and marks differ in length")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("event times must be strictly increasing")
        if t and t[0] < 0:
            raise ValueError("event times must be nonnegative")
        end = (t[-1] if t else 0.0) if window_end is None else float(window_end)
        if t and t[-1] > end:
            raise ValueError("events beyond the window end")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "marks", m)
        object.__setattr__(self, "window_end", end)

    def __len__(self):
        return len(self.times)

    @property
    def last_time(self) -> float:
        return self.times[-1] if self.times else 0.0

    def before(self, t: float) -> "EventSequence":
        k = int(np.searchsorted(self.times, t, side="left"))
        return EventSequence(self.times[:k], self.marks[:k], t)


class MtppModel:
    """Batched-state interface.

    ``state`` is a dict of arrays with a leading batch axis.  ``rates``,
    ``compensator`` and ``rate_bounds`` assume no event falls strictly
    between the state's last update and the queried times.
    """

    n_marks: int
    bound_window: float = math.inf

    def new_state(self, batch: int) -> dict:
        raise NotImplementedError

    def rates(self, state, t) -> np.ndarray:
        raise NotImplementedError

    def compensator(self, state, t0, t1) -> np.ndarray:
        raise NotImplementedError

    def rate_bounds(self, state, t0, t1) -> np.ndarray:
        """Per-mark upper bounds of the intensity on ``[t0, t1]``."""
        raise NotImplementedError

    def add_events(self, state, idx, t, marks) -> None:
        raise NotImplementedError

    def state_from_history(self, history: EventSequence | None, batch: int = 1) -> dict:
        state = self.new_state(batch)
        if history is not None:
            idx = np.arange(batch)
            for t, m in zip(history.times, history.marks):
                if not 0 <= m < self.n_marks:
                    raise ValueError(f"mark {m} outside 0..{self.n_marks - 1}")
                self.add_events(state, idx, np.full(batch, t), np.full(batch, m))
        return state

    @staticmethod
    def take(state, idx) -> dict:
        return {k: v[idx].copy() for k, v in state.items()}

    @staticmethod
    def put(state, idx, sub) -> None:
        for k, v in sub.items():
            state[k][idx] = v

    def to_dict(self) -> dict:
        raise NotImplementedError


class HawkesExp(MtppModel):
    """``λ_k(t) = μ_k + Σ_{(T,M) in history} α[M,k] exp(-β[M,k] (t - T))``."""

    family = "hawkes"

    def __init__(self, mu, alpha, beta):
        self.mu = np.asarray(mu, dtype=float).ravel()
        K = self.mu.size
        self.alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (K, K)).copy()
        self.beta = np.broadcast_to(np.asarray(beta, dtype=float), (K, K)).copy()
        if np.any(self.mu < 0) or np.any(self.alpha < 0):
            raise ValueError("mu and alpha must be nonnegative")
        if np.any(self.beta <= 0):
            raise ValueError("beta must be positive")
        self.n_marks = K

    def new_state(self, batch):
        K = self.n_marks
        return {"S": np.zeros((batch, K, K)), "ref": np.zeros(batch)}

    def _decay(self, state, t):
        dt = np.asarray(t, dtype=float) - state["ref"]
        if np.any(dt < -1e-12):
            raise ValueError("non-causal evaluation")
        return np.exp(-self.beta[None] * np.maximum(dt, 0)[:, None, None])

    def rates(self, state, t):
        return self.mu[None] + np.einsum("bik,bik->bk", state["S"], self._decay(state, t))

    def compensator(self, state, t0, t1):
        t0 = np.asarray(t0, dtype=float)
        t1 = np.asarray(t1, dtype=float)
        span = t1 - t0
        e0 = self._decay(state, t0)
        with np.errstate(over="ignore", invalid="ignore"):
            frac = -np.expm1(-self.beta[None] * span[:, None, None]) / self.beta[None]
        frac = np.where(np.isinf(span)[:, None, None], 1.0 / self.beta[None], frac)
        exc = np.einsum("bik,bik->bk", state["S"] * e0, frac)
        with np.errstate(invalid="ignore"):
            base = self.mu[None] * span[:, None]
        base = np.where(self.mu[None] == 0, 0.0, base)
        return base + exc

    def rate_bounds(self, state, t0, t1):
        return self.rates(state, t0)

    def add_events(self, state, idx, t, marks):
        idx = np.asarray(idx)
        if idx.size == 0:
            return
        t = np.asarray(t, dtype=float)
        dt = t - state["ref"][idx]
        if np.any(dt < -1e-12):
            raise ValueError("non-causal evaluation")
        S = state["S"][idx] * np.exp(-self.beta[None] * np.maximum(dt, 0)[:, None, None])
        S[np.arange(idx.size), marks, :] += self.alpha[marks]
        state["S"][idx] = S
        state["ref"][idx] = t

    def branching_ratio(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha / self.beta))))

    def to_dict(self):
        return {"family": self.family, "mu": self.mu.tolist(), "alpha": self.alpha.tolist(),
                "beta": self.beta.tolist()}


class SelfCorrecting(MtppModel):
    """``λ_k(t) = exp(η_k t - Σ_{(T,M) in history} δ[M,k])``."""

    family = "self_correcting"

    def __init__(self, eta, delta):
        self.eta = np.asarray(eta, dtype=float).ravel()
        K = self.eta.size
        self.delta = np.broadcast_to(np.asarray(delta, dtype=float), (K, K)).copy()
        if np.any(self.eta <= 0) or np.any(self.delta <= 0):
            raise ValueError("eta and delta must be positive")
        self.n_marks = K
        # the bound over a window grows by at most a factor 2
        self.bound_window = math.log(2.0) / float(self.eta.max())

    def new_state(self, batch):
        return {"D": np.zeros((batch, self.n_marks)), "last": np.zeros(batch)}

    def rates(self, state, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < state["last"] - 1e-12):
            raise ValueError("non-causal evaluation")
        return np.exp(self.eta[None] * t[:, None] - state["D"])

    def compensator(self, state, t0, t1):
        t0 = np.asarray(t0, dtype=float)[:, None]
        t1 = np.asarray(t1, dtype=float)[:, None]
        e = self.eta[None]
        # e^{ηt0}(e^{η(t1-t0)} - 1)/η, written to stay accurate for small spans
        return np.exp(e * t0 - state["D"]) * np.expm1(e * (t1 - t0)) / e

    def rate_bounds(self, state, t0, t1):
        return self.rates(state, t1)

    def add_events(self, state, idx, t, marks):
        idx = np.asarray(idx)
        if idx.size == 0:
            return
        state["D"][idx] += self.delta[marks]
        state["last"][idx] = t

    def to_dict(self):
        return {"family": self.family, "eta": self.eta.tolist(), "delta": self.delta.tolist()}


class PoissonMtpp(MtppModel):
    """History-free rates, constant or piecewise constant in time.

    ``rates`` is a length-K vector, or a ``(J, K)`` table paired with
    ``breakpoints`` ``0 = b_0 < b_1 < … < b_{J-1}``; row ``j`` applies on
    ``[b_j, b_{j+1})`` and the last row forever after.
    """

    family = "poisson"

    def __init__(self, rates, breakpoints=None):
        r = np.asarray(rates, dtype=float)
        if r.ndim == 1:
            r = r[None]
            bp = np.zeros(1)
        else:
            if breakpoints is None:
                raise ValueError("a rate table needs breakpoints")
            bp = np.asarray(breakpoints, dtype=float)
            if bp.size != r.shape[0] or bp[0] != 0 or np.any(np.diff(bp) <= 0):
                raise ValueError("breakpoints must start at 0 and increase")
        if np.any(r < 0):
            raise ValueError("rates must be nonnegative")
        self.table = r
        self.breaks = bp
        self.n_marks = r.shape[1]
        # cumulative integral at each breakpoint
        widths = np.diff(bp)
        self._cum = np.vstack([np.zeros((1, self.n_marks)),
                               np.cumsum(r[:-1] * widths[:, None], axis=0)])
        self._max = r.max(axis=0)

    def new_state(self, batch):
        return {"last": np.zeros(batch)}

    def _piece(self, t):
        return np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.breaks) - 1)

    def rates(self, state, t):
        return self.table[self._piece(np.asarray(t, dtype=float))]

    def _Lambda(self, t):
        t = np.asarray(t, dtype=float)
        j = self._piece(t)
        with np.errstate(invalid="ignore"):
            out = self._cum[j] + self.table[j] * (t - self.breaks[j])[:, None]
        return np.where(self.table[j] == 0, self._cum[j], out)

    def compensator(self, state, t0, t1):
        t0 = np.asarray(t0, dtype=float)
        t1 = np.asarray(t1, dtype=float)
        if len(self.breaks) == 1:
            with np.errstate(invalid="ignore"):
                out = self.table[0][None] * (t1 - t0)[:, None]
            return np.where(self.table[0][None] == 0, 0.0, out)
        return self._Lambda(t1) - self._Lambda(t0)

    def rate_bounds(self, state, t0, t1):
        return np.broadcast_to(self._max, (np.size(t0), self.n_marks))

    def add_events(self, state, idx, t, marks):
        if np.size(idx):
            state["last"][idx] = t

    def to_dict(self):
        d = {"family": self.family, "rates": self.table.tolist() if len(self.breaks) > 1
             else self.table[0].tolist()}
        if len(self.breaks) > 1:
            d["breakpoints"] = self.breaks.tolist()
        return d


# ---------------------------------------------------------------------------
# Thinning engine


@dataclass
class ThinningResult:
    times: list
    marks: list
    logw: np.ndarray
    checkpoints: np.ndarray | None
    end_time: np.ndarray
    state: dict
    counts: np.ndarray
    extra: dict = field(default_factory=dict)

    def sequence(self, i: int, window_end: float) -> EventSequence:
        return EventSequence(self.times[i], self.marks[i], window_end)


class Thinner:
    """Lock-step thinning over a batch of trajectories.

    forbid(t_seg, counts) -> (n, K) bool
        marks excluded from the proposal on the current segment; their
        integrated intensity is subtracted from ``logw``.
    stops
        common times where every path pauses: schedule boundaries,
        checkpoints and injected events.  ``inject[j] >= 0`` adds an event
        with that mark at ``stops[j]`` (after the checkpoint is recorded).
    on_segment(idx, t0, t1, forbid_mask, state_view)
        called for every event-free piece of a trajectory.
    on_stop(idx, j, state_view)
        called at each stop before injection.
    done(idx, counts) -> bool array
        lets paths finish early; ``counts`` are the events sampled so far.
    """

    def __init__(self, model: MtppModel, forbid: Callable | None = None,
                 stops=(), inject=None, checkpoint_mask=None, on_segment=None,
                 on_stop=None, done=None, event_weights: bool = True,
                 record_events: bool = True, max_events: int = 100_000):
        self.model = model
        self.forbid = forbid
        self.stops = np.asarray(stops, dtype=float)
        self.inject = (np.full(self.stops.size, -1, dtype=np.int64) if inject is None
                       else np.asarray(inject, dtype=np.int64))
        self.checkpoint_mask = (np.ones(self.stops.size, dtype=bool) if checkpoint_mask is None
                                else np.asarray(checkpoint_mask, dtype=bool))
        self.on_segment = on_segment
        self.on_stop = on_stop
        self.done = done
        self.event_weights = event_weights
        self.record_events = record_events
        self.max_events = max_events

    def _mask(self, t, counts):
        K = self.model.n_marks
        if self.forbid is None:
            return np.zeros((t.size, K), dtype=bool)
        return np.asarray(self.forbid(t, counts), dtype=bool)

    def run(self, batch: int, t_end, gen: np.random.Generator, state: dict | None = None,
            t_start: float | np.ndarray = 0.0) -> ThinningResult:
        model = self.model
        K = model.n_marks
        t_end = np.broadcast_to(np.asarray(t_end, dtype=float), (batch,)).copy()
        t = np.broadcast_to(np.asarray(t_start, dtype=float), (batch,)).copy()
        seg = t.copy()
        if state is None:
            state = model.new_state(batch)
        logw = np.zeros(batch)
        counts = np.zeros(batch, dtype=np.int64)
        ptr = np.searchsorted(self.stops, t, side="left")
        n_ck = int(self.checkpoint_mask.sum())
        ck_index = np.cumsum(self.checkpoint_mask) - 1
        ck = np.full((batch, n_ck), np.nan) if n_ck else None
        times = [[] for _ in range(batch)]
        marks = [[] for _ in range(batch)]
        active = t < t_end
        n_stops = self.stops.size
        stops_ext = np.append(self.stops, np.inf)

        def close(idx, t1):
            # integrate forbidden intensity over [seg, t1] and run hooks
            sub = model.take(state, idx)
            fm = self._mask(seg[idx], counts[idx])
            if fm.any():
                comp = model.compensator(sub, seg[idx], t1)
                logw[idx] -= np.where(fm, comp, 0.0).sum(axis=1)
            if self.on_segment is not None:
                self.on_segment(idx, seg[idx].copy(), np.asarray(t1, dtype=float).copy(), fm, sub)
            seg[idx] = t1

        while active.any():
            idx = np.nonzero(active)[0]
            stop = np.minimum(stops_ext[ptr[idx]], t_end[idx])
            hor = np.minimum(stop, t[idx] + model.bound_window)
            sub = model.take(state, idx)
            fm = self._mask(seg[idx], counts[idx])
            bounds = np.where(fm, 0.0, model.rate_bounds(sub, t[idx], hor))
            c = bounds.sum(axis=1)
            e = gen.standard_exponential(idx.size)
            u = gen.random(idx.size)
            v = gen.random(idx.size)
            with np.errstate(divide="ignore"):
                cand = t[idx] + np.where(c > 0, e / np.where(c > 0, c, 1.0), np.inf)
            beyond = cand >= hor
            # paths that reach their horizon without a candidate
            if beyond.any():
                b_idx = idx[beyond]
                b_hor = hor[beyond]
                reached_stop = b_hor >= stop[beyond]
                t[b_idx] = b_hor
                s_idx = b_idx[reached_stop]
                if s_idx.size:
                    s_time = b_hor[reached_stop]
                    close(s_idx, s_time)
                    is_stop = stops_ext[ptr[s_idx]] <= s_time
                    st_idx = s_idx[is_stop]
                    if st_idx.size:
                        self._at_stop(st_idx, ptr, state, logw, counts, ck, ck_index, times, marks)
                    fin = t[s_idx] >= t_end[s_idx]
                    active[s_idx[fin]] = False
            within = ~beyond
            if within.any():
                w_idx = idx[within]
                tc = cand[within]
                sub_w = model.take(state, w_idx)
                lam = model.rates(sub_w, tc)
                lam = np.where(fm[within], 0.0, lam)
                tot = lam.sum(axis=1)
                ratio = tot / c[within]
                if np.any(ratio > 1 + RATIO_SLACK):
                    raise RuntimeError("dominating rate violated")
                acc = u[within] < ratio
                t[w_idx] = tc
                a_idx = w_idx[acc]
                if a_idx.size:
                    mk = sample_rows(lam[acc], v[within][acc])
                    if np.any(fm[within][acc][np.arange(a_idx.size), mk]):
                        raise AssertionError("proposal produced a forbidden mark")
                    close(a_idx, tc[acc])
                    model.add_events(state, a_idx, tc[acc], mk)
                    counts[a_idx] += 1
                    if self.record_events:
                        for i, ti, mi in zip(a_idx.tolist(), tc[acc].tolist(), mk.tolist()):
                            times[i].append(ti)
                            marks[i].append(mi)
                    if np.any(counts[a_idx] > self.max_events):
                        raise RuntimeError("event cap exceeded; the process may be explosive")
            if self.done is not None:
                live = np.nonzero(active)[0]
                if live.size:
                    fin = np.asarray(self.done(live, counts[live]), dtype=bool)
                    active[live[fin]] = False
        return ThinningResult(times, marks, logw, ck, t, state, counts)

    def _at_stop(self, idx, ptr, state, logw, counts, ck, ck_index, times, marks):
        j_all = ptr[idx]
        for j in np.unique(j_all):
            sel = idx[j_all == j]
            if self.checkpoint_mask[j] and ck is not None:
                ck[sel, ck_index[j]] = logw[sel]
            if self.on_stop is not None:
                self.on_stop(sel, int(j), self.model.take(state, sel))
            m = int(self.inject[j])
            if m >= 0:
                tj = float(self.stops[j])
                if self.event_weights:
                    lam = self.model.rates(self.model.take(state, sel), np.full(sel.size, tj))[:, m]
                    with np.errstate(divide="ignore"):
                        logw[sel] += np.log(lam)
                self.model.add_events(state, sel, np.full(sel.size, tj), np.full(sel.size, m))
                if self.record_events:
                    for i in sel.tolist():
                        times[i].append(tj)
                        marks[i].append(m)
            ptr[sel] = j + 1


# ---------------------------------------------------------------------------
# Single-sequence operations


def _check_history(model, history, t=None):
    if history is None:
        history = EventSequence()
    if t is not None and history.times and t < history.times[-1]:
        raise ValueError("non-causal evaluation")
    return history


def marked_intensity(model: MtppModel, t: float, history: EventSequence | None = None) -> np.ndarray:
    history = _check_history(model, history, t)
    if history.times and history.times[-1] >= t:
        raise ValueError("non-causal evaluation")
    state = model.state_from_history(history)
    return model.rates(state, np.array([float(t)]))[0]


def dominating_rate(model: MtppModel, t0: float, t1: float, history: EventSequence | None = None) -> float:
    """Upper bound on the total intensity over ``[t0, t1]`` with no new events."""
    history = _check_history(model, history, t0)
    state = model.state_from_history(history)
    total, t = 0.0, float(t0)
    # piece together windows for models whose bound is only valid locally
    while True:
        w = min(float(t1), t + model.bound_window)
        total = max(total, float(model.rate_bounds(state, np.array([t]), np.array([w])).sum()))
        if w >= t1:
            return total
        t = w


def thinning_sample(model: MtppModel, t_start: float, t_end: float, history: EventSequence | None,
                    rng) -> EventSequence:
    """One exact sample on ``(t_start, t_end]`` appended to ``history``."""
    history = _check_history(model, history, t_start)
    state = model.state_from_history(history)
    gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
    res = Thinner(model).run(1, t_end, gen, state=state, t_start=t_start)
    return EventSequence(history.times + tuple(res.times[0]), history.marks + tuple(res.marks[0]),
                         t_end)


def log_likelihood(model: MtppModel, sequence: EventSequence, tau: float | None = None) -> float:
    tau = sequence.window_end if tau is None else float(tau)
    state = model.new_state(1)
    one = np.zeros(1, dtype=np.int64)
    ll, last = 0.0, 0.0
    for t, m in zip(sequence.times, sequence.marks):
        ll -= float(model.compensator(state, np.array([last]), np.array([t])).sum())
        lam = float(model.rates(state, np.array([t]))[0, m])
        if lam <= 0:
            return -math.inf
        ll += math.log(lam)
        model.add_events(state, one, np.array([t]), np.array([m]))
        last = t
    ll -= float(model.compensator(state, np.array([last]), np.array([tau])).sum())
    return ll


def next_event_cdf(model: MtppModel, history: EventSequence | None, t: float) -> float:
    history = _check_history(model, history, t)
    state = model.state_from_history(history)
    comp = model.compensator(state, np.array([history.last_time]), np.array([float(t)])).sum()
    return float(-math.expm1(-comp))


def mark_integral(model: MtppModel, state: dict, t0, t1, weight_mask, total_mask=None,
                  points: int = 1000):
    """``∫_{t0}^{t1} λ_W(s) exp(-∫_{t0}^s λ_T) ds`` per path, no events inside.

    Each of the ``points - 1`` panels uses the exact integrals of ``λ_W``
    and ``λ_T`` with ``exp(-Λ_T)`` averaged as if ``Λ_T`` were linear on the
    panel, which is exact whenever ``λ_W / λ_T`` is constant on it.
    Returns ``(integral, Λ_T(t1))``.
    """
    t0 = np.asarray(t0, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    K = model.n_marks
    W = np.asarray(weight_mask, dtype=bool)
    T = np.ones(K, dtype=bool) if total_mask is None else np.asarray(total_mask, dtype=bool)
    W = np.broadcast_to(W, (t0.size, K))
    T = np.broadcast_to(T, (t0.size, K))
    n = max(int(points) - 1, 1)
    edges = t0[:, None] + (t1 - t0)[:, None] * np.linspace(0.0, 1.0, n + 1)[None]
    acc = np.zeros(t0.size)
    Lam = np.zeros(t0.size)
    for j in range(n):
        comp = model.compensator(state, edges[:, j], edges[:, j + 1])
        dW = np.where(W, comp, 0.0).sum(axis=1)
        dT = np.where(T, comp, 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            avg = np.where(dT > 1e-12, -np.expm1(-dT) / np.where(dT > 0, dT, 1.0), 1.0 - dT / 2)
        acc += np.exp(-Lam) * dW * avg
        Lam += dT
    return acc, Lam


def next_mark_prob(model: MtppModel, history: EventSequence | None, A, bounds=None,
                   points: int = 1000, tol: float = 1e-10, max_span: float = 1e9) -> float:
    """Probability that the next event lands in ``[a, b]`` with a mark in ``A``."""
    history = _check_history(model, history)
    state = model.state_from_history(history)
    K = model.n_marks
    mask = np.zeros(K, dtype=bool)
    mask[list(A)] = True
    last = history.last_time
    a, b = (last, math.inf) if bounds is None else (float(bounds[0]), float(bounds[1]))
    if a < last:
        raise ValueError("integration must start after the history")
    if b <= a:
        return 0.0
    # survival up to a
    pre = float(model.compensator(state, np.array([last]), np.array([a])).sum()) if a > last else 0.0
    if math.isfinite(b):
        val, _ = mark_integral(model, state, np.array([a]), np.array([b]), mask, points=points)
        return float(math.exp(-pre) * val[0])
    val, _ = _mark_integral_to_infinity(model, state, np.array([a]), mask, None, points, tol, max_span)
    return float(math.exp(-pre) * val[0])


def _mark_integral_to_infinity(model, state, t0, weight_mask, total_mask, points, tol, max_span):
    """Extend the integral chunk by chunk until the survival is below tol."""
    t0 = np.asarray(t0, dtype=float)
    n = t0.size
    K = model.n_marks
    T = np.ones(K, dtype=bool) if total_mask is None else np.asarray(total_mask, dtype=bool)
    tot = np.where(T, model.rates(state, t0), 0.0).sum(axis=1)
    span = np.where(tot > 0, 10.0 / np.maximum(tot, 1e-300), 1.0)
    span = np.clip(span, 1e-6, max_span)
    start = t0.copy()
    acc = np.zeros(n)
    logS = np.zeros(n)
    live = np.ones(n, dtype=bool)
    covered = np.zeros(n)
    while live.any():
        if isinstance(model, PoissonMtpp):
            # constant rates past the last breakpoint integrate to a ratio
            fin = live & (start >= model.breaks[-1])
            if fin.any():
                f = np.nonzero(fin)[0]
                r = model.table[-1]
                wsum = np.where(weight_mask, r, 0.0).sum()
                tsum = np.where(T, r, 0.0).sum()
                acc[f] += np.exp(logS[f]) * (wsum / tsum if tsum > 0 else 0.0)
                logS[f] = -np.inf if tsum > 0 else logS[f]
                live[f] = False
                if not live.any():
                    break
        i = np.nonzero(live)[0]
        sub = model.take(state, i)
        val, Lam = mark_integral(model, sub, start[i], start[i] + span[i], weight_mask, T,
                                 points=max(points // 10, 32))
        acc[i] += np.exp(logS[i]) * val
        logS[i] -= Lam
        covered[i] += span[i]
        start[i] += span[i]
        span[i] *= 2
        live[i] = (logS[i] > math.log(tol)) & (covered[i] < max_span)
    return acc, logS


# ---------------------------------------------------------------------------
# Random instantiation and serialization


def random_hawkes(n_marks: int, rng: np.random.Generator, kind: str = "dense",
                  block: int = 5) -> HawkesExp:
    """Random exponential-kernel Hawkes parameters.

    dense: α ~ U[0.075, 0.2], β ~ U[0.4, 1.2], μ ~ U[0.1, 0.5].
    block: α ~ U[0.3, 0.8] within diagonal blocks of ``block`` marks, else 0.
    """
    K = n_marks
    mu = rng.uniform(0.1, 0.5, size=K)
    beta = rng.uniform(0.4, 1.2, size=(K, K))
    if kind == "dense":
        alpha = rng.uniform(0.075, 0.2, size=(K, K))
    elif kind == "block":
        alpha = rng.uniform(0.3, 0.8, size=(K, K))
        g = np.arange(K) // block
        alpha = np.where(g[:, None] == g[None, :], alpha, 0.0)
    else:
        raise ValueError(f"unknown Hawkes parameter law '{kind}'")
    return HawkesExp(mu, alpha, beta)


def random_self_correcting(n_marks: int, rng: np.random.Generator) -> SelfCorrecting:
    """δ ~ U[0.3, 0.8], η ~ U[0.1, 0.5]."""
    K = n_marks
    return SelfCorrecting(rng.uniform(0.1, 0.5, size=K), rng.uniform(0.3, 0.8, size=(K, K)))


def model_to_dict(model: MtppModel) -> dict:
    return {"schema": 1, **model.to_dict()}


def model_from_dict(doc: dict) -> MtppModel:
    fam = doc.get("family")
    allowed = {"hawkes": {"mu", "alpha", "beta"}, "self_correcting": {"eta", "delta"},
               "poisson": {"rates", "breakpoints"}}
    if fam not in allowed:
        raise ValueError(f"unknown model family '{fam}'")
    extra = set(doc) - allowed[fam] - {"schema", "family"}
    if extra:
        raise ValueError(f"unknown keys for {fam}: {sorted(extra)}")
    if fam == "hawkes":
        return HawkesExp(doc["mu"], doc["alpha"], doc["beta"])
    if fam == "self_correcting":
        return SelfCorrecting(doc["eta"], doc["delta"])
    return PoissonMtpp(doc["rates"], doc.get("breakpoints"))


def save_model(model: MtppModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> MtppModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def sequence_to_dict(seq: EventSequence) -> dict:
    return {"times": list(seq.times), "marks": list(seq.marks), "window_end": seq.window_end}


def sequence_from_dict(doc: dict) -> EventSequence:
    return EventSequence(doc.get("times", ()), doc.get("marks", ()), doc.get("window_end"))
