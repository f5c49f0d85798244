"""Inference under mark censoring: the censored intensity as a ratio of
importance-weighted averages over unobserved continuations, the resulting
sequence likelihood, the zeroed-intensity baseline and second-order
bias/variance diagnostics for ratio estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .estcore import Grid, as_stream, trapezoid
from .mtpp import EventSequence, MtppModel, Thinner

__all__ = [
    "CensorSchedule",
    "CensoredSampleBank",
    "CensoredIntensity",
    "build_bank",
    "censored_intensity",
    "censored_log_likelihood",
    "marginal_log_likelihood",
    "baseline_log_likelihood",
    "ratio_bias_variance",
    "DEFAULT_SAMPLES",
    "DEFAULT_POINTS",
]

DEFAULT_SAMPLES = 128
DEFAULT_POINTS = 1024


@dataclass(frozen=True)
class CensorSchedule:
    """Censored mark sets ``censored[j]`` on ``(edges[j], edges[j+1]]``."""

    edges: tuple
    censored: tuple

    def __init__(self, edges: Sequence[float], censored: Sequence):
        e = tuple(float(x) for x in edges)
        c = tuple(frozenset(int(k) for k in s) for s in censored)
        if len(e) < 2 or len(c) != len(e) - 1:
            raise ValueError("need one censored set between consecutive edges")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError("edges must be strictly increasing")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "censored", c)

    @classmethod
    def constant(cls, censored, start: float, end: float) -> "CensorSchedule":
        return cls((start, end), [censored])

    @property
    def start(self) -> float:
        return self.edges[0]

    @property
    def end(self) -> float:
        return self.edges[-1]

    def censored_masks(self, K: int) -> np.ndarray:
        out = np.zeros((len(self.censored), K), dtype=bool)
        for j, s in enumerate(self.censored):
            for k in s:
                if not 0 <= k < K:
                    raise ValueError(f"mark {k} outside 0..{K - 1}")
                out[j, k] = True
        return out

    def piece_after(self, t) -> np.ndarray:
        """Piece covering the open interval just after ``t``."""
        return np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.censored) - 1)

    def piece_at(self, t) -> np.ndarray:
        """Piece covering ``t`` itself (intervals are closed on the right)."""
        return np.clip(np.searchsorted(self.edges, t, side="left") - 1, 0, len(self.censored) - 1)

    def is_empty(self) -> bool:
        return all(not s for s in self.censored)


def _check_observed(schedule: CensorSchedule, K: int, observed: EventSequence):
    cm = schedule.censored_masks(K)
    t = np.asarray(observed.times, dtype=float)
    m = np.asarray(observed.marks, dtype=np.int64)
    if t.size:
        if t[0] <= schedule.start or t[-1] > schedule.end:
            raise ValueError("observed events must lie inside the censoring window")
        if np.any(m < 0) or np.any(m >= K):
            raise ValueError("observed mark outside the mark space")
        if np.any(cm[schedule.piece_at(t), m]):
            raise ValueError("observed event carries a censored mark")
    return cm


@dataclass
class CensoredSampleBank:
    """Per-trajectory log-weights and intensities on an evaluation grid."""

    grid: np.ndarray
    logw: np.ndarray      # (M, G)
    rates: np.ndarray     # (M, G, K), left limits
    observed_mask: np.ndarray  # (G, K)

    @property
    def size(self) -> int:
        return self.logw.shape[0]


def _eval_grid(schedule, observed, t_grid):
    g = np.asarray(t_grid.array() if isinstance(t_grid, Grid) else t_grid, dtype=float)
    Grid(g)
    if g[0] < schedule.start or g[-1] > schedule.end:
        raise ValueError("grid must lie inside the censoring window")
    return g


def build_bank(model: MtppModel, schedule: CensorSchedule, observed: EventSequence, t_grid,
               M: int = DEFAULT_SAMPLES, rng=0, event_weights: bool = True,
               label: str = "bank", right_limits: bool = False) -> CensoredSampleBank:
    """Sample ``M`` censored continuations interleaved with the observed
    events and record log-weights and left-limit intensities on the grid.

    The log-weight is ``-∫ λ_O`` plus, when ``event_weights`` is set, the
    log intensities at the observed events, which makes the weight the full
    likelihood ratio of the observed events given the sampled censored ones.
    With ``right_limits`` an extra column follows every observed event time,
    holding the intensity just after the event; the bank grid then repeats
    those times (left limit first).
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    K = model.n_marks
    cm = _check_observed(schedule, K, observed)
    grid = _eval_grid(schedule, observed, t_grid)
    obs_t = np.asarray(observed.times, dtype=float)
    obs_m = np.asarray(observed.marks, dtype=np.int64)
    edges = np.asarray(schedule.edges[1:-1])
    post = obs_t if right_limits else np.zeros(0)
    # grid points come before an injected event at the same time, post-event
    # columns after it
    times = np.concatenate([grid, obs_t, edges, post])
    kinds = np.concatenate([np.zeros(grid.size), np.ones(obs_t.size), np.full(edges.size, 2),
                            np.full(post.size, 3)])
    inject = np.concatenate([np.full(grid.size, -1), obs_m, np.full(edges.size, -1),
                             np.full(post.size, -1)])
    order = np.lexsort((kinds, times))
    stops, inject, kinds = times[order], inject[order], kinds[order]
    is_grid = (kinds == 0) | (kinds == 3)
    col_t = stops[is_grid]
    grid_pos = np.full(stops.size, -1)
    grid_pos[is_grid] = np.arange(col_t.size)

    rates = np.zeros((M, col_t.size, K))
    sched_edges = np.asarray(schedule.edges)

    def forbid(t, counts):
        return ~cm[np.clip(np.searchsorted(sched_edges, t, side="right") - 1, 0, len(cm) - 1)]

    def on_stop(idx, j, sub):
        if is_grid[j]:
            rates[idx, grid_pos[j]] = model.rates(sub, np.full(idx.size, stops[j]))

    gen = as_stream(rng).child(label).generator()
    eng = Thinner(model, forbid=forbid, stops=stops, inject=inject, checkpoint_mask=is_grid,
                  on_stop=on_stop, event_weights=event_weights, record_events=False)
    res = eng.run(M, schedule.end, gen, t_start=schedule.start)
    is_post = kinds[is_grid] == 3
    piece = np.where(is_post, schedule.piece_after(col_t), schedule.piece_at(col_t))
    return CensoredSampleBank(col_t, res.checkpoints, rates, ~cm[piece])


@dataclass
class CensoredIntensity:
    grid: np.ndarray
    values: np.ndarray      # (G, K); zero for marks censored at t
    log_norm: np.ndarray    # log of the mean weight per grid point
    max_log_weight: np.ndarray


def _log_mean(logw):
    return logsumexp(logw, axis=0) - math.log(logw.shape[0])


def _ratio(num: CensoredSampleBank, den: CensoredSampleBank) -> CensoredIntensity:
    lw_den = den.logw
    if np.any(np.all(np.isneginf(lw_den), axis=0)):
        raise FloatingPointError(
            f"all importance weights vanished (max log-weight {float(np.max(lw_den)):.3g})")
    log_den = _log_mean(lw_den)
    with np.errstate(divide="ignore"):
        log_num = logsumexp(num.logw[:, :, None] + np.log(num.rates), axis=0) - math.log(num.size)
    vals = np.exp(log_num - log_den[:, None])
    # a weighted average of a constant column is that constant
    flat = np.all(num.rates == num.rates[:1], axis=0)
    if num is den:
        vals = np.where(flat, num.rates[0], vals)
    vals = np.where(num.observed_mask, vals, 0.0)
    return CensoredIntensity(num.grid, vals, log_den, lw_den.max(axis=0))


def censored_intensity(model: MtppModel, schedule: CensorSchedule, observed: EventSequence,
                       t_grid, M: int = DEFAULT_SAMPLES, rng=0, reuse: bool = True,
                       event_weights: bool = True, right_limits: bool = False
                       ) -> CensoredIntensity:
    """Intensity of the observed marks after marginalizing censored events.

    ``reuse`` shares one bank between numerator and denominator; otherwise
    two independent banks are drawn.  ``right_limits`` is passed to
    :func:`build_bank`.
    """
    stream = as_stream(rng)
    num = build_bank(model, schedule, observed, t_grid, M, stream, event_weights, "bank",
                     right_limits)
    den = num if reuse else build_bank(model, schedule, observed, t_grid, M, stream,
                                       event_weights, "bank-den", right_limits)
    return _ratio(num, den)


def _ll_grid(schedule, observed, points):
    g = np.linspace(schedule.start, schedule.end, points)
    return np.union1d(g, np.asarray(observed.times, dtype=float))


def censored_log_likelihood(model: MtppModel, schedule: CensorSchedule, observed: EventSequence,
                            tau: float | None = None, M: int = DEFAULT_SAMPLES, rng=0,
                            reuse: bool = True, points: int = DEFAULT_POINTS,
                            event_weights: bool = True) -> float:
    """``Σ log λ̲(t_i) - ∫ λ̲_O`` with the censored intensity evaluated on a
    uniform grid merged with the observed event times.  Log terms use the
    left limit at each event; the trapezoid also sees the right limit so the
    jump at an event does not leak into the next grid cell."""
    if tau is not None and abs(tau - schedule.end) > 1e-12:
        raise ValueError("tau must equal the end of the censoring schedule")
    grid = _ll_grid(schedule, observed, points)
    ci = censored_intensity(model, schedule, observed, grid, M, rng, reuse, event_weights,
                            right_limits=True)
    total = ci.values.sum(axis=1)
    integral = trapezoid(total, ci.grid)
    pos = np.searchsorted(ci.grid, np.asarray(observed.times, dtype=float), side="left")
    lam = ci.values[pos, np.asarray(observed.marks, dtype=np.int64)]
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(lam)) - integral)


def marginal_log_likelihood(model: MtppModel, schedule: CensorSchedule, observed: EventSequence,
                            M: int = DEFAULT_SAMPLES, rng=0) -> float:
    """Log of the mean full weight at the window end, a direct estimate of
    the observed-sequence likelihood (used as a cross-check)."""
    bank = build_bank(model, schedule, observed, [schedule.end], M, rng, True, "marginal")
    return float(_log_mean(bank.logw)[-1])


def baseline_log_likelihood(model: MtppModel, schedule: CensorSchedule, observed: EventSequence,
                            tau: float | None = None) -> float:
    """Likelihood of the observed events alone under the base model with the
    censored marks' intensities set to zero."""
    K = model.n_marks
    cm = _check_observed(schedule, K, observed)
    end = schedule.end if tau is None else float(tau)
    state = model.new_state(1)
    t_prev = schedule.start
    ll = 0.0
    edges = [e for e in schedule.edges if schedule.start < e < end]

    def integrate(a, b):
        cuts = [a] + [e for e in edges if a < e < b] + [b]
        s = 0.0
        for lo, hi in zip(cuts, cuts[1:]):
            comp = model.compensator(state, np.array([lo]), np.array([hi]))[0]
            s += float(comp[~cm[schedule.piece_after(lo)]].sum())
        return s

    for t, m in zip(observed.times, observed.marks):
        ll -= integrate(t_prev, t)
        lam = float(model.rates(state, np.array([t]))[0, m])
        ll += math.log(lam) if lam > 0 else -math.inf
        model.add_events(state, np.array([0]), np.array([t]), np.array([m]))
        t_prev = t
    ll -= integrate(t_prev, end)
    return ll


def ratio_bias_variance(fg_samples, g_samples, shared: bool) -> dict:
    """Second-order bias and variance of ``mean(fg) / mean(g)``.

    With ``shared`` the two arrays are paired draws of the same trajectories
    and the covariance terms enter; otherwise they are independent.
    """
    fg = np.asarray(fg_samples, dtype=float).ravel()
    g = np.asarray(g_samples, dtype=float).ravel()
    if shared and fg.size != g.size:
        raise ValueError("shared samples must be paired")
    mu_g = float(g.mean())
    if mu_g <= 0:
        raise ValueError("mean of g must be positive")
    mu_fg = float(fg.mean())
    M, Mp = fg.size, g.size
    var_fg = float(fg.var(ddof=1)) if M > 1 else 0.0
    var_g = float(g.var(ddof=1)) if Mp > 1 else 0.0
    ratio = mu_fg / mu_g
    if shared:
        cov = float(np.cov(fg, g, ddof=1)[0, 1]) if M > 1 else 0.0
        bias = -cov / (M * mu_g ** 2) + var_g * mu_fg / (M * mu_g ** 3)
        var = (var_fg / (M * mu_g ** 2) - 2 * mu_fg * cov / (M * mu_g ** 3)
               + var_g * mu_fg ** 2 / (M * mu_g ** 4))
    else:
        cov = 0.0
        bias = var_g * mu_fg / (Mp * mu_g ** 3)
        var = var_fg / (M * mu_g ** 2) + var_g * mu_fg ** 2 / (Mp * mu_g ** 4)
    return {"ratio": ratio, "bias_2nd_order": bias, "var_2nd_order": var,
            "bias_corrected_mean": ratio - bias, "cov_fg_g": cov}
