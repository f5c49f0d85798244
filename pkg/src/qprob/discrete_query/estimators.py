"""Exact enumeration, naive Monte Carlo and restricted-proposal importance
sampling for discrete sequence queries."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..discrete_model import CategoricalModel
from ..estcore import (Accumulator, EstimateSummary, as_stream, draw_chunked,
                       mc_accumulate, sample_rows)
from .query import Query, QueryBlock, build_query

__all__ = [
    "exact_enumerate",
    "proposal_next_dist",
    "importance_samples",
    "importance_estimate",
    "naive_samples",
    "naive_estimate",
    "surrogate_ground_truth",
    "a_before_b_bounds",
    "sample_rows",
]

DEFAULT_BUDGET = 10 ** 7


def _history(history, n):
    h = np.asarray(list(history), dtype=np.int64)
    return np.broadcast_to(h, (n, h.size)).copy()


def exact_enumerate(model: CategoricalModel, query: Query, history: Sequence[int] = (),
                    budget: int = DEFAULT_BUDGET) -> float:
    """Sum of path probabilities over every path of every block."""
    cost = query.enumeration_cost()
    if cost > budget:
        raise ValueError(f"enumeration intractable: {cost} path-steps exceeds budget {budget}")
    h0 = model.check_history(history)
    total = 0.0
    for block in query.blocks:
        paths = _history(h0, 1)
        logp = np.zeros(1)
        for allowed in block.sets:
            syms = np.array(sorted(allowed))
            P = model.next_dist_batch(paths)[:, syms]
            with np.errstate(divide="ignore"):
                lp = (logp[:, None] + np.log(P)).ravel()
            paths = np.concatenate([np.repeat(paths, syms.size, axis=0),
                                    np.tile(syms, paths.shape[0])[:, None]], axis=1)
            keep = np.isfinite(lp)
            paths, logp = paths[keep], lp[keep]
            if paths.shape[0] == 0:
                break
        total += float(np.exp(logp).sum())
    return total


def proposal_next_dist(model: CategoricalModel, allowed, history: Sequence[int]):
    """``(q over sorted(allowed), s)`` with ``q ∝ p·1(allowed)`` and ``s`` the
    model mass on ``allowed``.  ``q`` is all zero when ``s`` is 0."""
    p = model.next_dist(model.check_history(history))
    syms = sorted(int(v) for v in allowed)
    if not syms:
        raise ValueError("proposal support empty")
    sub = p[syms]
    s = float(sub.sum())
    if s <= 0:
        return np.zeros(len(syms)), 0.0
    return sub / s, s


def _prefix_family(blocks) -> bool:
    longest = max(blocks, key=len)
    return all(b.sets[: len(b) - 1] == longest.sets[: len(b) - 1] for b in blocks)


def _is_family(model, blocks, history, n, gen) -> np.ndarray:
    """IS values for blocks sharing the longest block's prefix sets."""
    V = model.vocab_size
    longest = max(blocks, key=len)
    masks = longest.masks(V)
    finals = {}
    for b in blocks:
        finals.setdefault(len(b) - 1, []).append(b.masks(V)[-1])
    hist = _history(history, n)
    logw = np.zeros(n)
    value = np.zeros(n)
    for k in range(len(longest)):
        P = model.next_dist_batch(hist)
        for fm in finals.get(k, []):
            with np.errstate(divide="ignore"):
                value += np.exp(logw + np.log(P[:, fm].sum(axis=1)))
        if k == len(longest) - 1:
            break
        R = P * masks[k]
        s = R.sum(axis=1)
        x = sample_rows(R, gen.random(n))
        with np.errstate(divide="ignore"):
            logw = logw + np.log(s)
        hist = np.concatenate([hist, x[:, None]], axis=1)
    return value


def importance_samples(model: CategoricalModel, query: Query, n: int, rng,
                       history: Sequence[int] = (), workers=None) -> np.ndarray:
    """Per-sample IS values (summed over blocks)."""
    stream = as_stream(rng)
    h0 = model.check_history(history)
    blocks = list(query.blocks)
    groups = [blocks] if _prefix_family(blocks) else [[b] for b in blocks]
    total = np.zeros(n)
    for gi, group in enumerate(groups):
        total += draw_chunked(lambda m, g, grp=group: _is_family(model, grp, h0, m, g),
                              n, stream.child("is", gi), workers=workers)
    return total


def importance_estimate(model: CategoricalModel, query: Query, n: int, rng,
                        history: Sequence[int] = (), workers=None) -> EstimateSummary:
    vals = importance_samples(model, query, n, rng, history, workers)
    return mc_accumulate(vals, "IS")


def _naive_chunk(model, query, history, n, gen) -> np.ndarray:
    hist = _history(history, n)
    for _ in range(query.max_len):
        P = model.next_dist_batch(hist)
        x = sample_rows(P, gen.random(n))
        hist = np.concatenate([hist, x[:, None]], axis=1)
    seqs = hist[:, len(history):]
    V = query.vocab_size
    hit = np.zeros(n, dtype=bool)
    for b in query.blocks:
        m = b.masks(V)
        ok = np.ones(n, dtype=bool)
        for k in range(len(b)):
            ok &= m[k, seqs[:, k]]
        hit |= ok
    return hit.astype(float)


def naive_samples(model, query, n, rng, history=(), workers=None) -> np.ndarray:
    h0 = model.check_history(history)
    return draw_chunked(lambda m, g: _naive_chunk(model, query, h0, m, g), n,
                        as_stream(rng).child("naive"), workers=workers)


def naive_estimate(model: CategoricalModel, query: Query, n: int, rng,
                   history: Sequence[int] = (), workers=None) -> EstimateSummary:
    return mc_accumulate(naive_samples(model, query, n, rng, history, workers), "naive")


def surrogate_ground_truth(draw: Callable[[int, np.random.Generator], np.ndarray],
                           rng, tolerance: float = 1e-7, n_low: int = 10_000,
                           n_high: int = 100_000, step: int = 1_000,
                           method: str = "surrogate") -> EstimateSummary:
    """Sample until the variance of the running mean drops below ``tolerance``.

    ``draw(m, generator)`` returns ``m`` per-sample estimator values.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if n_low > n_high:
        raise ValueError("n_low must not exceed n_high")
    stream = as_stream(rng)
    acc = Accumulator()
    acc.add_batch(draw(n_low, stream.child("surrogate", 0).generator()))
    batch = 1
    while True:
        s = acc.summary()
        met = s.n > 1 and s.var / s.n < tolerance
        if met or acc.n >= n_high:
            return s.with_method(method, tolerance_met=float(met))
        m = min(step, n_high - acc.n)
        acc.add_batch(draw(m, stream.child("surrogate", batch).generator()))
        batch += 1


def a_before_b_bounds(model: CategoricalModel, A, B, K: int, history: Sequence[int] = (),
                      estimator=exact_enumerate, **kw):
    """Truncated A-before-B: ``(lower, upper)`` where ``upper`` is one minus
    the truncated B-before-A value."""
    V = model.vocab_size
    qa = build_query("Q4", V, A=A, B=B, K=K)
    qb = build_query("Q4", V, A=B, B=A, K=K)
    pa = estimator(model, qa, history=history, **kw)
    pb = estimator(model, qb, history=history, **kw)
    ma = pa.mean if isinstance(pa, EstimateSummary) else pa
    mb = pb.mean if isinstance(pb, EstimateSummary) else pb
    return float(ma), float(1.0 - mb)
