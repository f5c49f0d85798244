"""Coverage and tail-splitting beam search, the pruned proposal tree and the
hybrid (exact beams + importance-sampled remainder) estimator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..discrete_model import CategoricalModel
from ..estcore import EstimateSummary, as_stream, draw_chunked, mc_accumulate
from .estimators import DEFAULT_BUDGET, sample_rows
from .query import Query, QueryBlock

__all__ = [
    "BeamSet",
    "PrunedTree",
    "coverage_beam_search",
    "tail_splitting_beam_search",
    "split_point",
    "hybrid_estimate",
    "hybrid_variance_terms",
    "hybrid_variance_diagnostic",
]

DEFAULT_CAP = 10_000


@dataclass
class BeamSet:
    """Completed beams: ``(path, log p, log q)`` triples."""

    sequences: list
    coverage: float
    cap_hit: bool = False
    block: QueryBlock | None = None
    explored: dict = field(default_factory=dict, repr=False)

    @property
    def lower_bound(self) -> float:
        return float(sum(np.exp(lp) for _, lp, _ in self.sequences))

    def paths(self) -> set:
        return {p for p, _, _ in self.sequences}


def _expand(model, history, block, beams, k, explored):
    """All one-step extensions of ``beams`` within step ``k`` of ``block``."""
    V = model.vocab_size
    allowed = np.array(sorted(block.sets[k]))
    prefixes = [p for p, _, _ in beams]
    hist = np.array([list(history) + list(p) for p in prefixes], dtype=np.int64)
    if hist.ndim == 1:
        hist = hist.reshape(len(prefixes), -1)
    P = model.next_dist_batch(hist)
    cands = []
    for (path, lp, lq), row in zip(beams, P):
        explored[path] = row
        sub = row[allowed]
        s = sub.sum()
        if s <= 0:
            continue
        for v, pv in zip(allowed, sub):
            if pv <= 0:
                continue
            cands.append((path + (int(v),), lp + np.log(pv), lq + np.log(pv / s)))
    return cands


def _order(cands, key_index):
    # probability descending, then lexicographic path
    return sorted(cands, key=lambda c: (-c[key_index], c[0]))


def coverage_beam_search(model: CategoricalModel, block, alpha: float,
                         schedule: Sequence[float] | None = None,
                         cap: int = DEFAULT_CAP, history: Sequence[int] = ()) -> BeamSet:
    """Keep, at each step, the smallest proposal-probability prefix set whose
    cumulative proposal mass reaches ``alpha_k``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    block = block if isinstance(block, QueryBlock) else QueryBlock(block)
    K = len(block)
    if schedule is None:
        schedule = [alpha ** ((k + 1) / K) for k in range(K)]
    if len(schedule) != K:
        raise ValueError("schedule length must equal the block length")
    history = model.check_history(history)
    beams = [((), 0.0, 0.0)]
    explored = {}
    cap_hit = False
    for k in range(K):
        cands = _order(_expand(model, history, block, beams, k, explored), 2)
        kept, mass = [], 0.0
        for c in cands:
            if mass >= schedule[k]:
                break
            kept.append(c)
            mass += np.exp(c[2])
        if len(kept) > cap:
            kept = kept[:cap]
            cap_hit = True
        beams = kept
        if not beams:
            break
    cov = float(sum(np.exp(lq) for _, _, lq in beams))
    return BeamSet(beams, cov, cap_hit, block, explored)


def split_point(weights: Sequence[float], rtol: float = 1e-12) -> int:
    """Number of leading (descending) weights kept by the two-group split.

    Minimizes ``var(w[:b]) + var(w[b:])`` over ``b = 1..N`` with population
    variances (empty or singleton groups count 0); near-ties keep the
    largest ``b``.
    """
    w = np.asarray(weights, dtype=float)
    N = w.size
    if N <= 1:
        return N
    w = w / w.max() if w.max() > 0 else w
    c1, c2 = np.cumsum(w), np.cumsum(w * w)
    b = np.arange(1, N + 1)
    head = c2 / b - (c1 / b) ** 2
    tail_n = N - b
    t1, t2 = c1[-1] - c1, c2[-1] - c2
    with np.errstate(invalid="ignore", divide="ignore"):
        tail = np.where(tail_n > 0, t2 / np.maximum(tail_n, 1) - (t1 / np.maximum(tail_n, 1)) ** 2, 0.0)
    cost = np.maximum(head, 0) + np.maximum(tail, 0)
    best = cost.min()
    ok = np.nonzero(cost <= best + rtol * max(1.0, abs(best)) + 1e-15)[0]
    return int(ok.max()) + 1


def tail_splitting_beam_search(model: CategoricalModel, block, cap: int = DEFAULT_CAP,
                               history: Sequence[int] = ()) -> BeamSet:
    """Keep the high-mass group of a two-way split of candidate model
    probabilities at each step, truncated to ``cap``."""
    if cap < 1:
        raise ValueError("cap must be at least 1")
    block = block if isinstance(block, QueryBlock) else QueryBlock(block)
    history = model.check_history(history)
    beams = [((), 0.0, 0.0)]
    explored = {}
    cap_hit = False
    for k in range(len(block)):
        cands = _order(_expand(model, history, block, beams, k, explored), 1)
        if not cands:
            beams = []
            break
        lp = np.array([c[1] for c in cands])
        b = split_point(np.exp(lp - lp.max()))
        if b > cap:
            b = cap
            cap_hit = True
        beams = cands[:b]
    cov = float(sum(np.exp(lq) for _, _, lq in beams))
    return BeamSet(beams, cov, cap_hit, block, explored)


class PrunedTree:
    """Proposal tree conditioned to avoid the completed beams.

    Nodes are the explored prefixes.  ``qb[node]`` holds the renormalized
    edge weights ``q_B(v | prefix)``; ``child[node, v]`` is the child node id
    or -1 where sampling falls back to the plain proposal.
    """

    def __init__(self, model: CategoricalModel, beams: BeamSet):
        block = beams.block
        V = model.vocab_size
        K = len(block)
        masks = block.masks(V)
        done = beams.paths()
        prefixes = sorted(beams.explored, key=lambda p: (len(p), p))
        self.index = {p: i for i, p in enumerate(prefixes)}
        n = len(prefixes)
        self.K = K
        self.p = np.zeros((n, V))
        self.q = np.zeros((n, V))
        self.child = np.full((n, V), -1, dtype=np.int64)
        self.depth = np.array([len(p) for p in prefixes], dtype=np.int64)
        for i, pre in enumerate(prefixes):
            row = beams.explored[pre]
            self.p[i] = row
            sub = row * masks[len(pre)]
            s = sub.sum()
            if s > 0:
                self.q[i] = sub / s
            for v in range(V):
                j = self.index.get(pre + (v,))
                if j is not None:
                    self.child[i, v] = j
        # surviving mass r(u) = Q(X ∉ B | prefix u), computed deepest first
        self.r = np.zeros(n)
        rchild = np.ones((n, V))
        for i in sorted(range(n), key=lambda i: -self.depth[i]):
            pre = prefixes[i]
            if len(pre) == K - 1:
                for v in range(V):
                    if pre + (v,) in done:
                        rchild[i, v] = 0.0
            else:
                has = self.child[i] >= 0
                rchild[i, has] = self.r[self.child[i, has]]
            self.r[i] = float(np.dot(self.q[i], rchild[i]))
        self.qb = np.zeros((n, V))
        live = self.r > 0
        self.qb[live] = self.q[live] * rchild[live] / self.r[live, None]
        self.root = self.index.get((), None)

    @property
    def remaining(self) -> float:
        """Proposal mass outside the beams, ``1 - Q(B)``."""
        return 0.0 if self.root is None else float(self.r[self.root])

    def sample(self, model, masks, history, n, gen):
        """Draw ``n`` paths from ``q_B``; returns ``(paths, log p - log q_B)``."""
        hist = np.asarray(history, dtype=np.int64)
        hist = np.broadcast_to(hist, (n, hist.size)).copy()
        node = np.full(n, self.root, dtype=np.int64)
        logw = np.zeros(n)
        for k in range(self.K):
            u = gen.random(n)
            x = np.zeros(n, dtype=np.int64)
            on = node >= 0
            if on.any():
                idx = np.nonzero(on)[0]
                rows = node[idx]
                xs = sample_rows(self.qb[rows], u[idx])
                x[idx] = xs
                logw[idx] += np.log(self.p[rows, xs]) - np.log(self.qb[rows, xs])
                node[idx] = self.child[rows, xs]
            off = ~on
            if off.any():
                idx = np.nonzero(off)[0]
                P = model.next_dist_batch(hist[idx])
                R = P * masks[k]
                s = R.sum(axis=1)
                x[idx] = sample_rows(R, u[idx])
                with np.errstate(divide="ignore"):
                    logw[idx] += np.log(s)
            hist = np.concatenate([hist, x[:, None]], axis=1)
        return hist[:, -self.K:], logw


def _hybrid_block(model, block, n, cap, stream, history, workers):
    beams = tail_splitting_beam_search(model, block, cap, history)
    exact = beams.lower_bound
    if n == 0:
        return None, exact, beams
    tree = PrunedTree(model, beams)
    if tree.remaining <= 0:
        return np.zeros(n), exact, beams
    masks = block.masks(model.vocab_size)
    vals = draw_chunked(lambda m, g: np.exp(tree.sample(model, masks, history, m, g)[1]),
                        n, stream, workers=workers)
    return vals, exact, beams


def hybrid_estimate(model: CategoricalModel, query: Query, n: int, cap: int = DEFAULT_CAP,
                    rng=0, history: Sequence[int] = (), workers=None) -> EstimateSummary:
    """Exact beam mass plus an importance-sampled estimate of the rest."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    stream = as_stream(rng)
    history = model.check_history(history)
    exact_total = 0.0
    remainder = np.zeros(max(n, 1))
    cap_hit = 0.0
    for bi, block in enumerate(query.blocks):
        vals, exact, beams = _hybrid_block(model, block, n, cap, stream.child("hybrid", bi),
                                           history, workers)
        exact_total += exact
        cap_hit = max(cap_hit, float(beams.cap_hit))
        if vals is not None:
            remainder += vals
    if n == 0:
        return EstimateSummary(1, exact_total, 0.0, 0.0, "hybrid",
                               {"beam_mass": exact_total, "lower_bound_only": 1.0})
    s = mc_accumulate(remainder, "hybrid")
    return EstimateSummary(s.n, exact_total + s.mean, s.var, s.se, "hybrid",
                           {"beam_mass": exact_total, "cap_hit": cap_hit})


def _enumerate_block(model, block, history, budget):
    if block.size() * len(block) > budget:
        raise ValueError("enumeration intractable")
    masks = block.masks(model.vocab_size)
    rows = {}
    for path in block.paths():
        lp = lq = 0.0
        for k in range(len(path)):
            pre = tuple(path[:k])
            if pre not in rows:
                rows[pre] = model.next_dist(list(history) + list(pre))
            row = rows[pre]
            s = row[masks[k]].sum()
            with np.errstate(divide="ignore"):
                lp += np.log(row[path[k]])
                lq += np.log(row[path[k]] / s) if s > 0 else -np.inf
        yield path, np.exp(lp), np.exp(lq)


def hybrid_variance_terms(model, block, beam_paths, candidate, history=(),
                          budget: int = DEFAULT_BUDGET) -> dict:
    """Per-sample remainder variances before and after adding ``candidate``
    to the beam set, with both sides of the decision inequality.

    Expanding ``Var_B - Var_B'`` (divided by ``p(x̂)``) gives
    ``2 P(Q∖B') - S'/ρ(x̂) <= (1 - Q(B)) ρ(x̂) - p(x̂)`` where
    ``S' = Σ_{Q∖B'} p ρ`` and ``ρ = p / q``.
    """
    block = block if isinstance(block, QueryBlock) else QueryBlock(block)
    B = {tuple(p) for p in beam_paths}
    cand = tuple(candidate)
    if cand in B or not block.contains(cand) or len(cand) != len(block):
        raise ValueError("candidate must be a path of the block outside the beams")
    items = list(_enumerate_block(model, block, history, budget))
    QB = sum(q for x, p, q in items if x in B)
    p_hat, q_hat = next((p, q) for x, p, q in items if x == cand)

    def var_after(beamset, qmass):
        rem = 1.0 - qmass
        if rem <= 0:
            return 0.0
        second = sum(p * p / (q / rem) for x, p, q in items if x not in beamset and q > 0)
        first = sum(p for x, p, q in items if x not in beamset)
        return second - first * first

    B2 = B | {cand}
    v_before = var_after(B, QB)
    v_after = var_after(B2, QB + q_hat)
    P_rest = sum(p for x, p, q in items if x not in B2)
    out = {"var_before": v_before, "var_after": v_after, "delta": v_before - v_after,
           "p_candidate": p_hat}
    if p_hat > 0:
        rho_hat = p_hat / q_hat
        S = sum(p * (p / q) for x, p, q in items if x not in B2 and q > 0)
        out["lhs"] = 2 * P_rest - S / rho_hat
        out["rhs"] = (1 - QB) * rho_hat - p_hat
    return out


def hybrid_variance_diagnostic(model, block, beam_paths, candidate, history=(),
                               budget: int = DEFAULT_BUDGET) -> bool:
    """True when adding ``candidate`` to the beams does not raise the
    remainder variance."""
    t = hybrid_variance_terms(model, block, beam_paths, candidate, history, budget)
    if t["p_candidate"] == 0:
        return True
    return bool(t["lhs"] <= t["rhs"] + 1e-12)
