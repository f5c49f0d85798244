"""Categorical autoregressive models over a finite vocabulary, homogeneous
Markov models of any order, and the exact Markov query machinery.

Symbols are the integers ``0..V-1``.  A Markov model of order ``m`` keeps one
extra context symbol, ``V``, used to pad histories shorter than ``m``.
"""

from __future__ import annotations

import json
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CategoricalModel",
    "MarkovModel",
    "next_dist",
    "restricted_tensor_product",
    "markov_query_exact",
    "steady_state",
    "markov_hit_analytic",
    "markov_a_before_b_analytic",
    "markov_a_before_b_exact",
    "random_markov_model",
    "load_markov_model",
    "save_markov_model",
]

ROW_TOL = 1e-9
COND_LIMIT = 1e12


class CategoricalModel:
    """Interface: ``next_dist(history) -> probability vector of length V``."""

    vocab_size: int

    def next_dist(self, history: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def next_dist_batch(self, histories: np.ndarray) -> np.ndarray:
        """Rows of ``next_dist`` for each row of an ``(n, k)`` history array."""
        histories = np.asarray(histories, dtype=np.int64)
        if histories.shape[0] == 0:
            return np.zeros((0, self.vocab_size))
        return np.stack([self.next_dist(h) for h in histories])

    def check_history(self, history: Iterable[int]) -> list[int]:
        h = [int(x) for x in history]
        for x in h:
            if not 0 <= x < self.vocab_size:
                raise ValueError(f"symbol {x} outside vocabulary of size {self.vocab_size}")
        return h


class MarkovModel(CategoricalModel):
    """Homogeneous order-``m`` Markov model.

    ``table`` has shape ``(V+1,)*m + (V,)``; index ``V`` along a context axis
    is the begin-of-sequence pad.  A ``(V**m, V)`` table without pad rows is
    also accepted; pad contexts then get ``initial`` (uniform if omitted).
    """

    def __init__(self, order: int, table, initial=None):
        if order < 1:
            raise ValueError("order must be positive")
        table = np.asarray(table, dtype=float)
        V = table.shape[-1]
        if V < 2:
            raise ValueError("vocabulary needs at least two symbols")
        full_shape = (V + 1,) * order + (V,)
        if table.shape == full_shape:
            full = table.copy()
        elif table.reshape(-1, V).shape[0] == V ** order:
            full = np.empty(full_shape)
            init = np.full(V, 1.0 / V) if initial is None else np.asarray(initial, float)
            full[...] = init
            full[(slice(0, V),) * order] = table.reshape((V,) * order + (V,))
        else:
            raise ValueError(f"table shape {table.shape} does not fit order {order}")
        rows = full.reshape(-1, V)
        if np.any(rows < 0) or np.any(rows > 1 + ROW_TOL):
            raise ValueError("transition probabilities must lie in [0, 1]")
        bad = np.abs(rows.sum(axis=1) - 1.0) > ROW_TOL
        if np.any(bad):
            raise ValueError(f"rows do not sum to 1: first bad row {int(np.argmax(bad))}")
        self.order = order
        self.vocab_size = V
        self.table = full
        self.table.setflags(write=False)
        self.rows = full.reshape(-1, V)
        self.n_contexts = (V + 1) ** order
        # next_context[c, v]: context reached from c after emitting v
        c = np.arange(self.n_contexts)
        drop = c % ((V + 1) ** (order - 1))
        self.next_context = drop[:, None] * (V + 1) + np.arange(V)[None, :]

    @property
    def pad(self) -> int:
        return self.vocab_size

    def context_index(self, history: Sequence[int]) -> int:
        h = self.check_history(history)
        ctx = [self.pad] * max(0, self.order - len(h)) + h[-self.order:]
        idx = 0
        for s in ctx[-self.order:]:
            idx = idx * (self.vocab_size + 1) + s
        return idx

    def next_dist(self, history: Sequence[int]) -> np.ndarray:
        return self.rows[self.context_index(history)].copy()

    def context_batch(self, histories: np.ndarray) -> np.ndarray:
        histories = np.asarray(histories, dtype=np.int64)
        n, k = histories.shape
        idx = np.zeros(n, dtype=np.int64)
        for j in range(self.order):
            pos = k - self.order + j
            col = histories[:, pos] if pos >= 0 else np.full(n, self.pad)
            idx = idx * (self.vocab_size + 1) + col
        return idx

    def next_dist_batch(self, histories: np.ndarray) -> np.ndarray:
        return self.rows[self.context_batch(histories)]

    def first_order_matrix(self) -> np.ndarray:
        if self.order != 1:
            raise ValueError("analytic formulas need a first-order model")
        return np.asarray(self.table[: self.vocab_size])

    def __eq__(self, other):
        return (isinstance(other, MarkovModel) and self.order == other.order
                and np.array_equal(self.table, other.table))

    __hash__ = None


def next_dist(model: CategoricalModel, history: Sequence[int]) -> np.ndarray:
    return model.next_dist(model.check_history(history))


def _mask(allowed, V: int) -> np.ndarray:
    m = np.zeros(V, dtype=bool)
    idx = list(allowed)
    if not idx:
        raise ValueError("restriction set is empty")
    for v in idx:
        if not 0 <= int(v) < V:
            raise ValueError(f"symbol {v} outside vocabulary")
        m[int(v)] = True
    return m


def restricted_tensor_product(left, model: MarkovModel, allowed, renormalize: bool = True) -> np.ndarray:
    """One step of ``left ⊗ Π_V``.

    ``left`` has one row per context of ``model`` and one column per symbol;
    ``out[c, v] = Σ_u left[c, u] · R[shift(c, u), v]`` where ``R`` is the
    transition table restricted to ``allowed`` (rows renormalized unless
    ``renormalize`` is false; rows with no allowed mass stay zero).

    Chaining this product is exact for first-order models.  For higher orders
    the window of the last ``m`` symbols must be carried instead; see
    ``markov_query_exact``.
    """
    V = model.vocab_size
    keep = _mask(allowed, V)
    R = model.rows * keep[None, :]
    if renormalize:
        s = R.sum(axis=1, keepdims=True)
        R = np.divide(R, s, out=np.zeros_like(R), where=s > 0)
    left = np.asarray(left, dtype=float)
    if left.shape != (model.n_contexts, V):
        raise ValueError(f"left factor must have shape {(model.n_contexts, V)}")
    out = np.zeros_like(left)
    for u in range(V):
        out += left[:, [u]] * R[model.next_context[:, u]]
    return out


def _blocks_of(query) -> list:
    blocks = getattr(query, "blocks", None)
    if blocks is None:
        return [query]
    return list(blocks)


def _block_masks(block, V: int) -> np.ndarray:
    sets = getattr(block, "sets", block)
    return np.stack([_mask(s, V) for s in sets])


def markov_query_exact(model: MarkovModel, query, history: Sequence[int] = ()) -> float:
    """Exact ``P(X_{1:K} ∈ Q | history)`` by a forward pass over contexts.

    ``query`` may be a single block (a list of allowed sets) or an object with
    ``blocks``; blocks are summed.
    """
    total = 0.0
    start = model.context_index(history)
    for block in _blocks_of(query):
        masks = _block_masks(block, model.vocab_size)
        alpha = np.zeros(model.n_contexts)
        alpha[start] = 1.0
        for keep in masks:
            flow = alpha[:, None] * model.rows[:, keep]
            alpha = np.bincount(model.next_context[:, keep].ravel(), weights=flow.ravel(),
                                minlength=model.n_contexts)
        total += float(alpha.sum())
    return total


def steady_state(P) -> np.ndarray:
    """Stationary vector of a row-stochastic matrix by a direct linear solve."""
    P = np.asarray(P, dtype=float)
    V = P.shape[0]
    A = P.T - np.eye(V)
    A[-1, :] = 1.0
    b = np.zeros(V)
    b[-1] = 1.0
    if not np.isfinite(np.linalg.cond(A)) or np.linalg.cond(A) > COND_LIMIT:
        raise ValueError("steady state undefined")
    pi = np.linalg.solve(A, b)
    if np.any(pi < -1e-12):
        raise ValueError("steady state undefined")
    return np.clip(pi, 0.0, None)


def markov_hit_analytic(model: MarkovModel, a: int, x0: int, k: int) -> float:
    """First-hit probability at step ``k`` via the lumped complement state."""
    P = model.first_order_matrix()
    if k < 1:
        raise ValueError("k must be at least 1")
    if k == 1:
        return float(P[x0, a])
    pi = steady_state(P)
    pi_phi = 1.0 - pi[a]
    others = np.arange(P.shape[0]) != a
    phi_to_a = float(np.dot(pi[others], P[others, a]) / pi_phi) if pi_phi > 0 else 0.0
    x0_to_phi = 1.0 - P[x0, a]
    return float(x0_to_phi * phi_to_a * (1.0 - phi_to_a) ** (k - 2))


def markov_a_before_b_analytic(model: MarkovModel, a: int, b: int, x0: int) -> tuple[float, float]:
    """``(P(a before b), P(b before a))`` from the lumped complement class."""
    if a == b:
        raise ValueError("a and b must differ")
    P = model.first_order_matrix()
    pi = steady_state(P)
    rest = np.ones(P.shape[0], dtype=bool)
    rest[[a, b]] = False
    w = pi[rest]
    mass = w.sum()
    to_a = float(np.dot(w, P[rest, a]) / mass) if mass > 0 else 0.0
    to_b = float(np.dot(w, P[rest, b]) / mass) if mass > 0 else 0.0
    x0_rest = 1.0 - P[x0, a] - P[x0, b]
    if to_a + to_b == 0:
        if x0_rest > 0:
            raise ValueError("neither a nor b reachable from the complement class")
        return float(P[x0, a]), float(P[x0, b])
    share = to_a / (to_a + to_b)
    p_a = float(P[x0, a] + x0_rest * share)
    p_b = float(P[x0, b] + x0_rest * (1.0 - share))
    return p_a, p_b


def markov_a_before_b_exact(model: MarkovModel, a: int, b: int, x0: int) -> float:
    """Absorption probability of ``a`` before ``b`` from context ``x0``."""
    P = model.first_order_matrix()
    V = P.shape[0]
    rest = [i for i in range(V) if i not in (a, b)]
    # h = P[:, a] + P[:, rest] h[rest]
    if rest:
        M = np.eye(len(rest)) - P[np.ix_(rest, rest)]
        h_rest = np.linalg.solve(M, P[rest, a])
    else:
        h_rest = np.zeros(0)
    return float(P[x0, a] + P[x0, rest] @ h_rest)


def random_markov_model(V: int, order: int, rng: np.random.Generator,
                        concentration: float = 1.0) -> MarkovModel:
    """Rows drawn from a symmetric Dirichlet, pad rows included."""
    rows = rng.dirichlet(np.full(V, concentration), size=(V + 1) ** order)
    return MarkovModel(order, rows.reshape((V + 1,) * order + (V,)))


def save_markov_model(model: MarkovModel, path) -> None:
    doc = {
        "schema": 1,
        "family": "markov",
        "order": model.order,
        "vocab_size": model.vocab_size,
        "table": model.rows.ravel().tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def markov_from_dict(doc: dict) -> MarkovModel:
    for key in ("order", "vocab_size", "table"):
        if key not in doc:
            raise ValueError(f"markov model file missing field '{key}'")
    V = int(doc["vocab_size"])
    order = int(doc["order"])
    flat = np.asarray(doc["table"], dtype=float)
    if flat.size == (V + 1) ** order * V:
        return MarkovModel(order, flat.reshape((V + 1,) * order + (V,)))
    if flat.size == V ** order * V:
        return MarkovModel(order, flat.reshape(V ** order, V), doc.get("initial"))
    raise ValueError("markov model field 'table' has the wrong length")


def load_markov_model(path) -> MarkovModel:
    with open(path) as fh:
        return markov_from_dict(json.load(fh))
