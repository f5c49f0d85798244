"""Queries as disjoint unions of restricted-vocabulary product blocks."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = ["QueryBlock", "Query", "build_query", "query_from_dict", "query_to_dict"]


@dataclass(frozen=True)
class QueryBlock:
    """``V_1 × … × V_K`` as a tuple of frozensets."""

    sets: tuple

    def __init__(self, sets: Iterable[Iterable[int]]):
        fs = tuple(frozenset(int(v) for v in s) for s in sets)
        if not fs:
            raise ValueError("a block needs at least one step")
        if any(not s for s in fs):
            raise ValueError("every step set must be nonempty")
        object.__setattr__(self, "sets", fs)

    def __len__(self):
        return len(self.sets)

    def masks(self, V: int) -> np.ndarray:
        m = np.zeros((len(self.sets), V), dtype=bool)
        for k, s in enumerate(self.sets):
            m[k, sorted(s)] = True
        return m

    def size(self) -> int:
        return math.prod(len(s) for s in self.sets)

    def contains(self, seq: Sequence[int]) -> bool:
        return len(seq) >= len(self.sets) and all(x in s for x, s in zip(seq, self.sets))

    def paths(self):
        return itertools.product(*(sorted(s) for s in self.sets))


def _disjoint(a: QueryBlock, b: QueryBlock) -> bool:
    # Events {X_{1:|a|} ∈ a} and {X_{1:|b|} ∈ b} are disjoint iff some shared
    # step has disjoint sets.
    return any(not (sa & sb) for sa, sb in zip(a.sets, b.sets))


@dataclass(frozen=True)
class Query:
    blocks: tuple
    vocab_size: int

    def __init__(self, blocks: Iterable, vocab_size: int, check: bool = True):
        bl = tuple(b if isinstance(b, QueryBlock) else QueryBlock(b) for b in blocks)
        if not bl:
            raise ValueError("a query needs at least one block")
        for b in bl:
            for s in b.sets:
                if min(s) < 0 or max(s) >= vocab_size:
                    raise ValueError("query symbol outside vocabulary")
        if check:
            for i, j in itertools.combinations(range(len(bl)), 2):
                if not _disjoint(bl[i], bl[j]):
                    raise ValueError(f"blocks {i} and {j} overlap")
        object.__setattr__(self, "blocks", bl)
        object.__setattr__(self, "vocab_size", int(vocab_size))

    @property
    def max_len(self) -> int:
        return max(len(b) for b in self.blocks)

    def contains(self, seq: Sequence[int]) -> bool:
        return any(b.contains(seq) for b in self.blocks)

    def enumeration_cost(self) -> int:
        """Path-steps needed to enumerate every block."""
        return sum(b.size() * len(b) for b in self.blocks)


def _set(x, name):
    if isinstance(x, (int, np.integer)):
        return frozenset([int(x)])
    s = frozenset(int(v) for v in x)
    if not s:
        raise ValueError(f"{name} must be nonempty")
    return s


def build_query(kind: str, vocab_size: int, **params) -> Query:
    """Build one of the named query families.

    Q1 ``x1``: first symbol equals x1.  Q2 ``x, K``: symbol at step K.
    Q3 ``A, K``: first visit to A at step K.  Q4 ``A, B, K``: A visited
    before B within K steps.  Q5 ``A, n, K``: exactly n visits to A in K
    steps.
    """
    V = int(vocab_size)
    X = frozenset(range(V))
    kind = kind.upper()
    if kind == "Q1":
        return Query([[_set(params["x1"], "x1")]], V)
    K = int(params["K"])
    if K < 1:
        raise ValueError("K must be at least 1")
    if kind == "Q2":
        return Query([[X] * (K - 1) + [_set(params["x"], "x")]], V)
    if kind == "Q3":
        A = _set(params["A"], "A")
        if A == X and K > 1:
            raise ValueError("A covers the vocabulary, so only K=1 is possible")
        rest = X - A
        return Query([[rest] * (K - 1) + [A]], V)
    if kind == "Q4":
        A, B = _set(params["A"], "A"), _set(params["B"], "B")
        if A & B:
            raise ValueError("A and B must be disjoint")
        C = X - A - B
        blocks = [[C] * (i - 1) + [A] for i in range(1, K + 1) if i == 1 or C]
        return Query(blocks, V)
    if kind == "Q5":
        A = _set(params["A"], "A")
        n = int(params["n"])
        if n > K or n < 0:
            raise ValueError("need 0 ≤ n ≤ K")
        rest = X - A
        if n < K and not rest:
            raise ValueError("A covers the vocabulary")
        blocks = []
        for pos in itertools.combinations(range(K), n):
            chosen = set(pos)
            blocks.append([A if k in chosen else rest for k in range(K)])
        return Query(blocks, V)
    raise ValueError(f"unknown query kind '{kind}'")


def query_to_dict(q: Query) -> dict:
    return {"schema": 1, "vocab_size": q.vocab_size,
            "blocks": [[sorted(s) for s in b.sets] for b in q.blocks]}


def query_from_dict(doc: dict) -> Query:
    V = int(doc["vocab_size"])
    if "kind" in doc:
        params = {k: v for k, v in doc.items() if k not in ("schema", "kind", "vocab_size")}
        return build_query(doc["kind"], V, **params)
    return Query(doc["blocks"], V)


def load_query(path) -> Query:
    with open(path) as fh:
        return query_from_dict(json.load(fh))
