"""Generalized hitting times built from regions: plain hits, min/max
compositions, hits that only count after a prerequisite, and hits
conditioned on the order of two regions.

Each node has a vectorized tracker that follows many paths at once and
reports, per path, the region whose entry would realize the time next
(empty when no single jump or step can do so).
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .regions import EMPTY, Region, region_from_dict, region_to_dict, union_of

__all__ = [
    "GHT",
    "Hit",
    "MinOf",
    "MaxOf",
    "After",
    "Conditioned",
    "Tracker",
    "ght_to_dict",
    "ght_from_dict",
    "INFINITY_SENTINEL",
    "format_time",
]

# serialized stand-in for "never within the horizon"
INFINITY_SENTINEL = "inf"


def format_time(t: float) -> str:
    return INFINITY_SENTINEL if not math.isfinite(t) else repr(float(t))


class GHT:
    def tracker(self, n: int) -> "Tracker":
        raise NotImplementedError


class Tracker:
    """Per-path realization times plus a table of possible current regions.

    ``code(idx)`` indexes ``regions``; ``regions[0]`` is always empty.
    """

    regions: list

    def __init__(self, n: int):
        self.time = np.full(n, np.inf)

    def observe(self, idx, t, x) -> None:
        raise NotImplementedError

    def code(self, idx) -> np.ndarray:
        raise NotImplementedError

    def realized(self, idx):
        return np.isfinite(self.time[idx])


class Hit(GHT):
    def __init__(self, region: Region):
        self.region = region

    def __repr__(self):
        return f"Hit({self.region!r})"

    def tracker(self, n):
        return _HitTracker(n, self.region)


class _HitTracker(Tracker):
    def __init__(self, n, region):
        super().__init__(n)
        self.region = region
        self.regions = [EMPTY, region]

    def observe(self, idx, t, x):
        open_ = ~np.isfinite(self.time[idx])
        if open_.any():
            hit = open_ & self.region.contains(x)
            self.time[idx[hit]] = t if np.ndim(t) == 0 else np.asarray(t)[hit]

    def code(self, idx):
        return (~np.isfinite(self.time[idx])).astype(np.int64) * (0 if self.region.is_empty else 1)


class After(GHT):
    """First entry into ``region`` strictly after ``prereq`` has realized."""

    def __init__(self, prereq: GHT, region: Region):
        self.prereq = prereq
        self.region = region

    def __repr__(self):
        return f"After({self.prereq!r}, {self.region!r})"

    def tracker(self, n):
        return _AfterTracker(n, self)


class _AfterTracker(Tracker):
    def __init__(self, n, node):
        super().__init__(n)
        self.pre = node.prereq.tracker(n)
        self.region = node.region
        self.regions = [EMPTY, node.region]

    def observe(self, idx, t, x):
        before = self.pre.realized(idx).copy()
        self.pre.observe(idx, t, x)
        open_ = before & ~np.isfinite(self.time[idx])
        if open_.any():
            hit = open_ & self.region.contains(x)
            self.time[idx[hit]] = t if np.ndim(t) == 0 else np.asarray(t)[hit]

    def code(self, idx):
        return (self.pre.realized(idx) & ~np.isfinite(self.time[idx])).astype(np.int64)


class Conditioned(GHT):
    """Entry time of ``region`` counted only if ``other`` was entered first
    (``other_first=True``) or not yet (``other_first=False``); otherwise
    never realized."""

    def __init__(self, region: Region, other: Region, other_first: bool = True):
        self.region = region
        self.other = other
        self.other_first = bool(other_first)

    def __repr__(self):
        return f"Conditioned({self.region!r}, {self.other!r}, other_first={self.other_first})"

    def tracker(self, n):
        return _ConditionedTracker(n, self)


class _ConditionedTracker(Tracker):
    def __init__(self, n, node):
        super().__init__(n)
        self.node = node
        self.a = _HitTracker(n, node.region)
        self.b = _HitTracker(n, node.other)
        self.regions = [EMPTY, node.region]

    def observe(self, idx, t, x):
        self.a.observe(idx, t, x)
        self.b.observe(idx, t, x)
        ta, tb = self.a.time[idx], self.b.time[idx]
        if self.node.other_first:
            ok = np.isfinite(ta) & (tb < ta)
        else:
            ok = np.isfinite(ta) & (ta < tb)
        open_ = ~np.isfinite(self.time[idx]) & ok
        self.time[idx[open_]] = ta[open_]

    def code(self, idx):
        ta, tb = self.a.time[idx], self.b.time[idx]
        live = ~np.isfinite(ta)
        if self.node.other_first:
            live &= np.isfinite(tb)
        else:
            live &= ~np.isfinite(tb)
        return live.astype(np.int64)


class _Composite(Tracker):
    def __init__(self, n, children):
        super().__init__(n)
        self.kids = [c.tracker(n) for c in children]


class MinOf(GHT):
    def __init__(self, children):
        self.children = tuple(children)
        if not self.children:
            raise ValueError("need at least one child")

    def __repr__(self):
        return f"MinOf({list(self.children)!r})"

    def tracker(self, n):
        return _MinTracker(n, self.children)


class _MinTracker(_Composite):
    def __init__(self, n, children):
        super().__init__(n, children)
        combos = list(itertools.product(*[range(len(k.regions)) for k in self.kids]))
        self._radix = [len(k.regions) for k in self.kids]
        self.regions = [EMPTY] + [union_of([k.regions[c] for k, c in zip(self.kids, combo)])
                                  for combo in combos]

    def observe(self, idx, t, x):
        for k in self.kids:
            k.observe(idx, t, x)
        tm = np.min([k.time[idx] for k in self.kids], axis=0)
        open_ = ~np.isfinite(self.time[idx])
        self.time[idx[open_]] = tm[open_]

    def code(self, idx):
        flat = np.zeros(idx.size, dtype=np.int64)
        for k, r in zip(self.kids, self._radix):
            flat = flat * r + k.code(idx)
        return np.where(np.isfinite(self.time[idx]), 0, flat + 1)


class MaxOf(GHT):
    def __init__(self, children):
        self.children = tuple(children)
        if not self.children:
            raise ValueError("need at least one child")

    def __repr__(self):
        return f"MaxOf({list(self.children)!r})"

    def tracker(self, n):
        return _MaxTracker(n, self.children)


class _MaxTracker(_Composite):
    def __init__(self, n, children):
        super().__init__(n, children)
        self.regions = [EMPTY]
        self._offset = []
        for k in self.kids:
            self._offset.append(len(self.regions) - 1)
            self.regions.extend(k.regions[1:])

    def observe(self, idx, t, x):
        for k in self.kids:
            k.observe(idx, t, x)
        times = np.stack([k.time[idx] for k in self.kids])
        done = np.all(np.isfinite(times), axis=0)
        open_ = ~np.isfinite(self.time[idx]) & done
        self.time[idx[open_]] = times.max(axis=0)[open_]

    def code(self, idx):
        open_ = np.stack([~k.realized(idx) for k in self.kids])
        single = open_.sum(axis=0) == 1
        out = np.zeros(idx.size, dtype=np.int64)
        for j, k in enumerate(self.kids):
            sel = single & open_[j]
            if sel.any():
                c = k.code(idx[sel])
                out[sel] = np.where(c > 0, c + self._offset[j], 0)
        return out


def ght_to_dict(g: GHT) -> dict:
    if isinstance(g, Hit):
        return {"type": "hit", "region": region_to_dict(g.region)}
    if isinstance(g, After):
        return {"type": "after", "prereq": ght_to_dict(g.prereq), "region": region_to_dict(g.region)}
    if isinstance(g, Conditioned):
        return {"type": "conditioned", "region": region_to_dict(g.region),
                "other": region_to_dict(g.other), "other_first": g.other_first}
    if isinstance(g, MinOf):
        return {"type": "min", "children": [ght_to_dict(c) for c in g.children]}
    if isinstance(g, MaxOf):
        return {"type": "max", "children": [ght_to_dict(c) for c in g.children]}
    raise TypeError(f"cannot serialize {g!r}")


_GHT_KEYS = {
    "hit": {"region"},
    "after": {"prereq", "region"},
    "conditioned": {"region", "other", "other_first"},
    "min": {"children"},
    "max": {"children"},
}


def ght_from_dict(d: dict) -> GHT:
    kind = d.get("type")
    if kind not in _GHT_KEYS:
        raise ValueError(f"unknown hitting-time type {kind!r}")
    extra = set(d) - _GHT_KEYS[kind] - {"type"}
    if extra:
        raise ValueError(f"unknown hitting-time keys: {sorted(extra)}")
    if kind == "hit":
        return Hit(region_from_dict(d["region"]))
    if kind == "after":
        return After(ght_from_dict(d["prereq"]), region_from_dict(d["region"]))
    if kind == "conditioned":
        return Conditioned(region_from_dict(d["region"]), region_from_dict(d["other"]),
                           d.get("other_first", True))
    children = [ght_from_dict(c) for c in d["children"]]
    return MinOf(children) if kind == "min" else MaxOf(children)
