"""Hitting regions: half-spaces, axis-aligned boxes, vertex sets and their
unions, with membership tests and Gaussian masses."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import ndtr
from scipy.stats import truncnorm

__all__ = [
    "Region",
    "Empty",
    "HalfSpace",
    "Box",
    "VertexSet",
    "Union",
    "EMPTY",
    "union_of",
    "region_to_dict",
    "region_from_dict",
    "interval_mass",
    "intervals_1d",
]


def interval_mass(lo, hi, mean, std):
    """``P(lo <= N(mean, std^2) <= hi)`` elementwise; ``std = 0`` gives an
    indicator."""
    lo, hi, mean, std = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (lo, hi, mean, std)))
    out = np.empty(mean.shape)
    pos = std > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - mean) / np.where(pos, std, 1.0)
        b = (hi - mean) / np.where(pos, std, 1.0)
    # use the upper tail when both bounds sit above the mean for accuracy
    upper = a > 0
    g = np.where(upper, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    out[pos] = np.clip(g[pos], 0.0, 1.0)
    point = ~pos
    out[point] = ((mean >= lo) & (mean <= hi))[point]
    return out


# inner Monte Carlo draws for Gaussian masses without a closed form
INNER_MC_DRAWS = 256


class Region:
    kind = "region"

    def contains(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gaussian_mass(self, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
        """Mass of ``N(mean, diag(std^2))`` per row."""
        raise NotImplementedError

    @property
    def is_empty(self) -> bool:
        return False

    def sample_outside(self, mean, std, gen, tries: int = 64):
        """Draw from ``N(mean, diag(std^2))`` conditioned to miss the region.

        Returns ``(x, ok)``; rows where ``tries`` rejections all landed inside
        have ``ok = False``.
        """
        mean = np.asarray(mean, dtype=float)
        std = np.asarray(std, dtype=float)
        x = mean + std * gen.standard_normal(mean.shape)
        bad = self.contains(x)
        for _ in range(tries - 1):
            if not bad.any():
                break
            i = np.nonzero(bad)[0]
            x[i] = mean[i] + std[i] * gen.standard_normal((i.size, mean.shape[1]))
            bad[i] = self.contains(x[i])
        return x, ~bad


class Empty(Region):
    kind = "empty"

    def contains(self, x):
        return np.zeros(np.asarray(x).shape[0], dtype=bool)

    def gaussian_mass(self, mean, std):
        return np.zeros(np.asarray(mean).shape[0])

    @property
    def is_empty(self):
        return True

    def __repr__(self):
        return "Empty()"

    def __eq__(self, other):
        return isinstance(other, Empty)

    def __hash__(self):
        return hash("empty")


EMPTY = Empty()


class HalfSpace(Region):
    """``x[coord] >= threshold`` (side "ge") or ``x[coord] < threshold``
    (side "lt")."""

    kind = "halfspace"

    def __init__(self, coord: int, threshold: float, side: str = "ge"):
        if side not in ("ge", "lt"):
            raise ValueError("side must be 'ge' or 'lt'")
        self.coord = int(coord)
        self.threshold = float(threshold)
        self.side = side

    def contains(self, x):
        v = np.asarray(x, dtype=float)[:, self.coord]
        return v >= self.threshold if self.side == "ge" else v < self.threshold

    def gaussian_mass(self, mean, std):
        m = np.asarray(mean, dtype=float)[:, self.coord]
        s = np.asarray(std, dtype=float)[:, self.coord]
        if self.side == "ge":
            return interval_mass(self.threshold, math.inf, m, s)
        return interval_mass(-math.inf, self.threshold, m, s)

    def sample_outside(self, mean, std, gen, tries: int = 64):
        mean = np.asarray(mean, dtype=float)
        std = np.asarray(std, dtype=float)
        x = mean + std * gen.standard_normal(mean.shape)
        c = self.coord
        m, s = mean[:, c], std[:, c]
        pos = s > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            b = (self.threshold - m) / np.where(pos, s, 1.0)
        u = gen.random(m.size)
        # inverse-CDF draw from the complementary tail; truncnorm stays
        # accurate far into the tails
        if self.side == "ge":
            z = truncnorm.ppf(u, -np.inf, b)
            z = np.minimum(z, np.nextafter(b, -np.inf))
        else:
            z = truncnorm.ppf(u, b, np.inf)
            z = np.maximum(z, b)
        ok = pos & np.isfinite(z)
        x[:, c] = np.where(ok, m + s * np.where(ok, z, 0.0), m)
        ok = np.where(pos, ok, ~self.contains(mean))
        return x, ok

    def __repr__(self):
        op = ">=" if self.side == "ge" else "<"
        return f"HalfSpace(x[{self.coord}] {op} {self.threshold})"

    def _key(self):
        return ("halfspace", self.coord, self.threshold, self.side)

    def __eq__(self, other):
        return isinstance(other, HalfSpace) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


class Box(Region):
    """Closed axis-aligned box; infinite bounds allowed."""

    kind = "box"

    def __init__(self, lower, upper):
        lo = np.asarray([-math.inf if v is None else float(v) for v in lower])
        hi = np.asarray([math.inf if v is None else float(v) for v in upper])
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must match and satisfy lower <= upper")
        self.lower = lo
        self.upper = hi

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)

    def gaussian_mass(self, mean, std):
        return np.prod(interval_mass(self.lower[None], self.upper[None], mean, std), axis=1)

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"

    def _key(self):
        return ("box", tuple(self.lower), tuple(self.upper))

    def __eq__(self, other):
        return isinstance(other, Box) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


class VertexSet(Region):
    """States whose coordinate ``coord`` equals one of ``values``."""

    kind = "vertices"

    def __init__(self, values, coord: int = 0):
        self.values = tuple(sorted({int(v) for v in values}))
        self.coord = int(coord)
        self._arr = np.asarray(self.values, dtype=float)

    def contains(self, x):
        v = np.asarray(x, dtype=float)[:, self.coord]
        return np.isin(np.rint(v), self._arr) & (np.abs(v - np.rint(v)) < 1e-9)

    def gaussian_mass(self, mean, std):
        mean = np.asarray(mean, dtype=float)
        std = np.asarray(std, dtype=float)
        point = np.all(std == 0, axis=1)
        return np.where(point, self.contains(mean), 0.0).astype(float)

    def __repr__(self):
        return f"VertexSet({list(self.values)})"

    def _key(self):
        return ("vertices", self.values, self.coord)

    def __eq__(self, other):
        return isinstance(other, VertexSet) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


class Union(Region):
    """Union of regions; Gaussian mass assumes the parts are disjoint."""

    kind = "union"

    def __init__(self, parts):
        flat = []
        for p in parts:
            if isinstance(p, Union):
                flat.extend(p.parts)
            elif not p.is_empty:
                flat.append(p)
        self.parts = tuple(dict.fromkeys(flat))

    @property
    def is_empty(self):
        return not self.parts

    def contains(self, x):
        out = np.zeros(np.asarray(x).shape[0], dtype=bool)
        for p in self.parts:
            out |= p.contains(x)
        return out

    def gaussian_mass(self, mean, std, gen=None):
        """Exact by inclusion-exclusion when every part is box-like;
        otherwise an inner Monte Carlo estimate on the non-degenerate rows."""
        mean = np.asarray(mean, dtype=float)
        std = np.asarray(std, dtype=float)
        d = mean.shape[1]
        out = np.zeros(mean.shape[0])
        point = np.all(std == 0, axis=1)
        out[point] = self.contains(mean[point])
        rows = ~point
        if not rows.any():
            return out
        boxes = [_as_box(p, d) for p in self.parts]
        m, s = mean[rows], std[rows]
        if all(b is not None for b in boxes) and len(boxes) <= 12:
            acc = np.zeros(m.shape[0])
            for r in range(1, len(boxes) + 1):
                sign = 1.0 if r % 2 else -1.0
                for combo in itertools.combinations(boxes, r):
                    lo = np.max([b[0] for b in combo], axis=0)
                    hi = np.min([b[1] for b in combo], axis=0)
                    if np.any(lo > hi):
                        continue
                    acc += sign * np.prod(interval_mass(lo[None], hi[None], m, s), axis=1)
            out[rows] = np.clip(acc, 0.0, 1.0)
            return out
        gen = np.random.default_rng(0) if gen is None else gen
        hits = np.zeros(m.shape[0])
        for _ in range(INNER_MC_DRAWS):
            hits += self.contains(m + s * gen.standard_normal(m.shape))
        out[rows] = hits / INNER_MC_DRAWS
        return out

    def __repr__(self):
        return f"Union({list(self.parts)})"

    def __eq__(self, other):
        return isinstance(other, Union) and set(self.parts) == set(other.parts)

    def __hash__(self):
        return hash(frozenset(self.parts))


def _as_box(r: Region, d: int):
    """``(lower, upper)`` arrays when ``r`` is a box up to a null set."""
    if isinstance(r, Box):
        return r.lower, r.upper
    if isinstance(r, HalfSpace):
        lo, hi = np.full(d, -math.inf), np.full(d, math.inf)
        if r.side == "ge":
            lo[r.coord] = r.threshold
        else:
            hi[r.coord] = r.threshold
        return lo, hi
    return None


def intervals_1d(r: Region):
    """Disjoint closed intervals covering a one-dimensional region up to a
    null set, or None when ``r`` is not interval-like."""
    parts = r.parts if isinstance(r, Union) else ([] if r.is_empty else [r])
    spans = []
    for p in parts:
        box = _as_box(p, 1)
        if box is None or box[0].size != 1:
            return None
        spans.append((float(box[0][0]), float(box[1][0])))
    spans.sort()
    merged = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def union_of(regions) -> Region:
    parts = [r for r in regions if not r.is_empty]
    if not parts:
        return EMPTY
    if len(parts) == 1:
        return parts[0]
    u = Union(parts)
    return u.parts[0] if len(u.parts) == 1 else u


def region_to_dict(r: Region) -> dict:
    if isinstance(r, Empty):
        return {"type": "empty"}
    if isinstance(r, HalfSpace):
        return {"type": "halfspace", "coord": r.coord, "threshold": r.threshold, "side": r.side}
    if isinstance(r, Box):
        enc = lambda a: [None if not math.isfinite(v) else float(v) for v in a]
        return {"type": "box", "lower": enc(r.lower), "upper": enc(r.upper)}
    if isinstance(r, VertexSet):
        return {"type": "vertices", "values": list(r.values), "coord": r.coord}
    if isinstance(r, Union):
        return {"type": "union", "parts": [region_to_dict(p) for p in r.parts]}
    raise TypeError(f"cannot serialize {r!r}")


_REGION_KEYS = {
    "empty": set(),
    "halfspace": {"coord", "threshold", "side"},
    "box": {"lower", "upper"},
    "vertices": {"values", "coord"},
    "union": {"parts"},
}


def region_from_dict(d: dict) -> Region:
    kind = d.get("type")
    if kind not in _REGION_KEYS:
        raise ValueError(f"unknown region type {kind!r}")
    extra = set(d) - _REGION_KEYS[kind] - {"type"}
    if extra:
        raise ValueError(f"unknown region keys: {sorted(extra)}")
    if kind == "empty":
        return EMPTY
    if kind == "halfspace":
        return HalfSpace(d.get("coord", 0), d["threshold"], d.get("side", "ge"))
    if kind == "box":
        return Box(d["lower"], d["upper"])
    if kind == "vertices":
        return VertexSet(d["values"], d.get("coord", 0))
    return union_of([region_from_dict(p) for p in d["parts"]])
