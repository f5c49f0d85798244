"""Shared numerics: reproducible random streams, Monte Carlo accumulation,
trapezoidal integration and relative efficiency."""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "RngStream",
    "EstimateSummary",
    "Accumulator",
    "Grid",
    "mc_accumulate",
    "summarize_columns",
    "trapezoid",
    "relative_efficiency",
    "draw_chunked",
    "default_workers",
    "EFFICIENCY_INF",
    "sample_rows",
]

_MASK64 = (1 << 64) - 1

# Returned by relative_efficiency when only the first estimator is degenerate.
EFFICIENCY_INF = math.inf

DEFAULT_CHUNK = 2048


def default_workers() -> int:
    """Worker count from ``QPROB_WORKERS`` (defaults to 1)."""
    raw = os.environ.get("QPROB_WORKERS", "1")
    try:
        value = int(raw)
    except ValueError:
        return 1
    return max(1, value)


@dataclass(frozen=True)
class RngStream:
    """A counter-based random stream keyed by ``(seed, stream_id)``.

    Draws come from a Philox generator whose 128-bit key is the pair, so the
    sequence depends only on the key, never on scheduling.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "RngStream":
        """Derive an independent stream from this one and a label path."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        for lab in labels:
            h.update(b"/")
            h.update(str(lab).encode())
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"))


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng), 0)
    raise TypeError("expected an RngStream or an integer seed")


@dataclass(frozen=True)
class EstimateSummary:
    n: int
    mean: float
    var: float
    se: float
    method: str = "mc"
    extra: dict = field(default_factory=dict, compare=False)

    def with_method(self, method: str, **extra) -> "EstimateSummary":
        merged = dict(self.extra)
        merged.update(extra)
        return EstimateSummary(self.n, self.mean, self.var, self.se, method, merged)


class Accumulator:
    """Single-pass mean/variance with associative merging (Welford/Chan)."""

    __slots__ = ("n", "mean", "m2")

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def add_batch(self, values) -> None:
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return
        other = Accumulator()
        other.n = int(v.size)
        if np.all(v == v[0]):
            # keep constant batches exactly degenerate
            other.mean, other.m2 = float(v[0]), 0.0
        else:
            other.mean = float(v.mean())
            other.m2 = float(np.sum((v - other.mean) ** 2))
        self.merge(other)

    def merge(self, other: "Accumulator") -> None:
        if other.n == 0:
            return
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return
        n = self.n + other.n
        d = other.mean - self.mean
        self.mean += d * other.n / n
        self.m2 += other.m2 + d * d * self.n * other.n / n
        self.n = n

    def summary(self, method: str = "mc", **extra) -> EstimateSummary:
        if self.n == 0:
            raise ValueError("no samples")
        if self.n == 1:
            var = 0.0
            extra = {**extra, "single_sample": 1.0}
        else:
            var = max(self.m2 / (self.n - 1), 0.0)
        return EstimateSummary(self.n, float(self.mean), float(var),
                               math.sqrt(var / self.n), method, extra)


def mc_accumulate(samples: Iterable[float], method: str = "mc",
                  block: int = 65536, **extra) -> EstimateSummary:
    """Mean, unbiased variance and standard error of ``samples``."""
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("no samples")
    acc = Accumulator()
    for start in range(0, arr.size, block):
        acc.add_batch(arr[start:start + block])
    return acc.summary(method, **extra)


def summarize_columns(values, method: str = "mc") -> list[EstimateSummary]:
    """One summary per column of an ``(n, G)`` sample matrix."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return [mc_accumulate(arr[:, j], method) for j in range(arr.shape[1])]


@dataclass(frozen=True)
class Grid:
    points: tuple

    def __init__(self, points):
        pts = tuple(float(p) for p in np.asarray(points, dtype=float).ravel())
        if not pts:
            raise ValueError("grid must be nonempty")
        if not all(math.isfinite(p) for p in pts):
            raise ValueError("grid points must be finite")
        if pts[0] < 0:
            raise ValueError("grid must start at or after 0")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def linspace(cls, start: float, stop: float, num: int) -> "Grid":
        return cls(np.linspace(start, stop, num))

    def array(self) -> np.ndarray:
        return np.asarray(self.points)

    def __len__(self):
        return len(self.points)


def trapezoid(values: Sequence[float], grid: Grid | Sequence[float]) -> float:
    t = grid.array() if isinstance(grid, Grid) else np.asarray(grid, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.shape != t.shape:
        raise ValueError("values and grid lengths differ")
    if t.size < 2:
        raise ValueError("need at least two grid points")
    return float(np.sum((v[1:] + v[:-1]) * np.diff(t)) / 2.0)


def relative_efficiency(a: EstimateSummary, b: EstimateSummary) -> float:
    """``b.var / a.var``; values above 1 favour ``a``."""
    if a.var == 0 and b.var == 0:
        raise ValueError("both estimators degenerate")
    if a.var == 0:
        return EFFICIENCY_INF
    return b.var / a.var


def draw_chunked(draw: Callable[[int, np.random.Generator], np.ndarray], n: int,
                 rng, chunk: int = DEFAULT_CHUNK, workers: int | None = None,
                 label: str = "chunk") -> np.ndarray:
    """Run ``draw(m, generator)`` over fixed-size chunks and stack the rows.

    Chunk ``i`` always uses the stream ``rng.child(label, i)``, so the result
    does not depend on how many workers evaluate the chunks.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    stream = as_stream(rng)
    sizes = [min(chunk, n - s) for s in range(0, n, chunk)]

    def job(i):
        return np.asarray(draw(sizes[i], stream.child(label, i).generator()))

    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(sizes) <= 1:
        parts = [job(i) for i in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    if not parts:
        return np.zeros((0,))
    return np.concatenate(parts, axis=0)


def sample_rows(P: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one column index per row of ``P`` (rows need not
    be normalized)."""
    cdf = np.cumsum(P, axis=1)
    target = u * cdf[:, -1]
    idx = (cdf <= target[:, None]).sum(axis=1)
    # a zero-probability column can only be picked when the row is all zero
    return np.minimum(idx, P.shape[1] - 1)
