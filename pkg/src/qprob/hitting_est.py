"""Hitting-time CDF estimators for jump processes: naive (NE), stopped
compensator (TR), importance sampling under a hit-forbidding proposal (IS)
and its integrated form (ISP), plus ordered and joint compositions.

Exact mode simulates pure-jump processes by thinning; Euler mode steps on a
lattice of width ``dt`` and conditions each step away from the forbidden
region.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .estcore import (
    EFFICIENCY_INF,
    Accumulator,
    EstimateSummary,
    as_stream,
    draw_chunked,
    relative_efficiency,
)
from .jump.ght import GHT
from .jump.processes import JumpProcess
from .jump.simulate import DEFAULT_DT, BankResult, run_bank

__all__ = [
    "METHODS",
    "CdfCurve",
    "simulate_bank",
    "cdf_estimate",
    "cdf_estimates",
    "ordered_estimate",
    "joint_estimate",
    "efficiency_report",
    "JOINT_ORDER_CAP",
]

log = logging.getLogger(__name__)

METHODS = ("NE", "TR", "IS", "ISP")
JOINT_ORDER_CAP = 5


@dataclass
class CdfCurve:
    grid: np.ndarray
    summaries: list
    method: str
    mode: str
    flags: dict = field(default_factory=dict)

    @property
    def means(self) -> np.ndarray:
        return np.array([s.mean for s in self.summaries])

    @property
    def variances(self) -> np.ndarray:
        return np.array([s.var for s in self.summaries])

    @property
    def ses(self) -> np.ndarray:
        return np.array([s.se for s in self.summaries])

    @property
    def n(self) -> int:
        return self.summaries[0].n


def _mode_tag(mode, dt):
    return "exact" if mode == "exact" else f"euler({dt:g})"


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0 or np.any(grid < 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be nonempty, nonnegative and strictly increasing")
    return grid


def simulate_bank(process: JumpProcess, ghts, grid, n: int, rng=0, mode: str = "exact",
                  dt: float = DEFAULT_DT, policy="none", tr_index=None,
                  workers: int | None = None, label: str = "bank") -> BankResult:
    """``run_bank`` over fixed chunks with their own streams, so results do not
    depend on the worker count."""
    ghts = list(ghts)
    grid = _check_grid(grid)
    K, G = len(ghts), grid.size
    stream = as_stream(rng)

    def draw(m, gen):
        b = run_bank(process, ghts, grid, m, gen, mode=mode, dt=dt, policy=policy,
                     tr_index=tr_index)
        comp = b.comp_grid if b.comp_grid is not None else np.zeros((m, 0))
        fails = np.zeros((m, 1))
        fails[0, 0] = b.extra.get("rejection_failures", 0.0)
        return np.concatenate([b.times, b.logL_grid, b.logL_at, comp, fails], axis=1)

    packed = draw_chunked(draw, n, stream, workers=workers, label=label)
    times = packed[:, :K]
    logL_grid = packed[:, K:K + G]
    logL_at = packed[:, K + G:2 * K + G]
    comp = packed[:, 2 * K + G:2 * K + 2 * G] if tr_index is not None else None
    failures = float(packed[:, -1].sum())
    if failures:
        log.warning("%d conditioned steps fell back to weight zero after rejection", failures)
    return BankResult(grid, times, logL_grid, logL_at, comp, {"rejection_failures": failures})


def _summaries(values, method, **extra):
    out = []
    for j in range(values.shape[1]):
        acc = Accumulator()
        acc.add_batch(values[:, j])
        out.append(acc.summary(method, **extra))
    return out


def cdf_estimates(process: JumpProcess, ght: GHT, grid, n: int, methods=METHODS,
                  mode: str = "exact", rng=0, dt: float = DEFAULT_DT,
                  workers: int | None = None) -> dict:
    """Curves for several methods of ``P(T <= t)``; NE and TR share one
    base-law bank, IS and ISP share one proposal bank."""
    methods = [m.upper() for m in methods]
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValueError(f"unknown methods {sorted(bad)}")
    grid = _check_grid(grid)
    stream = as_stream(rng)
    tag = _mode_tag(mode, dt)
    out = {}
    if {"NE", "TR"} & set(methods):
        b = simulate_bank(process, [ght], grid, n, stream.child("base"), mode, dt,
                          "none", tr_index=0, workers=workers, label="base")
        T = b.times[:, 0]
        if "NE" in methods:
            ne = (T[:, None] <= grid[None, :]).astype(float)
            out["NE"] = CdfCurve(grid, _summaries(ne, "NE"), "NE", tag)
        if "TR" in methods:
            tr = b.comp_grid
            flags = {"tr_above_one": int(np.sum(tr > 1.0))}
            out["TR"] = CdfCurve(grid, _summaries(tr, "TR"), "TR", tag, flags)
    if {"IS", "ISP"} & set(methods):
        b = simulate_bank(process, [ght], grid, n, stream.child("proposal"), mode, dt,
                          ("only", 0), workers=workers, label="proposal")
        L = np.exp(b.logL_grid)
        if np.any(L > 1.0):
            raise AssertionError("likelihood ratio above one")
        T = b.times[:, 0]
        flags = {"rejection_failures": b.extra["rejection_failures"]}
        if "IS" in methods:
            vals = 1.0 - L * (T[:, None] > grid[None, :])
            if np.any(vals < 0) or np.any(vals > 1):
                raise AssertionError("IS sample outside [0, 1]")
            out["IS"] = CdfCurve(grid, _summaries(vals, "IS"), "IS", tag, dict(flags))
        if "ISP" in methods:
            # the proposal never realizes T, so the integral of L λ^T telescopes
            vals = 1.0 - L
            out["ISP"] = CdfCurve(grid, _summaries(vals, "ISP"), "ISP", tag, dict(flags))
    return {m: out[m] for m in methods}


def cdf_estimate(process: JumpProcess, ght: GHT, grid, n: int, method: str = "IS",
                 mode: str = "exact", rng=0, dt: float = DEFAULT_DT,
                 workers: int | None = None) -> CdfCurve:
    return cdf_estimates(process, ght, grid, n, [method], mode, rng, dt, workers)[method.upper()]


def _ordered_values(b: BankResult, K: int, t_prefix, t_last_col):
    """Per-path value of ``1(T_0 < ... < T_{K-2}, each by its deadline) *
    ∫ L λ^{T_{K-1}}`` from ``T_{K-2}`` to the last deadline."""
    L_last = np.exp(b.logL_grid[:, t_last_col])
    if K == 1:
        return 1.0 - L_last
    T = b.times[:, :K - 1]
    ok = np.all(np.isfinite(T), axis=1)
    if K > 2:
        # unrealized rows are already excluded; inf - inf is harmless here
        with np.errstate(invalid="ignore"):
            ok &= np.all(np.diff(T, axis=1) > 0, axis=1)
    ok &= np.all(T <= t_prefix[None, :], axis=1)
    t_last = b.grid[t_last_col]
    ok &= T[:, -1] < t_last
    start = np.exp(b.logL_at[:, K - 2])
    return np.where(ok, np.maximum(start - L_last, 0.0), 0.0)


def ordered_estimate(process: JumpProcess, ghts, grid, n: int, rng=0, mode: str = "exact",
                     dt: float = DEFAULT_DT, workers: int | None = None) -> CdfCurve:
    """``P(T_0 < T_1 < ... < T_{K-1} <= t)`` on a grid."""
    ghts = list(ghts)
    if not ghts:
        raise ValueError("need at least one hitting time")
    grid = _check_grid(grid)
    K = len(ghts)
    b = simulate_bank(process, ghts, grid, n, as_stream(rng).child("ordered"), mode, dt,
                      "ordered", workers=workers, label="ordered")
    cols = []
    for j, t in enumerate(grid):
        cols.append(_ordered_values(b, K, np.full(K - 1, t), j))
    vals = np.stack(cols, axis=1)
    return CdfCurve(grid, _summaries(vals, "ordered"), "ordered", _mode_tag(mode, dt),
                    {"rejection_failures": b.extra["rejection_failures"]})


def _combine(terms, method, **extra) -> EstimateSummary:
    n = terms[0].n
    mean = float(sum(t.mean for t in terms))
    var = float(sum(t.var for t in terms))
    se = math.sqrt(sum(t.se ** 2 for t in terms))
    return EstimateSummary(n, mean, var, se, method, {"terms": float(len(terms)), **extra})


def joint_estimate(process: JumpProcess, ghts, times, n: int, variant: str = "unordered",
                   rng=0, mode: str = "exact", dt: float = DEFAULT_DT,
                   workers: int | None = None, cap: int = JOINT_ORDER_CAP) -> EstimateSummary:
    """``P(T_k <= t_k for every k)`` as a sum of independently simulated terms.

    ``ordered`` sums one term per ordering of the hitting times, each under
    a proposal that enforces that ordering; ``unordered`` sums one term per
    hitting time, forbidding only that one and requiring it to come last.
    Ties between hitting times are assumed to have probability zero.
    """
    ghts = list(ghts)
    times = np.asarray(times, dtype=float).reshape(-1)
    K = len(ghts)
    if K < 1 or times.size != K:
        raise ValueError("need one deadline per hitting time and at least one of each")
    if np.any(times <= 0):
        raise ValueError("deadlines must be positive")
    if variant not in ("ordered", "unordered"):
        raise ValueError("variant must be 'ordered' or 'unordered'")
    grid = np.unique(times)
    col = {float(t): j for j, t in enumerate(grid)}
    stream = as_stream(rng)
    terms = []
    if variant == "ordered":
        if K > cap:
            raise ValueError(f"ordered joint estimate limited to {cap} hitting times")
        for p, perm in enumerate(itertools.permutations(range(K))):
            b = simulate_bank(process, [ghts[i] for i in perm], grid, n,
                              stream.child("perm", p), mode, dt, "ordered",
                              workers=workers, label="ordered")
            t_perm = times[list(perm)]
            vals = _ordered_values(b, K, t_perm[:-1], col[float(t_perm[-1])])
            terms.append(_summaries(vals[:, None], "joint-ordered")[0])
        return _combine(terms, "joint-ordered")
    ties = 0
    for j in range(K):
        b = simulate_bank(process, ghts, grid, n, stream.child("last", j), mode, dt,
                          ("only", j), workers=workers, label="unordered")
        others = [i for i in range(K) if i != j]
        L_j = np.exp(b.logL_grid[:, col[float(times[j])]])
        if not others:
            vals = 1.0 - L_j
        else:
            T = b.times[:, others]
            ok = np.all(T <= times[others][None, :], axis=1)
            Tm = np.where(np.isfinite(T), T, -np.inf)
            last = np.argmax(Tm, axis=1)
            M = Tm[np.arange(T.shape[0]), last]
            ok &= M < times[j]
            start = np.exp(b.logL_at[np.arange(T.shape[0]), np.asarray(others)[last]])
            ties += int(np.sum(ok & (np.sum(Tm == M[:, None], axis=1) > 1)))
            vals = np.where(ok, np.maximum(start - L_j, 0.0), 0.0)
        terms.append(_summaries(vals[:, None], "joint-unordered")[0])
    if ties:
        log.info("%d samples had tied realization times", ties)
    return _combine(terms, "joint-unordered", ties=float(ties))


def efficiency_report(curves) -> list[dict]:
    """Pairwise relative efficiencies per grid point.

    Each row holds ``t``, ``a``, ``b`` and ``eff`` = Var(b) / Var(a); ``eff``
    is None when undefined (both variances zero) and ``EFFICIENCY_INF``
    when only ``a`` is degenerate.
    """
    curves = list(curves)
    if not curves:
        return []
    grid = curves[0].grid
    for c in curves[1:]:
        if c.grid.shape != grid.shape or np.any(c.grid != grid):
            raise ValueError("curves must share a grid")
    rows = []
    for j, t in enumerate(grid):
        for a, b in itertools.product(curves, repeat=2):
            sa, sb = a.summaries[j], b.summaries[j]
            try:
                eff = relative_efficiency(sa, sb)
            except ValueError:
                eff = None
            rows.append({"t": float(t), "a": a.method, "b": b.method, "eff": eff})
    return rows
