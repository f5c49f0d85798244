"""Path simulation (exact thinning for pure-jump processes, Euler steps
otherwise), hitting-time evaluation on stored paths, and the batched bank
simulator shared by the hitting-time estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ght import GHT
from .processes import JumpProcess
from .regions import EMPTY, Region, union_of

__all__ = [
    "Path",
    "euler_step",
    "simulate_path",
    "evaluate_ght",
    "hitting_intensity",
    "BankResult",
    "run_bank",
    "DEFAULT_DT",
]

DEFAULT_DT = 0.01
RATIO_SLACK = 1e-9
REJECTION_TRIES = 64


def _check_rate(lam, dt):
    if np.any(lam * dt > 1.0 + 1e-12):
        raise ValueError("step too coarse for intensity")


def euler_step(process: JumpProcess, state: dict, t: float, dt: float, gen: np.random.Generator):
    """Advance every path by one Euler step in place.

    At most one jump per step, with probability ``λ_t dt``.  Returns
    ``(jumped, displacement, mark)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = state["x"].shape[0]
    lam = process.rate(state, t)
    _check_rate(lam, dt)
    jumped = gen.random(n) < lam * dt
    nu, mark = process.sample_jump(state, t, gen)
    z = gen.standard_normal(state["x"].shape)
    state["x"] += process.drift(state, t) * dt + process.scale(state, t) * math.sqrt(dt) * z
    j = np.nonzero(jumped)[0]
    if j.size:
        process.apply_jump(state, j, t + dt, nu[j], mark[j])
    return jumped, nu, mark


@dataclass
class Path:
    times: np.ndarray     # observation times, starting at 0
    states: np.ndarray    # (m, d) state right after each time
    jumps: np.ndarray     # bool per time
    marks: list = field(default_factory=list)
    horizon: float = 0.0


def simulate_path(process: JumpProcess, horizon: float, rng, dt: float | None = None,
                  max_jumps: int = 100_000) -> Path:
    """One trajectory on ``[0, horizon]``: exact when ``dt`` is None (pure-jump
    processes only), Euler with step ``dt`` otherwise."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    state = process.new_state(1)
    times, states, jumps, marks = [0.0], [state["x"][0].copy()], [False], [None]
    if dt is None:
        if not process.pure_jump:
            raise ValueError("exact simulation needs a pure-jump process")
        t = 0.0
        while True:
            c = float(process.rate_bound(state, np.array([t]), np.array([horizon]))[0])
            if c <= 0:
                break
            t += gen.standard_exponential() / c
            if t > horizon:
                break
            lam = float(process.rate(state, np.array([t]))[0])
            if lam > c * (1 + RATIO_SLACK):
                raise RuntimeError("dominating rate violated")
            if gen.random() * c < lam:
                nu, mark = process.sample_jump(state, np.array([t]), gen)
                process.apply_jump(state, np.array([0]), t, nu, mark)
                times.append(t)
                states.append(state["x"][0].copy())
                jumps.append(True)
                marks.append(np.asarray(mark)[0])
                if len(times) > max_jumps:
                    raise RuntimeError("jump cap exceeded")
    else:
        steps = int(round(horizon / dt))
        for i in range(steps):
            jumped, _, mark = euler_step(process, state, i * dt, dt, gen)
            times.append((i + 1) * dt)
            states.append(state["x"][0].copy())
            jumps.append(bool(jumped[0]))
            marks.append(np.asarray(mark)[0] if jumped[0] else None)
    return Path(np.asarray(times), np.asarray(states), np.asarray(jumps), marks, float(horizon))


def evaluate_ght(path: Path, ght: GHT) -> float:
    """Realization time of ``ght`` along a stored path (``inf`` if never)."""
    tr = ght.tracker(1)
    idx = np.array([0])
    for t, x in zip(path.times, path.states):
        tr.observe(idx, float(t), x[None, :])
        if np.isfinite(tr.time[0]):
            break
    return float(tr.time[0])


def hitting_intensity(process: JumpProcess, target, t: float, state: dict) -> np.ndarray:
    """Jump-hit intensity ``λ_t^T`` for a region, or for the current region
    of a hitting time on paths that have not moved from the start state."""
    if isinstance(target, GHT):
        tr = target.tracker(state["x"].shape[0])
        idx = np.arange(state["x"].shape[0])
        tr.observe(idx, 0.0, state["x"])
        out = np.zeros(idx.size)
        for region, sel in _group(tr.regions, tr.code(idx)):
            out[sel] = process.hit_rate(process.take(state, sel), t, region)
        return out
    if target.is_empty:
        return np.zeros(state["x"].shape[0])
    return process.hit_rate(state, t, target)


def _group(table, codes):
    for c in np.unique(codes):
        sel = np.nonzero(codes == c)[0]
        yield table[int(c)], sel


@dataclass
class BankResult:
    grid: np.ndarray
    times: np.ndarray          # (n, K) realization times, inf if none by the horizon
    logL_grid: np.ndarray      # (n, G)
    logL_at: np.ndarray        # (n, K) log-likelihood ratio at each realization
    comp_grid: np.ndarray | None  # (n, G) accumulated target hit intensity (TR)
    extra: dict = field(default_factory=dict)


class _Forbidden:
    """Per-path union of the current regions of the forbidden hitting times."""

    def __init__(self, trackers, policy):
        self.trackers = trackers
        self.policy = policy
        self.K = len(trackers)
        self._cache = {}

    def include(self, idx):
        K = self.K
        if self.policy == "none":
            return np.zeros((idx.size, K), dtype=bool)
        if self.policy == "ordered":
            done = np.stack([tr.realized(idx) for tr in self.trackers], axis=1)
            m = np.cumprod(done, axis=1).sum(axis=1)
            first = np.minimum(m + 1, K - 1)
            return np.arange(K)[None, :] >= first[:, None]
        kind, j = self.policy
        inc = np.zeros((idx.size, K), dtype=bool)
        inc[:, j] = True
        return inc

    def groups(self, idx):
        inc = self.include(idx)
        if not inc.any():
            yield EMPTY, np.arange(idx.size)
            return
        codes = np.stack([np.where(inc[:, k], tr.code(idx), 0)
                          for k, tr in enumerate(self.trackers)], axis=1)
        keys, inv = np.unique(codes, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        for g, key in enumerate(keys):
            kt = tuple(int(v) for v in key)
            region = self._cache.get(kt)
            if region is None:
                region = union_of([tr.regions[c] for tr, c in zip(self.trackers, kt)])
                self._cache[kt] = region
            yield region, np.nonzero(inv == g)[0]


def _hit_rate_grouped(process, state, t, groups, n):
    out = np.zeros(n)
    for region, sel in groups:
        if region.is_empty or sel.size == 0:
            continue
        sub = process.take(state, sel)
        tt = t[sel] if np.ndim(t) else t
        out[sel] = process.hit_rate(sub, tt, region)
    return out


def _step_hit_prob(process, state, t, dt, lam, region, sel, mean0, std, gen):
    """``P(X_{t+dt} in region | F_t)`` for one Euler step, averaging the jump
    indicator and the mark."""
    sub = process.take(state, sel)
    m0 = region.gaussian_mass(mean0[sel], std[sel])
    mj = process.jump_hit_mass(sub, t, region, mean0[sel], std[sel], gen)
    p = lam[sel] * dt
    return np.clip((1.0 - p) * m0 + p * mj, 0.0, 1.0)


def _conditioned_step(process, state, t, dt, lam, region, sel, mean0, std, gen):
    """Draw the step conditioned to miss ``region``: accept ``(J, mark)`` from
    the base law with probability ``1 - mass``, then condition the Gaussian
    increment.  Rows still rejected after the retry budget get ``ok=False``."""
    sub = process.take(state, sel)
    m = sel.size
    js = np.zeros(m, dtype=bool)
    nus = np.zeros((m, mean0.shape[1]))
    ms = None
    pending = np.ones(m, dtype=bool)
    for _ in range(REJECTION_TRIES):
        r = np.nonzero(pending)[0]
        if not r.size:
            break
        sr = process.take(sub, r)
        jr = gen.random(r.size) < lam[sel][r] * dt
        nr, mr = process.sample_jump(sr, t, gen)
        if ms is None:
            ms = np.zeros((m,) + np.shape(mr)[1:], dtype=np.asarray(mr).dtype)
        mu = mean0[sel][r] + jr[:, None] * nr
        mass = region.gaussian_mass(mu, std[sel][r])
        acc = gen.random(r.size) >= mass
        ra = r[acc]
        js[ra], nus[ra], ms[ra] = jr[acc], nr[acc], np.asarray(mr)[acc]
        pending[ra] = False
    ok = ~pending
    mu = mean0[sel] + js[:, None] * nus
    xs, ok2 = region.sample_outside(mu, std[sel], gen, REJECTION_TRIES)
    return xs, js, nus, ms, ok & ok2


def _lattice(grid, dt):
    k = np.rint(grid / dt).astype(np.int64)
    if np.any(np.abs(k * dt - grid) > 1e-9 * np.maximum(1.0, grid)):
        raise ValueError("grid point not on the Euler lattice")
    return k


def run_bank(process: JumpProcess, ghts, grid, n: int, gen: np.random.Generator,
             mode: str = "exact", dt: float = DEFAULT_DT, policy="none",
             tr_index: int | None = None, max_jumps: int = 100_000) -> BankResult:
    """Simulate ``n`` paths to ``grid[-1]`` under the base law (``policy
    "none"``) or under the proposal that forbids entry into the current
    regions selected by ``policy`` ("ordered" or ``("only", j)``).

    Records the log-likelihood ratio on the grid and at each realization,
    and with ``tr_index`` the accumulated hit intensity of that hitting time
    up to its realization.
    """
    grid = np.asarray(grid, dtype=float)
    if mode not in ("exact", "euler"):
        raise ValueError("mode must be 'exact' or 'euler'")
    if mode == "exact" and not process.pure_jump:
        raise ValueError("exact mode needs a pure-jump process; use mode='euler'")
    K = len(ghts)
    trackers = [g.tracker(n) for g in ghts]
    forb = _Forbidden(trackers, policy)
    target = None if tr_index is None else _Forbidden([trackers[tr_index]], ("only", 0))
    state = process.new_state(n)
    all_idx = np.arange(n)
    logL = np.zeros(n)
    comp = np.zeros(n) if tr_index is not None else None
    logL_grid = np.zeros((n, grid.size))
    comp_grid = np.zeros((n, grid.size)) if comp is not None else None
    logL_at = np.zeros((n, K))
    extra = {"rejection_failures": 0.0}

    def observe(idx, t, x):
        before = [np.isfinite(tr.time[idx]) for tr in trackers]
        for tr in trackers:
            tr.observe(idx, t, x)
        for k, tr in enumerate(trackers):
            new = ~before[k] & np.isfinite(tr.time[idx])
            logL_at[idx[new], k] = logL[idx[new]]

    observe(all_idx, 0.0, state["x"])
    if mode == "exact":
        _run_exact(process, grid, n, gen, dt, state, trackers, forb, target, logL, comp,
                   logL_grid, comp_grid, observe, max_jumps)
    else:
        _run_euler(process, grid, n, gen, dt, state, trackers, forb, target, logL, comp,
                   logL_grid, comp_grid, observe, extra)
    times = np.stack([tr.time for tr in trackers], axis=1)
    if policy != "none":
        forbidden_hit = _forbidden_realized(times, policy, K)
        if forbidden_hit:
            raise AssertionError("proposal realized a forbidden hitting time")
    return BankResult(grid, times, logL_grid, logL_at, comp_grid, extra)


def _forbidden_realized(times, policy, K) -> bool:
    done = np.isfinite(times)
    if policy == "ordered":
        prefix = np.cumprod(done, axis=1).astype(bool)
        return bool(done[:, K - 1].any() or (done & ~prefix).any())
    return bool(done[:, policy[1]].any())


def _run_exact(process, grid, n, gen, dt, state, trackers, forb, target, logL, comp,
               logL_grid, comp_grid, observe, max_jumps):
    horizon = grid[-1]
    bps = grid
    if not process.hit_rate_constant:
        bps = np.union1d(grid, np.arange(0.0, horizon, dt))
    bps = np.union1d(bps, [0.0])
    gpos = {float(g): i for i, g in enumerate(grid)}
    t = np.zeros(n)
    seg = np.zeros(n)
    const = process.hit_rate_constant

    def integrate(idx, t1):
        # trapezoid of the forbidden and target hit intensities on [seg, t1]
        sub = process.take(state, idx)
        span = t1 - seg[idx]
        pairs = [(forb, logL, -1.0)]
        if target is not None:
            pairs.append((target, comp, 1.0))
        for fb, acc, sign in pairs:
            groups = list(fb.groups(idx))
            if all(r.is_empty for r, _ in groups):
                continue
            a = _hit_rate_grouped(process, sub, seg[idx], groups, idx.size)
            b = a if const else _hit_rate_grouped(process, sub, t1, groups, idx.size)
            acc[idx] += sign * 0.5 * (a + b) * span
        seg[idx] = t1

    if grid[0] == 0.0:
        logL_grid[:, 0] = 0.0
    for a, b in zip(bps[:-1], bps[1:]):
        active = np.ones(n, dtype=bool)
        while active.any():
            idx = np.nonzero(active)[0]
            sub = process.take(state, idx)
            c = process.rate_bound(sub, t[idx], np.full(idx.size, b))
            e = gen.standard_exponential(idx.size)
            u = gen.random(idx.size)
            with np.errstate(divide="ignore"):
                cand = t[idx] + np.where(c > 0, e / np.where(c > 0, c, 1.0), np.inf)
            beyond = cand >= b
            if beyond.any():
                bi = idx[beyond]
                integrate(bi, np.full(bi.size, b))
                t[bi] = b
                active[bi] = False
            w = ~beyond
            if not w.any():
                continue
            wi = idx[w]
            tc = cand[w]
            sw = process.take(state, wi)
            lam = process.rate(sw, tc)
            ratio = lam / c[w]
            if np.any(ratio > 1 + RATIO_SLACK):
                raise RuntimeError("dominating rate violated")
            acc = u[w] < ratio
            t[wi] = tc
            ai = wi[acc]
            if not ai.size:
                continue
            ta = tc[acc]
            sa = process.take(state, ai)
            nu, mark = process.sample_jump(sa, ta, gen)
            landing = sa["x"] + nu
            blocked = np.zeros(ai.size, dtype=bool)
            for region, sel in forb.groups(ai):
                if not region.is_empty:
                    blocked[sel] = region.contains(landing[sel])
            ok = ~blocked
            ci = ai[ok]
            if ci.size:
                integrate(ci, ta[ok])
                process.apply_jump(state, ci, ta[ok], nu[ok], mark[ok])
                if np.any(state["N"][ci] > max_jumps):
                    raise RuntimeError("jump cap exceeded; the process may be explosive")
                observe(ci, ta[ok], state["x"][ci])
        j = gpos.get(float(b))
        if j is not None:
            logL_grid[:, j] = logL
            if comp is not None:
                comp_grid[:, j] = comp


def _run_euler(process, grid, n, gen, dt, state, trackers, forb, target, logL, comp,
               logL_grid, comp_grid, observe, extra):
    ks = _lattice(grid, dt)
    steps = int(ks[-1])
    at_step = {}
    for j, k in enumerate(ks):
        at_step.setdefault(int(k), []).append(j)
    all_idx = np.arange(n)
    sq = math.sqrt(dt)
    forbid_on = forb.policy != "none"

    def record(k):
        for j in at_step.get(k, []):
            logL_grid[:, j] = logL
            if comp is not None:
                comp_grid[:, j] = comp

    record(0)
    diffusive = process.has_diffusion
    for i in range(steps):
        t = i * dt
        lam = process.rate(state, t)
        _check_rate(lam, dt)
        jumped = gen.random(n) < lam * dt
        nu, mark = process.sample_jump(state, t, gen)
        x = state["x"]
        if diffusive:
            mean0 = x + process.drift(state, t) * dt
            std = process.scale(state, t) * sq
            mean = mean0 + jumped[:, None] * nu
            if comp is not None:
                for region, sel in target.groups(all_idx):
                    if not region.is_empty:
                        comp[sel] += _step_hit_prob(process, state, t, dt, lam, region, sel,
                                                    mean0, std, gen)
            new_x = mean + std * gen.standard_normal(x.shape)
            if forbid_on:
                for region, sel in forb.groups(all_idx):
                    if region.is_empty:
                        continue
                    p_hit = _step_hit_prob(process, state, t, dt, lam, region, sel, mean0, std, gen)
                    xs, js, nus, ms, ok = _conditioned_step(process, state, t, dt, lam, region,
                                                            sel, mean0, std, gen)
                    with np.errstate(divide="ignore"):
                        logL[sel] += np.where(ok, np.log1p(-np.minimum(p_hit, 1.0)), -np.inf)
                    # failed rows carry weight zero and stay put
                    xs[~ok] = x[sel][~ok]
                    js &= ok
                    new_x[sel] = xs
                    jumped[sel] = js
                    nu[sel] = nus
                    mark[sel] = ms
                    extra["rejection_failures"] += float((~ok & (p_hit < 1.0)).sum())
        else:
            new_x = x + jumped[:, None] * nu
            if comp is not None:
                for region, sel in target.groups(all_idx):
                    if not region.is_empty:
                        comp[sel] += dt * process.hit_rate(process.take(state, sel), t, region)
            if forbid_on:
                for region, sel in forb.groups(all_idx):
                    if region.is_empty:
                        continue
                    sub = process.take(state, sel)
                    lam_f = process.hit_rate(sub, t, region)
                    p_hit = dt * lam_f
                    with np.errstate(divide="ignore", invalid="ignore"):
                        p_jump = np.where(p_hit < 1, dt * (lam[sel] - lam_f) / (1 - p_hit), 0.0)
                        logL[sel] += np.log1p(-np.minimum(p_hit, 1.0))
                    jump_sel = gen.random(sel.size) < p_jump
                    nus, marks_s = nu[sel].copy(), np.array(mark[sel], copy=True)
                    bad = jump_sel & region.contains(x[sel] + nus)
                    for _ in range(REJECTION_TRIES):
                        if not bad.any():
                            break
                        r = np.nonzero(bad)[0]
                        nn, mm = process.sample_jump(process.take(sub, r), t, gen)
                        nus[r], marks_s[r] = nn, mm
                        bad[r] = region.contains(x[sel][r] + nn)
                    extra["rejection_failures"] += float(bad.sum())
                    jump_sel &= ~bad
                    jumped[sel] = jump_sel
                    nu[sel], mark[sel] = nus, marks_s
                    new_x[sel] = x[sel] + jump_sel[:, None] * nus
        # continuous part first, then the jump bookkeeping adds the displacement back
        state["x"] = new_x - jumped[:, None] * nu
        j = np.nonzero(jumped)[0]
        if j.size:
            process.apply_jump(state, j, t + dt, nu[j], mark[j])
        observe(all_idx, t + dt, state["x"])
        record(i + 1)
