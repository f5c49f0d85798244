"""Stochastic jump processes with batched state: drift, diagonal scale, jump
intensity, mark sampling and the intensity mass of jumps landing in a
region."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from .ght import GHT, After, Hit, MaxOf
from .regions import INNER_MC_DRAWS, Box, HalfSpace, Region, VertexSet, intervals_1d

__all__ = [
    "JumpProcess",
    "PoissonCounter",
    "MultiPoisson",
    "CtmcWalk",
    "Merton",
    "DriftExit",
    "GaussHawkes",
    "make_example_process",
    "canonical_ghts",
    "process_to_dict",
    "process_from_dict",
    "GAUSS_HAWKES_REGIONS",
    "MERTON_BARRIERS",
]

# nodes for integrating one-dimensional mark laws
QUAD_NODES = 48

# Gauss-Hermite rule over a standard normal increment; the integrands it
# sees are smooth, so few nodes suffice
_z, _w = np.polynomial.hermite_e.hermegauss(16)
_INCREMENT_RULE = (_z, _w / _w.sum())

MERTON_BARRIERS = (1.25, 1.5, 2.0, 3.0, 5.0, 7.0, 10.0)

GAUSS_HAWKES_REGIONS = (
    Box([0.5, 0.5, 0.5], [None, None, None]),
    Box([None, 0.5, 0.5], [-0.5, None, None]),
    Box([None, None, 0.5], [-0.5, -0.5, None]),
    Box([0.5, None, 0.5], [None, -0.5, None]),
    Box([0.5, None, None], [None, -0.5, -0.5]),
)


class JumpProcess:
    """Batched process interface; ``state`` is a dict of arrays whose first
    axis runs over paths and always holds ``x`` (n, d) and ``N`` (n,)."""

    name = "process"
    dim = 1
    pure_jump = True
    has_diffusion = False
    hit_rate_constant = True    # λ^T constant between jumps
    bound_window = math.inf

    def __init__(self, x0):
        self.x0 = np.asarray(x0, dtype=float).reshape(-1)
        self.dim = self.x0.size

    def new_state(self, n: int) -> dict:
        return {"x": np.tile(self.x0, (n, 1)), "N": np.zeros(n, dtype=np.int64)}

    def rate(self, state, t) -> np.ndarray:
        raise NotImplementedError

    def rate_bound(self, state, t0, t1) -> np.ndarray:
        raise NotImplementedError

    def drift(self, state, t) -> np.ndarray:
        return np.zeros_like(state["x"])

    def scale(self, state, t) -> np.ndarray:
        return np.zeros_like(state["x"])

    def sample_jump(self, state, t, gen):
        """``(displacement (n, d), mark (n, ...))`` for a jump at ``t``."""
        raise NotImplementedError

    def apply_jump(self, state, idx, t, nu, mark) -> None:
        state["x"][idx] += nu
        state["N"][idx] += 1

    def hit_rate(self, state, t, region: Region) -> np.ndarray:
        """Intensity mass of jumps at ``t`` landing in ``region``."""
        raise NotImplementedError(f"{self.name} has no mark-level hit rate")

    def mark_quadrature(self):
        """``(marks, weights)`` integrating over the mark law, or None."""
        return None

    def jump_for_mark(self, state, t, mark) -> np.ndarray:
        raise NotImplementedError

    def jump_hit_mass(self, state, t, region: Region, mean0, std, gen) -> np.ndarray:
        """``E_mark[P(mean0 + ν(mark) + std·Z in region)]`` per row: quadrature
        over the mark when available, else an inner Monte Carlo average."""
        rule = self.mark_quadrature()
        out = np.zeros(mean0.shape[0])
        if rule is not None:
            for mk, w in zip(*rule):
                out += w * region.gaussian_mass(mean0 + self.jump_for_mark(state, t, mk), std)
            return np.clip(out, 0.0, 1.0)
        for _ in range(INNER_MC_DRAWS):
            nu, _ = self.sample_jump(state, t, gen)
            out += region.gaussian_mass(mean0 + nu, std)
        return out / INNER_MC_DRAWS

    @staticmethod
    def take(state, idx) -> dict:
        return {k: v[idx] for k, v in state.items()}

    @staticmethod
    def put(state, idx, sub) -> None:
        for k, v in sub.items():
            if v.ndim > 1 and v.shape[1] != state[k].shape[1]:
                state[k] = _widen(state[k], v.shape[1])
            state[k][idx] = v

    def params(self) -> dict:
        raise NotImplementedError


def _widen(a, width):
    pad_shape = (a.shape[0], width - a.shape[1]) + a.shape[2:]
    fill = np.inf if a.dtype.kind == "f" and a.ndim == 2 else 0.0
    return np.concatenate([a, np.full(pad_shape, fill, dtype=a.dtype)], axis=1)


class PoissonCounter(JumpProcess):
    """Counting process with constant rate and jump size."""

    name = "poisson"

    def __init__(self, rate: float = 1.0, jump: float = 1.0, x0: float = 0.0):
        if rate < 0:
            raise ValueError("rate must be nonnegative")
        super().__init__([x0])
        self.lam = float(rate)
        self.jump = float(jump)

    def rate(self, state, t):
        return np.full(state["x"].shape[0], self.lam)

    def rate_bound(self, state, t0, t1):
        return self.rate(state, t0)

    def sample_jump(self, state, t, gen):
        n = state["x"].shape[0]
        return np.full((n, 1), self.jump), np.zeros(n, dtype=np.int64)

    def hit_rate(self, state, t, region):
        return self.lam * region.contains(state["x"] + self.jump)

    def params(self):
        return {"rate": self.lam, "jump": self.jump, "x0": float(self.x0[0])}


class MultiPoisson(JumpProcess):
    """Independent unit-jump counters, one coordinate per rate."""

    name = "multi_poisson"

    def __init__(self, rates=(1.0, 1.0)):
        r = np.asarray(rates, dtype=float)
        if r.ndim != 1 or r.size == 0 or np.any(r < 0):
            raise ValueError("rates must be a nonempty nonnegative vector")
        super().__init__(np.zeros(r.size))
        self.rates = r

    def rate(self, state, t):
        return np.full(state["x"].shape[0], self.rates.sum())

    def rate_bound(self, state, t0, t1):
        return self.rate(state, t0)

    def sample_jump(self, state, t, gen):
        n = state["x"].shape[0]
        k = np.minimum(np.searchsorted(np.cumsum(self.rates) / self.rates.sum(), gen.random(n),
                                       side="right"), self.dim - 1)
        nu = np.zeros((n, self.dim))
        nu[np.arange(n), k] = 1.0
        return nu, k

    def hit_rate(self, state, t, region):
        out = np.zeros(state["x"].shape[0])
        for k, r in enumerate(self.rates):
            y = state["x"].copy()
            y[:, k] += 1.0
            out += r * region.contains(y)
        return out

    def params(self):
        return {"rates": self.rates.tolist()}


class CtmcWalk(JumpProcess):
    """Continuous-time walk on vertices ``0..V-1``: jumps at rate ``mu`` to
    ``v`` with probability ``P[x, v]`` (self-jumps allowed)."""

    name = "ctmc_cover"

    def __init__(self, P, mu: float = 1.0, start: int = 0):
        P = np.asarray(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must be probability vectors")
        if mu <= 0:
            raise ValueError("mu must be positive")
        super().__init__([float(start)])
        self.P = P
        self.mu = float(mu)
        self.cdf = np.cumsum(P, axis=1)

    @property
    def n_vertices(self):
        return self.P.shape[0]

    def rate(self, state, t):
        return np.full(state["x"].shape[0], self.mu)

    def rate_bound(self, state, t0, t1):
        return self.rate(state, t0)

    def sample_jump(self, state, t, gen):
        cur = state["x"][:, 0].astype(np.int64)
        u = gen.random(cur.size)
        v = np.minimum((self.cdf[cur] <= u[:, None] * self.cdf[cur, -1:]).sum(axis=1),
                       self.n_vertices - 1)
        return (v - cur)[:, None].astype(float), v

    def hit_rate(self, state, t, region):
        cur = state["x"][:, 0].astype(np.int64)
        n, V = cur.size, self.n_vertices
        cand = np.tile(np.arange(V, dtype=float), n)[:, None]
        inside = region.contains(cand).reshape(n, V)
        return self.mu * np.sum(self.P[cur] * inside, axis=1)

    def params(self):
        return {"P": self.P.tolist(), "mu": self.mu, "start": int(self.x0[0])}


class Merton(JumpProcess):
    """Jump diffusion with lognormal multiplicative jumps.

    ``drift_form="literal"`` uses drift ``(r - σ²/2 - λk)x``;
    ``"risk_neutral"`` uses ``(r - λk)x`` so that ``E[X_t] = X_0 e^{rt}``.
    """

    name = "merton"
    pure_jump = False
    has_diffusion = True
    hit_rate_constant = False

    def __init__(self, x0: float = 1.0, r: float = 0.02, mu: float = 0.0, delta: float = 0.3,
                 lam: float = 1.0, sigma: float = 0.2, drift_form: str = "literal"):
        if sigma < 0 or delta < 0 or lam < 0 or x0 <= 0:
            raise ValueError("need x0 > 0 and nonnegative sigma, delta, lam")
        if drift_form not in ("literal", "risk_neutral"):
            raise ValueError("drift_form must be 'literal' or 'risk_neutral'")
        super().__init__([x0])
        self.r, self.mu, self.delta, self.lam, self.sigma = map(float, (r, mu, delta, lam, sigma))
        self.drift_form = drift_form
        self.k = math.exp(mu + 0.5 * delta ** 2) - 1.0
        corr = 0.5 * self.sigma ** 2 if drift_form == "literal" else 0.0
        self.a = self.r - corr - self.lam * self.k
        self.has_diffusion = self.sigma > 0 or self.a != 0

    def rate(self, state, t):
        return np.full(state["x"].shape[0], self.lam)

    def drift(self, state, t):
        return self.a * state["x"]

    def scale(self, state, t):
        return self.sigma * np.abs(state["x"])

    def sample_jump(self, state, t, gen):
        n = state["x"].shape[0]
        y = np.exp(self.mu + self.delta * gen.standard_normal(n))
        return (y - 1.0)[:, None] * state["x"], y

    def mark_quadrature(self):
        z, w = np.polynomial.hermite_e.hermegauss(QUAD_NODES)
        return np.exp(self.mu + self.delta * z), w / w.sum()

    def jump_hit_mass(self, state, t, region, mean0, std, gen):
        # integrate the lognormal landing probability over the Gaussian
        # increment, where the integrand is smooth
        spans = intervals_1d(region)
        x = state["x"][:, 0]
        if spans is None or self.delta == 0 or np.any(x <= 0):
            return super().jump_hit_mass(state, t, region, mean0, std, gen)
        z, w = _INCREMENT_RULE
        W = mean0[:, :1] + std[:, :1] * z[None, :]          # (n, q)
        xx = x[:, None]

        def below(v):
            # P(Y <= 1 + (v - W) / x)
            q = 1.0 + (v - W) / xx
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where(q > 0, ndtr((np.log(np.where(q > 0, q, 1.0)) - self.mu) / self.delta), 0.0)

        out = np.zeros(x.size)
        for lo, hi in spans:
            top = np.ones_like(W) if hi == math.inf else below(hi)
            bot = np.zeros_like(W) if lo == -math.inf else below(lo)
            out += (top - bot) @ w
        return np.clip(out, 0.0, 1.0)

    def jump_for_mark(self, state, t, mark):
        return (mark - 1.0) * state["x"]

    def mean(self, t: float) -> float:
        """Analytic ``E[X_t]``."""
        return float(self.x0[0] * math.exp((self.a + self.lam * self.k) * t))

    def params(self):
        return {"x0": float(self.x0[0]), "r": self.r, "mu": self.mu, "delta": self.delta,
                "lam": self.lam, "sigma": self.sigma, "drift_form": self.drift_form}


class DriftExit(JumpProcess):
    """Geometric Brownian motion with drift ``b t`` and downward jumps
    ``-U x`` at self-correcting rate ``exp(t - N)``."""

    name = "drift_exit"
    pure_jump = False
    has_diffusion = True
    hit_rate_constant = False

    def __init__(self, b: float = 1.0, x0: float = 1.0):
        if b < 0:
            raise ValueError("b must be nonnegative")
        super().__init__([x0])
        self.b = float(b)

    def rate(self, state, t):
        return np.exp(t - state["N"])

    def drift(self, state, t):
        return self.b * t * state["x"]

    def scale(self, state, t):
        return np.abs(state["x"])

    def sample_jump(self, state, t, gen):
        u = gen.random(state["x"].shape[0])
        return -u[:, None] * state["x"], u

    def mark_quadrature(self):
        z, w = np.polynomial.legendre.leggauss(QUAD_NODES)
        return 0.5 * (z + 1.0), 0.5 * w

    def jump_hit_mass(self, state, t, region, mean0, std, gen):
        # landing in [lo, hi] means U in an interval linear in the Gaussian
        # increment; E[clip(N(m, s^2), 0, 1)] has a closed form
        spans = intervals_1d(region)
        x = state["x"][:, 0]
        if spans is None or np.any(x <= 0):
            return super().jump_hit_mass(state, t, region, mean0, std, gen)
        m0, s = mean0[:, 0], std[:, 0] / x

        def ecdf(v):
            # E[clip((W - v) / x, 0, 1)] with W ~ N(m0, std^2)
            if v == -math.inf:
                return np.ones_like(x)
            if v == math.inf:
                return np.zeros_like(x)
            return _expected_clip((m0 - v) / x, s)

        out = np.zeros(x.size)
        for lo, hi in spans:
            out += ecdf(lo) - ecdf(hi)
        return np.clip(out, 0.0, 1.0)

    def jump_for_mark(self, state, t, mark):
        return -mark * state["x"]

    def params(self):
        return {"b": self.b, "x0": float(self.x0[0])}


class GaussHawkes(JumpProcess):
    """Self-exciting process with 3-d Gaussian marks; the state is the most
    recent mark.  Each past event ``(S, M)`` adds ``e^{-(t-S)}`` intensity
    spread as ``N(M, (t-S)^2 I)``; the variance is floored at ``var_floor``.
    """

    name = "gauss_hawkes"
    hit_rate_constant = False

    def __init__(self, mu: float = 1.0, var_floor: float = 1e-6, dim: int = 3):
        if mu <= 0 or var_floor <= 0:
            raise ValueError("mu and var_floor must be positive")
        super().__init__(np.zeros(dim))
        self.mu = float(mu)
        self.var_floor = float(var_floor)
        self.std_floor = math.sqrt(var_floor)

    def new_state(self, n):
        s = super().new_state(n)
        s["ht"] = np.full((n, 8), np.inf)
        s["hm"] = np.zeros((n, 8, self.dim))
        s["floored"] = np.zeros(n, dtype=np.int64)
        return s

    def _weights(self, state, t):
        t = np.asarray(t, dtype=float)
        age = (t.reshape(-1, 1) if t.ndim else t) - state["ht"]
        with np.errstate(over="ignore", invalid="ignore"):
            w = np.where(np.isfinite(state["ht"]), np.exp(-age), 0.0)
        return w, age

    def rate(self, state, t):
        w, _ = self._weights(state, t)
        return self.mu + w.sum(axis=1)

    def rate_bound(self, state, t0, t1):
        return self.rate(state, t0)

    def _std(self, age, state, rows=None):
        small = age < self.std_floor
        return np.maximum(age, self.std_floor), small

    def sample_jump(self, state, t, gen):
        n = state["x"].shape[0]
        w, age = self._weights(state, t)
        probs = np.concatenate([np.full((n, 1), self.mu), w], axis=1)
        cdf = np.cumsum(probs, axis=1)
        j = np.minimum((cdf <= gen.random(n)[:, None] * cdf[:, -1:]).sum(axis=1), probs.shape[1] - 1)
        z = gen.standard_normal((n, self.dim))
        base = j == 0
        mark = z.copy()
        if (~base).any():
            r = np.nonzero(~base)[0]
            comp = j[r] - 1
            std, small = self._std(age[r, comp], state)
            state["floored"][r] += small
            mark[r] = state["hm"][r, comp] + std[:, None] * z[r]
        return mark - state["x"], mark

    def apply_jump(self, state, idx, t, nu, mark):
        super().apply_jump(state, idx, t, nu, mark)
        pos = state["N"][idx] - 1
        width = state["ht"].shape[1]
        if pos.size and pos.max() >= width:
            new = max(2 * width, int(pos.max()) + 1)
            state["ht"] = _widen(state["ht"], new)
            state["hm"] = _widen(state["hm"], new)
        state["ht"][idx, pos] = t
        state["hm"][idx, pos] = mark

    def hit_rate(self, state, t, region):
        n = state["x"].shape[0]
        out = self.mu * region.gaussian_mass(np.zeros((n, self.dim)), np.ones((n, self.dim)))
        w, age = self._weights(state, t)
        live = w > 0
        if live.any():
            r, c = np.nonzero(live)
            std, _ = self._std(age[r, c], state)
            mass = region.gaussian_mass(state["hm"][r, c], np.repeat(std[:, None], self.dim, axis=1))
            out += np.bincount(r, weights=w[r, c] * mass, minlength=n)
        return out

    def params(self):
        return {"mu": self.mu, "var_floor": self.var_floor, "dim": self.dim}


def _expected_clip(m, s):
    """``E[min(max(W, 0), 1)]`` for ``W ~ N(m, s^2)``."""
    m = np.asarray(m, dtype=float)
    s = np.asarray(s, dtype=float)
    out = np.clip(m, 0.0, 1.0)
    pos = s > 0
    if pos.any():
        mm, ss = m[pos], s[pos]
        a, b = -mm / ss, (1.0 - mm) / ss
        pdf = lambda v: np.exp(-0.5 * v * v) / math.sqrt(2 * math.pi)
        inner = mm * (ndtr(b) - ndtr(a)) + ss * (pdf(a) - pdf(b))
        out[pos] = inner + ndtr(-b)
    return out


def _softmax_rows(z, temperature):
    e = np.exp((z - z.max(axis=1, keepdims=True)) / temperature)
    return e / e.sum(axis=1, keepdims=True)


def canonical_ghts(p: JumpProcess, c: float | None = None) -> dict:
    """The named hitting times that go with each example process."""
    if isinstance(p, Merton):
        return {f"c={b:g}": Hit(HalfSpace(0, b * p.x0[0], "ge")) for b in MERTON_BARRIERS}
    if isinstance(p, DriftExit):
        c = 3.0 if c is None else float(c)
        if c <= 0:
            raise ValueError("c must be positive")
        return {f"exit c={c:g}": After(Hit(HalfSpace(0, c, "ge")), HalfSpace(0, c, "lt"))}
    if isinstance(p, CtmcWalk):
        return {"cover": MaxOf([Hit(VertexSet([v])) for v in range(p.n_vertices)])}
    if isinstance(p, GaussHawkes):
        return {f"R{i + 1}": Hit(r) for i, r in enumerate(GAUSS_HAWKES_REGIONS)}
    if isinstance(p, PoissonCounter):
        return {"first jump": Hit(HalfSpace(0, p.x0[0] + p.jump, "ge" if p.jump > 0 else "lt"))}
    if isinstance(p, MultiPoisson):
        return {f"coord {k}": Hit(HalfSpace(k, p.x0[k] + 1.0, "ge")) for k in range(p.dim)}
    return {}


def make_example_process(name: str, **params):
    """``(process, canonical hitting times)`` for a named example."""
    if name == "merton":
        p = Merton(**params)
    elif name == "drift_exit":
        c = params.pop("c", None)
        p = DriftExit(**params)
        return p, canonical_ghts(p, c)
    elif name == "ctmc_cover":
        V = int(params.pop("n_vertices", 6))
        temp = float(params.pop("temperature", 1.0))
        seed = int(params.pop("seed", 0))
        mu = float(params.pop("mu", 1.0))
        P = params.pop("P", None)
        start = int(params.pop("start", 0))
        if params:
            raise ValueError(f"unknown parameters: {sorted(params)}")
        if V < 1 or temp <= 0:
            raise ValueError("need n_vertices >= 1 and temperature > 0")
        if P is None:
            z = np.random.default_rng(seed).random((V, V))
            P = _softmax_rows(z, temp)
        p = CtmcWalk(P, mu, start)
    elif name == "gauss_hawkes":
        p = GaussHawkes(**params)
    elif name == "poisson":
        p = PoissonCounter(**params)
    elif name == "multi_poisson":
        p = MultiPoisson(**params)
    else:
        raise ValueError(f"unknown example process {name!r}")
    return p, canonical_ghts(p)


_CLASSES = {c.name: c for c in (PoissonCounter, MultiPoisson, CtmcWalk, Merton, DriftExit, GaussHawkes)}


def process_to_dict(p: JumpProcess) -> dict:
    return {"schema": "qprob.process/1", "name": p.name, "params": p.params()}


def process_from_dict(d: dict) -> JumpProcess:
    extra = set(d) - {"schema", "name", "params"}
    if extra:
        raise ValueError(f"unknown process keys: {sorted(extra)}")
    if d.get("schema", "qprob.process/1") != "qprob.process/1":
        raise ValueError(f"unsupported process schema {d.get('schema')!r}")
    name = d.get("name")
    params = dict(d.get("params", {}))
    if name == "ctmc_cover" and "P" in params:
        return CtmcWalk(params["P"], params.get("mu", 1.0), params.get("start", 0))
    if name in ("ctmc_cover", "drift_exit"):
        params.pop("c", None)
        return make_example_process(name, **params)[0]
    if name not in _CLASSES:
        raise ValueError(f"unknown process {name!r}")
    try:
        return _CLASSES[name](**params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {name}: {exc}") from None
