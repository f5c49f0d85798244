"""Experiment harness: JSON configs in, flat CSV out.

Usage: ``qprob <command> CONFIG [--out PATH] [--workers N] [--wall-time]``.

Every config is a JSON object with ``"schema": "qprob.experiment/1"``;
unknown keys are rejected.  Output rows share one schema
(experiment, x, method, mean, var, se, n) so that runs can be joined; the
optional wall-time column is off by default to keep reruns byte-identical.
Exit status is 0 on success, 2 for configuration errors and 3 for numeric
failures, with a JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import censoring, discrete_model, hitting_est, mtpp, mtpp_query
from .discrete_query import (coverage_beam_search, exact_enumerate, hybrid_estimate,
                             importance_estimate, importance_samples, naive_estimate,
                             naive_samples, query_from_dict, surrogate_ground_truth,
                             tail_splitting_beam_search)
from .estcore import EstimateSummary, RngStream, relative_efficiency
from .jump import (canonical_ghts, ght_from_dict, make_example_process, process_from_dict,
                   process_to_dict)

SCHEMA = "qprob.experiment/1"
HEADER = ["experiment", "x", "method", "mean", "var", "se", "n"]
EFF_HEADER = ["experiment", "x", "a", "b", "eff", "label"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    def __init__(self, message, file=None, field=None):
        super().__init__(message)
        self.file = file
        self.field = field


@dataclass
class Row:
    x: object
    method: str
    mean: float
    var: float
    se: float
    n: object
    biased: bool = False


def fmt(v) -> str:
    """Shortest round-trip text; ``inf`` and ``na`` are the only sentinels."""
    if v is None:
        return "na"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "na"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _row(x, s: EstimateSummary, method=None, biased=False) -> Row:
    return Row(x, method or s.method, s.mean, s.var, s.se, s.n, biased)


# ---------------------------------------------------------------------------
# config handling


class Config:
    """Validated view of one config file."""

    def __init__(self, doc: dict, path: Path | None, allowed: set, required: set):
        self.doc = doc
        self.path = path
        self.base = path.parent if path is not None else Path.cwd()
        extra = set(doc) - allowed - COMMON_KEYS
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", self.file, sorted(extra)[0])
        missing = required - set(doc)
        if missing:
            raise ConfigError(f"missing keys {sorted(missing)}", self.file, sorted(missing)[0])

    @property
    def file(self):
        return str(self.path) if self.path is not None else "<inline>"

    def get(self, key, default=None):
        return self.doc.get(key, default)

    def int(self, key, default=None, minimum=None):
        v = self.doc.get(key, default)
        if v is None:
            raise ConfigError(f"missing '{key}'", self.file, key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
            raise ConfigError(f"'{key}' must be an integer", self.file, key)
        if minimum is not None and v < minimum:
            raise ConfigError(f"'{key}' must be at least {minimum}", self.file, key)
        return int(v)

    def float(self, key, default=None, positive=False):
        v = self.doc.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"'{key}' must be a number", self.file, key)
        if positive and not v > 0:
            raise ConfigError(f"'{key}' must be positive", self.file, key)
        return float(v)

    def methods(self, allowed, default):
        ms = self.doc.get("methods", default)
        if isinstance(ms, str):
            ms = [ms]
        bad = [m for m in ms if m not in allowed]
        if bad or not ms:
            raise ConfigError(f"methods must be drawn from {sorted(allowed)}", self.file, "methods")
        return list(ms)

    def grid(self, key="grid"):
        g = self.doc.get(key)
        if isinstance(g, dict):
            extra = set(g) - {"start", "stop", "num"}
            if extra:
                raise ConfigError(f"unknown grid keys {sorted(extra)}", self.file, key)
            try:
                g = np.linspace(float(g["start"]), float(g["stop"]), int(g["num"]))
            except KeyError as exc:
                raise ConfigError("grid needs start, stop and num", self.file, key) from exc
        try:
            arr = np.asarray(g, dtype=float).reshape(-1)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"'{key}' must be a list of times", self.file, key) from exc
        if arr.size == 0 or np.any(np.diff(arr) <= 0) or np.any(arr < 0):
            raise ConfigError(f"'{key}' must be nonnegative and increasing", self.file, key)
        return arr

    def load(self, key):
        """Inline object, or a path (relative to the config file) to JSON."""
        v = self.doc.get(key)
        if isinstance(v, dict) or isinstance(v, list):
            return v
        if isinstance(v, str):
            p = (self.base / v) if not os.path.isabs(v) else Path(v)
            try:
                return json.loads(p.read_text())
            except FileNotFoundError:
                raise ConfigError(f"file not found: {p}", self.file, key) from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: {exc}", self.file, key) from None
        raise ConfigError(f"'{key}' must be an object or a file path", self.file, key)

    def build(self, key, fn):
        doc = self.load(key)
        try:
            return fn(doc)
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid {key}: {exc}", self.file, key) from None

    def stream(self, label):
        return RngStream(self.int("seed", 0, minimum=0), 0).child(self.get("id", label))


COMMON_KEYS = {"schema", "command", "id", "seed", "output"}


def _discrete_model(doc):
    fam = doc.get("family", "markov")
    if fam == "uniform":
        extra = set(doc) - {"schema", "family", "vocab_size", "order"}
        if extra:
            raise ValueError(f"unknown keys {sorted(extra)}")
        V, order = int(doc["vocab_size"]), int(doc.get("order", 1))
        return discrete_model.MarkovModel(order, np.full((V + 1,) * order + (V,), 1.0 / V))
    if fam != "markov":
        raise ValueError(f"unknown discrete model family '{fam}'")
    extra = set(doc) - {"schema", "family", "order", "vocab_size", "table", "initial"}
    if extra:
        raise ValueError(f"unknown keys {sorted(extra)}")
    return discrete_model.markov_from_dict(doc)


def _history(cfg, key="history"):
    h = cfg.get(key, [])
    if not isinstance(h, list):
        raise ConfigError("history must be a list", cfg.file, key)
    return [int(v) for v in h]


def _marks(cfg, key):
    v = cfg.get(key)
    if isinstance(v, int):
        v = [v]
    if not isinstance(v, list) or not v:
        raise ConfigError(f"'{key}' must be a nonempty list of marks", cfg.file, key)
    return [int(k) for k in v]


def _sequence(cfg, key):
    if cfg.get(key) is None:
        return None
    return cfg.build(key, mtpp.sequence_from_dict)


def _process_and_ghts(cfg):
    doc = cfg.load("process")
    if "schema" in doc:
        proc = cfg.build("process", process_from_dict)
        canon = canonical_ghts(proc)
    else:
        extra = set(doc) - {"name", "params"}
        if extra:
            raise ConfigError(f"unknown process keys {sorted(extra)}", cfg.file, "process")
        try:
            proc, canon = make_example_process(doc.get("name"), **dict(doc.get("params", {})))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid process: {exc}", cfg.file, "process") from None
    return proc, canon


def _ght(cfg, canon, key="ght"):
    v = cfg.get(key)
    if isinstance(v, str) and v in canon:
        return canon[v]
    if v is None and len(canon) == 1:
        return next(iter(canon.values()))
    return cfg.build(key, ght_from_dict)


def _ghts(cfg, canon, key="ghts"):
    v = cfg.get(key)
    if not isinstance(v, list) or not v:
        raise ConfigError(f"'{key}' must be a nonempty list", cfg.file, key)
    out = []
    for i, item in enumerate(v):
        if isinstance(item, str) and item in canon:
            out.append(canon[item])
        elif isinstance(item, dict):
            try:
                out.append(ght_from_dict(item))
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"invalid {key}[{i}]: {exc}", cfg.file, key) from None
        else:
            raise ConfigError(f"unknown hitting time {item!r}", cfg.file, key)
    return out


# ---------------------------------------------------------------------------
# commands; each takes (cfg, workers) and returns rows


def cmd_query_discrete(cfg, workers):
    model = cfg.build("model", _discrete_model)
    query = cfg.build("query", query_from_dict)
    hist = _history(cfg)
    methods = cfg.methods({"exact", "enumerate", "is", "naive", "hybrid"}, ["exact"])
    rows = []
    for m in methods:
        if m == "exact":
            v = discrete_model.markov_query_exact(model, query, hist)
            rows.append(Row("", "exact", v, 0.0, 0.0, None))
        elif m == "enumerate":
            v = exact_enumerate(model, query, hist)
            rows.append(Row("", "enumerate", v, 0.0, 0.0, None))
        else:
            n = cfg.int("n", minimum=1)
            rng = cfg.stream("query-discrete").child(m)
            if m == "is":
                s = importance_estimate(model, query, n, rng, hist, workers)
            elif m == "naive":
                s = naive_estimate(model, query, n, rng, hist, workers)
            else:
                s = hybrid_estimate(model, query, n, cfg.int("cap", 10_000, 1), rng, hist, workers)
            rows.append(_row("", s, m))
    return rows


def cmd_beam(cfg, workers):
    model = cfg.build("model", _discrete_model)
    query = cfg.build("query", query_from_dict)
    variant = cfg.get("variant", "coverage")
    cap = cfg.int("cap", 10_000, 1)
    rows = []
    for b, block in enumerate(query.blocks):
        if variant == "coverage":
            bs = coverage_beam_search(model, block, cfg.float("alpha", 0.5, positive=True),
                                      cap=cap, history=_history(cfg))
        elif variant == "tail":
            bs = tail_splitting_beam_search(model, block, cap, _history(cfg))
        else:
            raise ConfigError("variant must be 'coverage' or 'tail'", cfg.file, "variant")
        rows.append(Row(b, "lower_bound", bs.lower_bound, 0.0, 0.0, len(bs.sequences)))
        rows.append(Row(b, "coverage", bs.coverage, 0.0, 0.0, len(bs.sequences)))
        rows.append(Row(b, "cap_hit", float(bs.cap_hit), 0.0, 0.0, len(bs.sequences)))
    return rows


def cmd_hybrid(cfg, workers):
    model = cfg.build("model", _discrete_model)
    query = cfg.build("query", query_from_dict)
    s = hybrid_estimate(model, query, cfg.int("n", minimum=1), cfg.int("cap", 10_000, 1),
                        cfg.stream("hybrid"), _history(cfg), workers)
    return [_row("", s, "hybrid")]


def _mtpp_model(cfg):
    return cfg.build("model", mtpp.model_from_dict)


def cmd_hit_cdf(cfg, workers):
    model = _mtpp_model(cfg)
    A = _marks(cfg, "A")
    grid = cfg.grid()
    hist = _sequence(cfg, "history")
    n = cfg.int("n", minimum=1)
    rows = []
    for m in cfg.methods({"is", "naive"}, ["is"]):
        fn = mtpp_query.hitting_time_cdf_estimate if m == "is" else mtpp_query.hitting_time_cdf_naive
        out = fn(model, A, grid, n, cfg.stream("hit-cdf").child(m), hist, workers)
        rows += [_row(float(t), s, m) for t, s in zip(grid, out)]
    return rows


def cmd_nth_mark(cfg, workers):
    model = _mtpp_model(cfg)
    A = _marks(cfg, "A")
    idx = cfg.get("n_idx", [1])
    idx = [idx] if isinstance(idx, int) else idx
    hist = _sequence(cfg, "history")
    n = cfg.int("n", minimum=1)
    rows = []
    for m in cfg.methods({"is", "literal", "complement", "naive"}, ["is"]):
        for k in idx:
            rng = cfg.stream("nth-mark").child(m, int(k))
            if m == "naive":
                s = mtpp_query.nth_mark_naive(model, A, int(k), n, rng, hist, workers=workers)
            else:
                s = mtpp_query.nth_mark_estimate(model, A, int(k), n, rng, hist,
                                                 integrate_last=(m == "is"),
                                                 complement=(m == "complement"), workers=workers)
            rows.append(_row(int(k), s, m))
    return rows


def cmd_a_before_b(cfg, workers):
    model = _mtpp_model(cfg)
    A, B = _marks(cfg, "A"), _marks(cfg, "B")
    hist = _sequence(cfg, "history")
    n = cfg.int("n", minimum=1)
    rows = []
    for m in cfg.methods({"is", "naive"}, ["is"]):
        rng = cfg.stream("a-before-b").child(m)
        if m == "is":
            tau = cfg.get("tau")
            s = mtpp_query.a_before_b_estimate(model, A, B, n, rng, cfg.float("eps", 0.01, True),
                                               None if tau is None else float(tau), hist,
                                               workers=workers)
            rows.append(_row("", s, "is", biased=True))
        else:
            s = mtpp_query.a_before_b_naive(model, A, B, n, rng, cfg.float("tau", None, True),
                                            hist, workers)
            rows.append(_row("", s, "naive"))
    return rows


def _schedule(doc):
    extra = set(doc) - {"edges", "censored"}
    if extra:
        raise ValueError(f"unknown schedule keys {sorted(extra)}")
    return censoring.CensorSchedule(doc["edges"], doc["censored"])


def cmd_censor_ll(cfg, workers):
    model = _mtpp_model(cfg)
    sched = cfg.build("schedule", _schedule)
    obs = cfg.build("observed", mtpp.sequence_from_dict)
    M = cfg.int("M", 128, 1)
    rows = []
    for m in cfg.methods({"censored", "baseline", "marginal"}, ["censored", "baseline"]):
        rng = cfg.stream("censor-ll").child(m)
        if m == "censored":
            v = censoring.censored_log_likelihood(model, sched, obs, M=M, rng=rng,
                                                  points=cfg.int("points", 1024, 2))
        elif m == "marginal":
            v = censoring.marginal_log_likelihood(model, sched, obs, M=M, rng=rng)
        else:
            v = censoring.baseline_log_likelihood(model, sched, obs)
        rows.append(Row("", m, v, None, None, M if m != "baseline" else None, m != "baseline"))
    return rows


def _hit_curves(cfg, workers, ght=None):
    proc, canon = _process_and_ghts(cfg)
    g = ght if ght is not None else _ght(cfg, canon)
    methods = cfg.methods(set(hitting_est.METHODS), list(hitting_est.METHODS))
    mode = cfg.get("mode", "exact")
    if mode not in ("exact", "euler"):
        raise ConfigError("mode must be 'exact' or 'euler'", cfg.file, "mode")
    if mode == "exact" and not proc.pure_jump:
        raise ConfigError("exact mode needs a pure-jump process; set mode to 'euler'",
                          cfg.file, "mode")
    dt = cfg.float("dt", 0.01, positive=True)
    return hitting_est.cdf_estimates(proc, g, cfg.grid(), cfg.int("n", minimum=1), methods,
                                     mode, cfg.stream("hit-est"), dt, workers)


def cmd_hit_est(cfg, workers):
    curves = _hit_curves(cfg, workers)
    return [_row(float(t), s, m) for m, c in curves.items() for t, s in zip(c.grid, c.summaries)]


def cmd_hit_eff(cfg, workers):
    curves = _hit_curves(cfg, workers)
    return [EffRow(r["t"], r["a"], r["b"], r["eff"], "efficiency")
            for r in hitting_est.efficiency_report(curves.values())]


def cmd_cover(cfg, workers):
    proc, canon = _process_and_ghts(cfg)
    if "cover" not in canon:
        raise ConfigError("cover needs the ctmc_cover process", cfg.file, "process")
    curves = _hit_curves(cfg, workers, canon["cover"])
    return [_row(float(t), s, m) for m, c in curves.items() for t, s in zip(c.grid, c.summaries)]


def cmd_joint(cfg, workers):
    proc, canon = _process_and_ghts(cfg)
    ghts = _ghts(cfg, canon)
    times = cfg.get("times")
    if not isinstance(times, list) or len(times) != len(ghts):
        raise ConfigError("'times' needs one deadline per hitting time", cfg.file, "times")
    mode = cfg.get("mode", "exact")
    rows = []
    for v in cfg.methods({"ordered", "unordered"}, ["ordered", "unordered"]):
        s = hitting_est.joint_estimate(proc, ghts, times, cfg.int("n", minimum=1), v,
                                       cfg.stream("joint").child(v), mode,
                                       cfg.float("dt", 0.01, True), workers)
        rows.append(_row(len(ghts), s, v))
    return rows


def cmd_ground_truth(cfg, workers):
    model = cfg.build("model", _discrete_model)
    query = cfg.build("query", query_from_dict)
    hist = _history(cfg)
    est = cfg.get("estimator", "is")
    if est not in ("is", "naive"):
        raise ConfigError("estimator must be 'is' or 'naive'", cfg.file, "estimator")
    fn = importance_samples if est == "is" else naive_samples

    def draw(m, gen):
        return fn(model, query, m, int(gen.integers(2 ** 63)), hist, workers)

    s = surrogate_ground_truth(draw, cfg.stream("ground-truth"), cfg.float("tolerance", 1e-7, True),
                               cfg.int("n_low", 10_000, 2), cfg.int("n_high", 100_000, 2),
                               cfg.int("step", 1_000, 1))
    return [_row("", s, "surrogate")]


def cmd_gen_model(cfg, workers):
    kind = cfg.get("kind")
    params = dict(cfg.get("params", {}))
    gen = cfg.stream("gen-model").generator()
    try:
        if kind == "markov":
            m = discrete_model.random_markov_model(int(params.pop("vocab_size", 3)),
                                                   int(params.pop("order", 1)), gen,
                                                   float(params.pop("concentration", 1.0)))
            doc = {"schema": 1, "family": "markov", "order": m.order,
                   "vocab_size": m.vocab_size, "table": m.rows.ravel().tolist()}
        elif kind in ("hawkes", "self_correcting"):
            K = int(params.pop("n_marks", 5))
            if kind == "hawkes":
                m = mtpp.random_hawkes(K, gen, params.pop("law", "dense"), int(params.pop("block", 5)))
            else:
                m = mtpp.random_self_correcting(K, gen)
            doc = mtpp.model_to_dict(m)
        elif kind == "ctmc_cover":
            params.setdefault("seed", int(gen.integers(2 ** 31)))
            proc, _ = make_example_process("ctmc_cover", **params)
            params = {}
            doc = process_to_dict(proc)
        else:
            raise ConfigError("kind must be markov, hawkes, self_correcting or ctmc_cover",
                              cfg.file, "kind")
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid params: {exc}", cfg.file, "params") from None
    if params:
        raise ConfigError(f"unknown params {sorted(params)}", cfg.file, "params")
    return doc


def cmd_compare(cfg, workers):
    paths = cfg.get("configs")
    if not isinstance(paths, list) or len(paths) < 2:
        raise ConfigError("'configs' must list at least two config files", cfg.file, "configs")
    runs = []
    for p in paths:
        sub_path = (cfg.base / p) if not os.path.isabs(p) else Path(p)
        sub = _read_config(sub_path)
        command = sub.get("command")
        if command not in ESTIMATE_COMMANDS:
            raise ConfigError(f"cannot compare command {command!r}", str(sub_path), "command")
        runs.append((command, sub, _make_config(command, sub, sub_path)))
    commands = {c for c, _, _ in runs}
    if len(commands) != 1:
        raise ConfigError("compared configs must run the same command", cfg.file, "configs")
    targets = {json.dumps({k: v for k, v in d.items() if k in TARGET_KEYS}, sort_keys=True)
               for _, d, _ in runs}
    if len(targets) != 1:
        raise ConfigError("compared configs target different queries", cfg.file, "configs")
    command = commands.pop()
    rows = []
    for _, d, sub in runs:
        label = d.get("id", "run")
        rows += [(label, r) for r in COMMANDS[command][0](sub, workers)]
    by_x = {}
    for label, r in rows:
        by_x.setdefault(fmt(r.x), []).append((f"{label}:{r.method}", r))
    out = []
    for x, items in by_x.items():
        for (na, ra), (nb, rb) in itertools.product(items, repeat=2):
            if ra.var is None or rb.var is None:
                continue
            sa = EstimateSummary(1, ra.mean, ra.var, ra.se)
            sb = EstimateSummary(1, rb.mean, rb.var, rb.se)
            try:
                eff = relative_efficiency(sa, sb)
            except ValueError:
                eff = None
            label = "variance reduction" if (ra.biased or rb.biased) else "efficiency"
            out.append(EffRow(x, na, nb, eff, label))
    return out


@dataclass
class EffRow:
    x: object
    a: str
    b: str
    eff: object
    label: str


TARGET_KEYS = {"model", "query", "history", "A", "B", "n_idx", "process", "ght", "ghts",
               "grid", "times", "n", "schedule", "observed"}

# name -> (runner, allowed keys beyond the common ones, required keys)
COMMANDS = {
    "query-discrete": (cmd_query_discrete, {"model", "query", "history", "methods", "n", "cap"},
                       {"model", "query"}),
    "beam": (cmd_beam, {"model", "query", "history", "variant", "alpha", "cap"},
             {"model", "query"}),
    "hybrid": (cmd_hybrid, {"model", "query", "history", "n", "cap"}, {"model", "query", "n"}),
    "hit-cdf": (cmd_hit_cdf, {"model", "A", "grid", "history", "methods", "n"},
                {"model", "A", "grid", "n"}),
    "nth-mark": (cmd_nth_mark, {"model", "A", "n_idx", "history", "methods", "n"},
                 {"model", "A", "n"}),
    "a-before-b": (cmd_a_before_b, {"model", "A", "B", "eps", "tau", "history", "methods", "n"},
                   {"model", "A", "B", "n"}),
    "censor-ll": (cmd_censor_ll, {"model", "schedule", "observed", "M", "methods", "points"},
                  {"model", "schedule", "observed"}),
    "hit-est": (cmd_hit_est, {"process", "ght", "grid", "methods", "n", "mode", "dt"},
                {"process", "grid", "n"}),
    "hit-eff": (cmd_hit_eff, {"process", "ght", "grid", "methods", "n", "mode", "dt"},
                {"process", "grid", "n"}),
    "cover": (cmd_cover, {"process", "grid", "methods", "n", "mode", "dt"},
              {"process", "grid", "n"}),
    "joint": (cmd_joint, {"process", "ghts", "times", "methods", "n", "mode", "dt"},
              {"process", "ghts", "times", "n"}),
    "ground-truth": (cmd_ground_truth, {"model", "query", "history", "estimator", "tolerance",
                                        "n_low", "n_high", "step"}, {"model", "query"}),
    "gen-model": (cmd_gen_model, {"kind", "params"}, {"kind", "output"}),
    "compare": (cmd_compare, {"configs"}, {"configs"}),
}
ESTIMATE_COMMANDS = set(COMMANDS) - {"gen-model", "compare", "hit-eff"}


def _read_config(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}", str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: {exc}", str(path)) from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", str(path))
    if doc.get("schema") != SCHEMA:
        raise ConfigError(f"schema must be '{SCHEMA}'", str(path), "schema")
    return doc


def _make_config(command, doc, path) -> Config:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}", str(path), "command")
    if doc.get("command", command) != command:
        raise ConfigError(f"config is for '{doc['command']}', not '{command}'", str(path), "command")
    _, allowed, required = COMMANDS[command]
    return Config(doc, Path(path), allowed, required)


def _write_rows(rows, experiment, out, wall_ms=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if rows and isinstance(rows[0], EffRow):
        w.writerow(EFF_HEADER)
        for r in rows:
            w.writerow([experiment, fmt(r.x), r.a, r.b, fmt(r.eff) if r.eff is not None else "", r.label])
    else:
        w.writerow(HEADER + (["wall_ms"] if wall_ms is not None else []))
        for r in rows:
            line = [experiment, fmt(r.x), r.method, fmt(r.mean), fmt(r.var), fmt(r.se), fmt(r.n)]
            if wall_ms is not None:
                line.append(fmt(wall_ms))
            w.writerow(line)
    text = buf.getvalue()
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
    return text


def run(command: str, config_path, out=None, workers=None, wall_time=False) -> int:
    """Run one command; returns the exit status."""
    try:
        path = Path(config_path)
        doc = _read_config(path)
        cfg = _make_config(command, doc, path)
        if workers is not None and workers < 1:
            raise ConfigError("workers must be positive", cfg.file, "workers")
        experiment = str(doc.get("id", command))
        target = out if out is not None else cfg.get("output")
        if target is not None and not isinstance(target, str):
            raise ConfigError("'output' must be a path", cfg.file, "output")
        if target is not None and not os.path.isabs(target) and out is None:
            target = str(cfg.base / target)
        start = time.perf_counter()
        result = COMMANDS[command][0](cfg, workers)
        wall = (time.perf_counter() - start) * 1000 if wall_time else None
    except ConfigError as exc:
        _error("config", str(exc), exc.file, exc.field)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError, AssertionError, RuntimeError, np.linalg.LinAlgError) as exc:
        _error("numeric", f"{type(exc).__name__}: {exc}")
        return EXIT_NUMERIC
    if command == "gen-model":
        Path(target).write_text(json.dumps(result, sort_keys=True) + "\n")
        print(f"{command}: wrote {doc['kind']} spec to {target}", file=sys.stderr)
        return EXIT_OK
    _write_rows(result, experiment, target, wall)
    where = target if target not in (None, "-") else "stdout"
    print(f"{command}: {len(result)} rows to {where}", file=sys.stderr)
    return EXIT_OK


def _error(kind, message, file=None, field=None):
    rec = {"error": kind, "message": message}
    if file is not None:
        rec["file"] = file
    if field is not None:
        rec["field"] = field
    print(json.dumps(rec), file=sys.stderr)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qprob", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="JSON experiment config")
    parser.add_argument("--out", help="output path ('-' for stdout); overrides the config")
    parser.add_argument("--workers", type=int, help="parallel workers (default: QPROB_WORKERS)")
    parser.add_argument("--wall-time", action="store_true",
                        help="append a wall-time column (breaks byte-identical reruns)")
    args = parser.parse_args(argv)
    return run(args.command, args.config, args.out, args.workers, args.wall_time)


if __name__ == "__main__":
    sys.exit(main())
