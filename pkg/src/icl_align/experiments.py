"""Config-driven experiment tables.

Each experiment resolves a JSON config (built-in defaults, then the file,
then command-line overrides), computes a list of row dicts and hands them to
``write_table``. Rows always carry the resolved ratios and covariance labels
so any theory value can be recomputed from the table alone.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import platform
import re
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Mapping, Optional

import numpy as np

from . import __version__
from .alignment import ALIGNMENT_FIELDS, alignment_report, spearman
from .covariance import build as build_cov
from .exceptions import BoundaryError, InvalidArgumentError
from .simulator import SIM_FIELDS, SimConfig, sim_row, simulate_many
from .theory import (
    ModelParams,
    context_length_curve,
    errors_from_solution,
    icl_error_limit,
    solve_self_consistent,
)

EXPERIMENTS = ("theory", "simulate", "sweep", "align", "figure1", "figure2", "heatmap5",
               "phase6", "contextlen7")
SWEEPABLE = ("alpha", "alpha_test", "tau", "kappa", "rho", "lambda", "d")
THREADS_ENV = "ICL_ALIGN_THREADS"

PARAM_COLS = ("d", "alpha", "alpha_test", "tau", "kappa", "rho", "lambda", "train_label",
              "test_label")
THEORY_COLS = PARAM_COLS + ("e_icl", "e_idg", "e_scalar", "e_misalign", "sigma",
                            "lambda_tilde", "m", "m_prime", "q", "status")

_BASE = {
    "d": 60,
    "seed": 0,
    "format": "csv",
    "params": {"alpha": 2.0, "tau": 4.0, "kappa": 1.0, "rho": 0.01, "lambda": 0.0,
               "alpha_test": None},
    "train": {"name": "uniform_linear"},
    "tests": None,
    "simulation": {"replicates": 20, "n_test_contexts": 2000, "ridge": None},
}

DEFAULTS = {
    "theory": {},
    "align": {},
    "simulate": {"modes": ["ICL", "IDG"]},
    "sweep": {"sweep": {"name": "kappa", "values": [0.25, 0.5, 1.0, 2.0, 4.0]},
              "simulate": False},
    "figure1": {
        "kappas": [0.25, 0.5, 1.0, 2.0, 4.0],
        "tests": [{"name": "same_as_train"}, {"name": "spike", "index": 1},
                  {"name": "spike", "index": "last"}],
        "simulate": True,
    },
    "figure2": {
        "train": {"name": "powerlaw", "p": 0.9},
        "kappas": [0.5, 1.0, 2.0],
        "tests": [{"name": "powerlaw", "p": p} for p in (0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 2.0)]
        + [{"name": "lowrank", "fraction": f} for f in (0.05, 0.1, 0.25, 0.5, 0.75, 1.0)]
        + [{"name": "powerlaw", "p": 0.9, "order": "reversed"},
           {"name": "powerlaw", "p": 0.9, "order": "rotated", "seed": 0}],
    },
    "heatmap5": {
        "d": 100,
        "params": {"alpha": 1.0, "tau": 4.0, "rho": 0.01},
        "p_test": 0.9,
        "p_train": [round(0.9 + 0.1 * i, 10) for i in range(-9, 12)],
        "kappas": [float(v) for v in np.round(np.logspace(-1, 1, 11), 10)],
        "baseline_column": "percent_improvement",
    },
    "phase6": {
        "d": 80,
        "params": {"alpha": 80.0, "tau": 80.0, "rho": 0.01},
        "trains": [{"name": "uniform_linear"}, {"name": "lowrank", "fraction": 0.5}],
        "tests": [{"name": "same_as_train"}, {"name": "isotropic"},
                  {"name": "powerlaw", "p": 0.5},
                  {"name": "powerlaw", "p": 0.5, "order": "reversed"},
                  {"name": "spike", "index": 1}],
        "kappas": [round(0.1 * i, 10) for i in range(1, 21)],
    },
    "contextlen7": {
        "d": 150,
        "params": {"alpha": 2.0, "tau": 4.0, "kappa": 1.0, "rho": 0.01},
        "alpha_test": [float(v) for v in np.round(np.logspace(np.log2(0.25), 4, 13, base=2), 10)],
    },
}

_KNOWN_KEYS = {"experiment", "d", "seed", "format", "output", "threads", "params", "train",
               "test", "tests", "trains", "simulation", "sweep", "simulate", "modes",
               "kappas", "p_test", "p_train", "baseline_column", "alpha_test"}
_PARAM_KEYS = {"alpha", "tau", "kappa", "rho", "lambda", "alpha_test"}


# --------------------------------------------------------------------------
# config handling


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(experiment: str, file_cfg: Optional[Mapping] = None,
                   overrides: Optional[Mapping] = None) -> dict:
    """Defaults < config file < command-line overrides."""
    cfg = _merge(_BASE, DEFAULTS.get(experiment, {}))
    if file_cfg:
        cfg = _merge(cfg, file_cfg)
    if overrides:
        cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    cfg["experiment"] = experiment
    if cfg.get("threads") is None:
        cfg["threads"] = int(os.environ.get(THREADS_ENV, "1") or 1)
    return cfg


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return 1 if m is None else text.count("\n", 0, m.start()) + 1


def _finding(text, key, msg):
    return f"line {_line_of(text, key)}: {msg}"


def _as_kappa(v):
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return math.inf
    return v


def _check_params(params, text, out):
    if not isinstance(params, Mapping):
        out.append(_finding(text, "params", "params must be an object"))
        return
    for key in params:
        if key not in _PARAM_KEYS:
            out.append(_finding(text, key, f"unknown parameter '{key}'"))
    try:
        ModelParams.from_dict({k: v for k, v in params.items() if k in _PARAM_KEYS})
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        out.append(_finding(text, "params", f"invalid params: {exc}"))
        return
    lam = float(params.get("lambda") or 0.0)
    if lam == 0 and float(params.get("tau", 0)) == 1.0:
        out.append(_finding(text, "tau",
                            "ridgeless threshold unsupported: tau == 1 needs lambda > 0"))


def _check_cov(tag, d, text, key, out, allow_same=False):
    if not isinstance(tag, Mapping) or "name" not in tag:
        out.append(_finding(text, key, f"{key}: covariance tag needs a 'name'"))
        return
    if allow_same and tag.get("name") == "same_as_train":
        return
    try:
        build_cov(tag, d)
    except (InvalidArgumentError, KeyError, TypeError, ValueError) as exc:
        out.append(_finding(text, key, f"{key}: {exc}"))


def _finite_list(vals):
    return (isinstance(vals, list) and len(vals) > 0
            and all(isinstance(_as_kappa(v), (int, float)) and not isinstance(v, bool)
                    and not math.isnan(float(_as_kappa(v))) for v in vals))


def check_config(cfg: Mapping, text: str = "") -> list:
    """Schema findings for a resolved config; empty means runnable."""
    out = []
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        out.append(_finding(text, "experiment", f"unknown experiment {exp!r}"))
        return out
    for key in cfg:
        if key not in _KNOWN_KEYS:
            out.append(_finding(text, key, f"unknown field '{key}'"))
    d = cfg.get("d")
    if isinstance(d, bool) or not isinstance(d, int) or d < 1:
        out.append(_finding(text, "d", f"d must be a positive integer, got {d!r}"))
        return out
    seed = cfg.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        out.append(_finding(text, "seed", f"seed must be a 64-bit unsigned integer, got {seed!r}"))
    if cfg.get("format") not in ("csv", "json"):
        out.append(_finding(text, "format", f"format must be csv or json, got {cfg.get('format')!r}"))
    threads = cfg.get("threads")
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        out.append(_finding(text, "threads", "threads must be a positive integer"))
    params = dict(cfg.get("params") or {})
    if exp == "heatmap5":
        params.setdefault("kappa", 1.0)
    if exp == "phase6":
        params.setdefault("kappa", 1.0)
    _check_params(params, text, out)
    _check_cov(cfg.get("train"), d, text, "train", out)
    tests = cfg.get("tests")
    if tests is not None:
        if not isinstance(tests, list) or not tests:
            out.append(_finding(text, "tests", "tests must be a non-empty list"))
        else:
            for t in tests:
                _check_cov(t, d, text, "tests", out, allow_same=True)
    if cfg.get("test") is not None:
        _check_cov(cfg["test"], d, text, "test", out, allow_same=True)
    sim = cfg.get("simulation") or {}
    for key in ("replicates", "n_test_contexts"):
        v = sim.get(key)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            out.append(_finding(text, key, f"simulation.{key} must be a positive integer"))
    if sim.get("ridge") is not None and not (isinstance(sim["ridge"], (int, float))
                                             and sim["ridge"] > 0):
        out.append(_finding(text, "ridge", "simulation.ridge must be positive"))
    for key in ("kappas", "p_train", "alpha_test"):
        if key in cfg and not (key == "alpha_test" and exp != "contextlen7"):
            if not _finite_list(cfg[key]):
                out.append(_finding(text, key, f"{key} must be a non-empty list of numbers"))
    if exp == "sweep":
        sw = cfg.get("sweep")
        if not isinstance(sw, Mapping):
            out.append(_finding(text, "sweep", "sweep experiment needs a 'sweep' object"))
        else:
            name = sw.get("name")
            if name not in SWEEPABLE:
                out.append(_finding(text, "name", f"sweep over unknown parameter '{name}'"))
            if not _finite_list(sw.get("values")):
                out.append(_finding(text, "values", "sweep values must be a non-empty list of "
                                                    "finite numbers"))
            elif name == "tau" and float(params.get("lambda") or 0) == 0 \
                    and any(float(v) == 1.0 for v in sw["values"]):
                out.append(_finding(text, "values",
                                    "ridgeless threshold unsupported: tau == 1 in sweep "
                                    "needs lambda > 0"))
    if exp == "contextlen7":
        grid = cfg.get("alpha_test")
        if _finite_list(grid) and any(b < a for a, b in zip(grid, grid[1:])):
            out.append(_finding(text, "alpha_test", "alpha_test grid must be sorted ascending"))
    if exp == "phase6":
        for t in cfg.get("trains") or []:
            _check_cov(t, d, text, "trains", out)
    if exp == "heatmap5":
        col = cfg.get("baseline_column")
        if not isinstance(col, str) or not col:
            out.append(_finding(text, "baseline_column", "baseline_column must be a name"))
    return out


def load_config_file(path) -> tuple:
    """Return ``(dict, raw_text)``; JSON errors become ``InvalidArgumentError``."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise InvalidArgumentError("line 1: config must be a JSON object")
    return data, text


def validate(path, experiment: Optional[str] = None) -> list:
    """All findings for a config file without running anything."""
    try:
        data, text = load_config_file(path)
    except InvalidArgumentError as exc:
        return [str(exc)]
    exp = experiment or data.get("experiment")
    if exp not in EXPERIMENTS:
        return [_finding(text, "experiment", f"unknown experiment {exp!r}")]
    return check_config(resolve_config(exp, data), text)


# --------------------------------------------------------------------------
# shared helpers


def _params(cfg, **changes) -> ModelParams:
    raw = {k: _as_kappa(v) for k, v in cfg["params"].items() if k in _PARAM_KEYS}
    raw.update(changes)
    raw.setdefault("kappa", 1.0)
    return ModelParams.from_dict(raw)


def _test_cov(tag, train, d):
    if tag.get("name") == "same_as_train":
        return train
    return build_cov(tag, d)


def _tests(cfg, train, d):
    tags = cfg.get("tests")
    if tags is None:
        tags = [cfg.get("test") or {"name": "same_as_train"}]
    return [_test_cov(t, train, d) for t in tags]


def _param_cols(d, p: ModelParams, train, test) -> dict:
    return {"d": d, "alpha": p.alpha, "alpha_test": p.alpha_test, "tau": p.tau,
            "kappa": p.kappa, "rho": p.rho, "lambda": p.lam,
            "train_label": train.label, "test_label": test.label}


def _theory_row(d, p, train, test, sol=None) -> dict:
    row = _param_cols(d, p, train, test)
    try:
        if sol is None:
            sol = solve_self_consistent(p, train)
        e = errors_from_solution(sol, p, train, test)
        row.update(e_icl=e.e_icl, e_idg=e.e_idg, e_scalar=e.e_scalar,
                   e_misalign=e.e_misalign, sigma=sol.sigma, lambda_tilde=sol.lambda_tilde,
                   m=sol.m, m_prime=sol.m_prime, q=sol.q, status="ok")
    except (ArithmeticError, RuntimeError, InvalidArgumentError) as exc:
        row.update({k: math.nan for k in THEORY_COLS if k not in row})
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return row


def _pmap(fn: Callable, items, threads: int) -> list:
    """Map preserving input order regardless of completion order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# experiments


def run_theory(cfg) -> tuple:
    d = cfg["d"]
    train = build_cov(cfg["train"], d)
    p = _params(cfg)
    try:
        sol = solve_self_consistent(p, train)
    except (ArithmeticError, RuntimeError, InvalidArgumentError):
        sol = None
    rows = [_theory_row(d, p, train, t, sol) for t in _tests(cfg, train, d)]
    return rows, list(THEORY_COLS)


def _sweep_value(cfg, name, value):
    c = copy.deepcopy(cfg)
    if name == "d":
        c["d"] = int(value)
    else:
        c["params"][name] = value
    return c


def run_sweep(cfg) -> tuple:
    name = cfg["sweep"]["name"]
    values = cfg["sweep"]["values"]
    simulate = bool(cfg.get("simulate"))

    def point(value):
        c = _sweep_value(cfg, name, value)
        rows, _ = run_theory(c)
        if simulate:
            sim_rows = _simulate_rows(c, ["ICL"])
            for r, s in zip(rows, sim_rows):
                r.update(mse_mean=s["mse_mean"], mse_stderr=s["mse_stderr"],
                         population_mse=s["population_mse"])
        return rows

    chunks = _pmap(point, values, cfg["threads"])
    cols = list(THEORY_COLS)
    if simulate:
        cols += ["mse_mean", "mse_stderr", "population_mse"]
    return [r for rows in chunks for r in rows], cols


def _sim_config(cfg, p, train, test) -> SimConfig:
    sim = cfg["simulation"]
    return SimConfig(cfg["d"], p, train, test, n_test_contexts=sim["n_test_contexts"],
                     replicates=sim["replicates"], seed=cfg["seed"], ridge=sim.get("ridge"))


def _simulate_rows(cfg, modes) -> list:
    d = cfg["d"]
    train = build_cov(cfg["train"], d)
    p = _params(cfg)
    tests = _tests(cfg, train, d)
    pairs = [(m.upper(), t) for t in tests for m in modes
             if not (m.upper() == "IDG" and t is not tests[0])]
    base = _sim_config(cfg, p, train, tests[0])
    rows = []
    try:
        run = simulate_many(base, pairs)
        for i, (mode, t) in enumerate(pairs):
            cfg_t = _sim_config(cfg, p, train, t)
            rows.append(dict(sim_row(cfg_t, mode, run.results[i]), status="ok"))
    except (ArithmeticError, RuntimeError, InvalidArgumentError) as exc:
        for mode, t in pairs:
            row = dict(_param_cols(d, p, train, t), mode=mode, replicates=base.replicates,
                       seed=base.seed, mse_mean=math.nan, mse_stderr=math.nan,
                       population_mse=math.nan)
            row["lambda"] = base.lambda_used
            row["status"] = f"error: {type(exc).__name__}: {exc}"
            rows.append(row)
    return rows


def run_simulate(cfg) -> tuple:
    rows = _simulate_rows(cfg, cfg.get("modes") or ["ICL"])
    d = cfg["d"]
    train = build_cov(cfg["train"], d)
    p = _params(cfg)
    tests = {t.label: t for t in _tests(cfg, train, d)}
    try:
        sol = solve_self_consistent(p, train)
    except (ArithmeticError, RuntimeError, InvalidArgumentError):
        sol = None
    for r in rows:
        if sol is None:
            r["e_theory"] = math.nan
            continue
        e = errors_from_solution(sol, p, train, tests[r["test_label"]])
        r["e_theory"] = e.e_icl if r["mode"] == "ICL" else e.e_idg
    return rows, list(SIM_FIELDS) + ["e_theory", "status"]


def run_align(cfg) -> tuple:
    d = cfg["d"]
    train = build_cov(cfg["train"], d)
    kappas = cfg.get("kappas") or [cfg["params"].get("kappa", 1.0)]

    def point(kappa):
        p = _params(cfg, kappa=_as_kappa(kappa))
        out = []
        try:
            sol = solve_self_consistent(p, train)
        except (ArithmeticError, RuntimeError, InvalidArgumentError) as exc:
            for t in _tests(cfg, train, d):
                row = dict.fromkeys(ALIGNMENT_FIELDS, math.nan)
                row.update(_param_cols(d, p, train, t), status=f"error: {exc}")
                out.append(row)
            return out
        for t in _tests(cfg, train, d):
            rep = alignment_report(p, train, t, solution=sol)
            row = _param_cols(d, p, train, t)
            row.update(rep.to_row())
            row["train_singular"] = int(rep.train_singular)
            row["status"] = "ok"
            out.append(row)
        return out

    chunks = _pmap(point, kappas, cfg["threads"])
    rows = [r for rows in chunks for r in rows]
    cols = list(PARAM_COLS) + [c for c in ALIGNMENT_FIELDS if c not in PARAM_COLS] \
        + ["train_singular", "status"]
    return rows, cols


def figure2_summary(rows) -> dict:
    """Spearman correlation of each alignment measure with ``e_icl``, per kappa."""
    groups = {}
    for r in rows:
        if r.get("status") == "ok":
            groups.setdefault(r["kappa"], []).append(r)
    out = {}
    for kappa, ok in groups.items():
        e = [r["e_icl"] for r in ok]
        out[f"kappa={_fmt(kappa)}"] = {
            key: spearman([r[key] for r in ok], e) if len(ok) >= 2 else math.nan
            for key in ("e_misalign", "trace_test_F", "trace_test_inv_train", "inv_cka")}
    return out


def run_figure2(cfg) -> tuple:
    return run_align(cfg)


def run_figure1(cfg) -> tuple:
    d = cfg["d"]
    train = build_cov(cfg["train"], d)
    tests = _tests(cfg, train, d)
    simulate = bool(cfg.get("simulate", True))

    def point(kappa):
        p = _params(cfg, kappa=_as_kappa(kappa))
        try:
            sol = solve_self_consistent(p, train)
        except (ArithmeticError, RuntimeError, InvalidArgumentError):
            sol = None
        sims = {}
        if simulate:
            c = copy.deepcopy(cfg)
            c["params"]["kappa"] = _as_kappa(kappa)
            base = _sim_config(c, p, train, tests[0])
            try:
                run = simulate_many(base, [("ICL", t) for t in tests])
                sims = run.results
            except (ArithmeticError, RuntimeError, InvalidArgumentError) as exc:
                sims = {"error": exc}
        rows = []
        for i, t in enumerate(tests):
            row = _param_cols(d, p, train, t)
            status = "ok"
            if sol is not None:
                e = errors_from_solution(sol, p, train, t)
                row.update(e_icl_theory=e.e_icl, e_misalign_theory=e.e_misalign,
                           e_scalar_theory=e.e_scalar)
            else:
                row.update(e_icl_theory=math.nan, e_misalign_theory=math.nan,
                           e_scalar_theory=math.nan)
                status = "error: theory solve failed"
            if simulate and "error" not in sims:
                r = sims[i]
                row.update(mse_sim=r.mse_mean, mse_stderr=r.mse_stderr,
                           population_mse=r.population_mse)
                # empirical misalignment: simulated MSE minus the scalar part
                row["e_misalign_sim"] = r.mse_mean - row["e_scalar_theory"]
            else:
                row.update(mse_sim=math.nan, mse_stderr=math.nan, population_mse=math.nan,
                           e_misalign_sim=math.nan)
                if simulate:
                    status = f"error: {sims['error']}"
            row["status"] = status
            rows.append(row)
        return rows

    chunks = _pmap(point, cfg["kappas"], cfg["threads"])
    cols = ["kappa", "test_label", "e_icl_theory", "e_misalign_theory", "mse_sim",
            "mse_stderr", "e_misalign_sim", "e_scalar_theory", "population_mse"] \
        + [c for c in PARAM_COLS if c not in ("kappa", "test_label")] + ["status"]
    return [r for rows in chunks for r in rows], cols


def run_heatmap5(cfg) -> tuple:
    d = cfg["d"]
    p_test = float(cfg["p_test"])
    test = build_cov({"name": "powerlaw", "p": p_test}, d)
    col = cfg["baseline_column"]
    points = [(k, pt) for k in cfg["kappas"] for pt in cfg["p_train"]]
    baselines = {}

    def base(kappa):
        p = _params(cfg, kappa=_as_kappa(kappa))
        return errors_from_solution(solve_self_consistent(p, test), p, test, test).e_icl

    for kappa in cfg["kappas"]:
        try:
            baselines[kappa] = base(kappa)
        except (ArithmeticError, RuntimeError, InvalidArgumentError):
            baselines[kappa] = math.nan

    def point(item):
        kappa, p_train = item
        p = _params(cfg, kappa=_as_kappa(kappa))
        train = build_cov({"name": "powerlaw", "p": float(p_train)}, d)
        row = _param_cols(d, p, train, test)
        row.update(p_train=float(p_train), p_test=p_test, p_diff=float(p_train) - p_test)
        try:
            e = errors_from_solution(solve_self_consistent(p, train), p, train, test).e_icl
            b = baselines[kappa]
            row.update(e_icl=e, e_icl_baseline=b)
            row[col] = 100.0 * (b - e) / b
            row["status"] = "ok" if math.isfinite(b) else "error: baseline solve failed"
        except (ArithmeticError, RuntimeError, InvalidArgumentError) as exc:
            row.update(e_icl=math.nan, e_icl_baseline=baselines[kappa])
            row[col] = math.nan
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        return row

    rows = _pmap(point, points, cfg["threads"])
    cols = ["kappa", "p_train", "p_test", "p_diff", col, "e_icl", "e_icl_baseline"] \
        + [c for c in PARAM_COLS if c != "kappa"] + ["status"]
    return rows, cols


def run_phase6(cfg) -> tuple:
    d = cfg["d"]
    items = []
    for ttag in cfg["trains"]:
        train = build_cov(ttag, d)
        for tag in cfg["tests"]:
            items.append((train, _test_cov(tag, train, d)))

    def point(item):
        train, test = item
        out = []
        for kappa in cfg["kappas"]:
            p = _params(cfg, kappa=_as_kappa(kappa))
            g = p.alpha / p.tau
            row = _param_cols(d, p, train, test)
            row.update(gamma=g, rank_fraction=train.rank() / d)
            status = "ok"
            try:
                sol = solve_self_consistent(p, train)
                row["e_icl_full"] = errors_from_solution(sol, p, train, test).e_icl
            except (ArithmeticError, RuntimeError, InvalidArgumentError) as exc:
                row["e_icl_full"] = math.nan
                status = f"error: {type(exc).__name__}: {exc}"
            try:
                row["e_icl_limit"] = icl_error_limit(g, p.kappa, train, test, p.rho)
            except BoundaryError as exc:
                row["e_icl_limit"] = exc.below
                status = "boundary: kappa equals rank fraction"
            row["status"] = status
            out.append(row)
        return out

    chunks = _pmap(point, items, cfg["threads"])
    cols = ["kappa", "test_label", "e_icl_full", "e_icl_limit", "train_label", "gamma",
            "rank_fraction"] + [c for c in PARAM_COLS
                                if c not in ("kappa", "test_label", "train_label")] + ["status"]
    return [r for rows in chunks for r in rows], cols


def run_contextlen7(cfg) -> tuple:
    d = cfg["d"]
    train = build_cov(cfg["train"], d)
    grid = [float(a) for a in cfg["alpha_test"]]
    p = _params(cfg)
    rows = []
    for test in _tests(cfg, train, d):
        try:
            curve = context_length_curve(p, train, test, grid)
            status = "ok"
        except (ArithmeticError, RuntimeError, InvalidArgumentError) as exc:
            curve = [(a, math.nan) for a in grid]
            status = f"error: {type(exc).__name__}: {exc}"
        for a, e in curve:
            row = _param_cols(d, p.replace(alpha_test=a), train, test)
            row.update(e_icl=e, status=status)
            rows.append(row)
    cols = ["alpha_test", "e_icl"] + [c for c in PARAM_COLS if c != "alpha_test"] + ["status"]
    return rows, cols


RUNNERS = {
    "theory": run_theory,
    "sweep": run_sweep,
    "simulate": run_simulate,
    "align": run_align,
    "figure1": run_figure1,
    "figure2": run_figure2,
    "heatmap5": run_heatmap5,
    "phase6": run_phase6,
    "contextlen7": run_contextlen7,
}


# --------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def render_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def render_json(rows, columns) -> str:
    body = [{c: _jsonable(r.get(c)) for c in columns} for r in rows]
    return json.dumps(body, indent=1) + "\n"


def write_table(rows, columns, cfg, out_path: Optional[str], extra: Optional[dict] = None):
    """Write the table (stdout when ``out_path`` is None) and its manifest."""
    fmt = cfg.get("format", "csv")
    text = render_csv(rows, columns) if fmt == "csv" else render_json(rows, columns)
    if out_path is None:
        return text, None
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    manifest = {
        "experiment": cfg["experiment"],
        "seed": cfg["seed"],
        "config": {k: v for k, v in cfg.items() if k != "threads"},
        "columns": list(columns),
        "rows": len(rows),
        "errors": sum(1 for r in rows if str(r.get("status", "ok")).startswith("error")),
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        manifest.update(extra)
    mpath = out_path + ".manifest.json"
    with open(mpath, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, default=_jsonable)
        fh.write("\n")
    return text, mpath


def run_experiment(cfg) -> tuple:
    """Run a resolved, validated config; return ``(rows, columns, extra_manifest)``."""
    rows, cols = RUNNERS[cfg["experiment"]](cfg)
    extra = {}
    if cfg["experiment"] == "figure2":
        extra["spearman_vs_e_icl"] = figure2_summary(rows)
    if cfg["experiment"] in ("simulate", "figure1") or cfg.get("simulate"):
        extra["simulation_defaults"] = dict(cfg["simulation"])
    return rows, cols, extra

