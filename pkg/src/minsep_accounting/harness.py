"""Config-driven experiment runner behind the ``minsep`` CLI.

A config is a YAML mapping::

    schema_version: 1
    task: mse-table            # calibrate | estimate-delta | mse-table |
                               # simulate-batches | validate-stats
    seed: 20240601
    mode: optimistic           # certified | optimistic
    workers: 1
    matrix: {source: bsr}      # bsr | identity | file (+ path)
    schemes: [bminsep_warm, cyclic_poisson]
    grid: {epsilon: [8.0], n: [200], p0: [0.01], b: [auto]}
    params: {delta: 1.0e-3, samples: 1000000, bands: [2, 4, 8]}

The grid is the Cartesian product of the listed axes (plus the scheme list).
Each cell gets its own seed ``derive_seed(seed, CELL, index)``, so cells may
run concurrently and reports are byte-identical across reruns and worker
counts. Wall-clock timings go to a separate ``timings.json``.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import os
import sys
import time
import traceback

import yaml

from . import __version__, accounting, attribution, calibration, rng as rng_mod, sampling, \
    strategy, validation

SCHEMA_VERSION = 1
TASKS = ("calibrate", "estimate-delta", "mse-table", "simulate-batches", "validate-stats")
MATRIX_SOURCES = ("bsr", "identity", "file")
GRID_AXES = ("epsilon", "n", "p0", "p", "b", "sigma", "m")

DEFAULT_PARAMS = {
    "delta": 1e-3,
    "samples": 10**5,
    "pilot_samples": 2**14,
    "bound_kind": "bernstein",
    "ratio": calibration.DEFAULT_RATIO,
    "bands": [2, 4, 8, 16, 32, 64],
    "trials": 10**4,
    "p_scale": 1.0,
    "dataset_size": 1000,
    "k_u": 1,
    "graph": None,
    "warmup_iters": None,
    "unproven_conjecture": False,
    "bib_epoch": None,
}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    task: str
    seed: int
    schemes: tuple
    grid: dict
    matrix: dict
    params: dict
    mode: str = "certified"
    workers: int = 1
    out: str = "results"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.seed is None:
            raise ConfigError("config needs an explicit seed")
        if self.mode not in calibration.MODES:
            raise ConfigError(f"mode must be one of {calibration.MODES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.task != "validate-stats" and not self.schemes:
            raise ConfigError("schemes must be a non-empty list")
        for axis, values in self.grid.items():
            if axis not in GRID_AXES:
                raise ConfigError(f"unknown grid axis {axis!r}; expected one of {GRID_AXES}")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid axis {axis!r} must be a non-empty list")
        src = self.matrix.get("source", "bsr")
        if src not in MATRIX_SOURCES:
            raise ConfigError(f"matrix source must be one of {MATRIX_SOURCES}")
        if src == "file" and not self.matrix.get("path"):
            raise ConfigError("matrix source 'file' needs a path")
        unknown = set(self.params) - set(DEFAULT_PARAMS)
        if unknown:
            raise ConfigError(f"unknown params: {sorted(unknown)}")

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
        extra = set(raw) - {"schema_version", "task", "seed", "mode", "workers", "out", "matrix",
                            "schemes", "grid", "params"}
        if extra:
            raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
        params = dict(raw.get("params") or {})
        return cls(task=raw.get("task"), seed=raw.get("seed"),
                   schemes=tuple(raw.get("schemes") or ()), grid=dict(raw.get("grid") or {}),
                   matrix=dict(raw.get("matrix") or {"source": "bsr"}), params=params,
                   mode=raw.get("mode", "certified"), workers=int(raw.get("workers", 1)),
                   out=raw.get("out", "results"))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_mapping(yaml.safe_load(fh))

    def param(self, key):
        return self.params.get(key, DEFAULT_PARAMS[key])

    def cells(self) -> list:
        axes = [a for a in GRID_AXES if a in self.grid]
        if self.task == "validate-stats":
            return [dict(zip(axes, c)) for c in itertools.product(*(self.grid[a] for a in axes))]
        return [dict(scheme=s, **dict(zip(axes, c)))
                for s in self.schemes
                for c in itertools.product(*(self.grid[a] for a in axes))]


# --------------------------------------------------------------------------
# building blocks

def build_matrix(cfg: ExperimentConfig, n: int, b: int | None):
    src = cfg.matrix.get("source", "bsr")
    if src == "identity":
        return strategy.identity(n)
    if src == "file":
        m = strategy.load_coefficients(cfg.matrix["path"])
        if m.n != n:
            m = strategy.ToeplitzBanded(n, m.coeffs[:n])
        return m
    return strategy.bsr(n, int(b))


def build_scheme(cfg: ExperimentConfig, cell: dict, b: int) -> accounting.Scheme:
    kind = cell["scheme"]
    kw = {"k_u": int(cfg.param("k_u")),
          "unproven_conjecture": bool(cfg.param("unproven_conjecture"))}
    if kind == "balls_in_bins":
        T = cfg.param("bib_epoch") or (round(1 / cell["p0"]) if "p0" in cell else b)
        return accounting.Scheme("balls_in_bins", int(T), 1.0, **kw)
    if kind == "poisson":
        b = 1
    if "p" in cell:
        return accounting.Scheme(kind, int(b), float(cell["p"]), **kw)
    return accounting.Scheme.from_rate(kind, int(b), float(cell["p0"]), **kw)


def _bands(cfg, cell, n):
    b = cell.get("b", "auto")
    if b == "auto":
        return [int(x) for x in cfg.param("bands") if int(x) <= n]
    return [int(b)]


def _calibrate(cfg, cell, m, scheme, seed):
    if "sigma" in cell:
        return {"sigma": float(cell["sigma"]), "sigma_source": "fixed"}
    res = calibration.evr_calibrate(
        scheme, m, float(cell["epsilon"]), float(cfg.param("delta")), seed, cfg.mode,
        ratio=float(cfg.param("ratio")), bound_kind=cfg.param("bound_kind"),
        optimistic_samples=int(cfg.param("samples")),
        pilot_samples=cfg.param("pilot_samples"))
    out = {"sigma": res.sigma_star, "sigma_source": cfg.mode, "ladder_index": res.index,
           "ladder_size": len(res.sigmas), "certified": res.certified}
    if res.verifier:
        out.update({f"verifier_{k}": v for k, v in res.verifier.items()})
    if res.guarantee:
        out["guarantee_delta"] = res.guarantee[1]
    return out


# --------------------------------------------------------------------------
# tasks: each returns a list of row dicts for one cell

def cell_calibrate(cfg, cell, seed):
    n = int(cell["n"])
    rows = []
    for b in _bands(cfg, cell, n):
        m = build_matrix(cfg, n, b)
        scheme = build_scheme(cfg, cell, b)
        row = {"b": b, "scheme_detail": scheme.label()}
        row.update(_calibrate(cfg, cell, m, scheme, rng_mod.derive_seed(seed, b)))
        rows.append(row)
    return rows


def cell_mse(cfg, cell, seed):
    n = int(cell["n"])
    best = None
    tried = []
    for b in _bands(cfg, cell, n):
        if cell["scheme"] == "cyclic_poisson" and b * float(cell.get("p0", 0)) > 1:
            continue  # infeasible band count for cyclic Poisson at this rate
        m = build_matrix(cfg, n, b)
        scheme = build_scheme(cfg, cell, b)
        row = {"b": m.b, "scheme_detail": scheme.label()}
        row.update(_calibrate(cfg, cell, m, scheme, rng_mod.derive_seed(seed, b)))
        row["mse"] = strategy.prefix_sum_mse(m, row["sigma"])
        tried.append({"b": row["b"], "sigma": row["sigma"], "mse": row["mse"]})
        if best is None or row["mse"] < best["mse"]:
            best = row
    if best is None:
        raise ValueError("no feasible band count in the grid")
    if cell.get("b", "auto") == "auto":
        best = dict(best, band_candidates=json.dumps(tried, sort_keys=True))
    return [best]


def cell_estimate(cfg, cell, seed):
    n = int(cell["n"])
    rows = []
    for b in _bands(cfg, cell, n):
        m = build_matrix(cfg, n, b)
        scheme = build_scheme(cfg, cell, b)
        s = int(cfg.param("samples"))
        worst, ests = accounting.estimate_delta_max(scheme, m, float(cell["sigma"]),
                                                    float(cell["epsilon"]), s, seed)
        row = {"b": b, "scheme_detail": scheme.label(), "samples": s, "delta_hat": worst}
        for e in ests:
            row[f"delta_hat_{e.direction}"] = e.delta_hat
            row[f"std_err_{e.direction}"] = e.std_err
        rows.append(row)
    return rows


def cell_simulate(cfg, cell, seed, out_dir, index):
    n = int(cell["n"])
    b = int(cell.get("b", 1))
    kind = cell["scheme"]
    path = os.path.join(out_dir, "schedules", f"cell{index:04d}_{kind}.jsonl")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    if kind in ("multiattr", "multiattr_participation"):
        graph_path = cfg.param("graph")
        if not graph_path:
            raise ValueError("multi-attribution simulation needs params.graph")
        g = attribution.AttributionGraph.read(graph_path)
        p = float(cell["p"]) if "p" in cell else sampling.convert_rate(float(cell["p0"]), b)
        variant = "coin_based" if kind == "multiattr" else "participation_based"
        mc = attribution.MultiAttrConfig(p, b, n, seed, variant, cfg.param("warmup_iters"))
        sched = attribution.sample_multiattr(g, mc)
        m_size = g.m
        min_sep = 1
    else:
        m_size = int(cell.get("m", cfg.param("dataset_size")))
        if "p" in cell:
            sc = sampling.SamplingConfig(kind, n, b, float(cell["p"]), m_size, seed)
        else:
            sc = sampling.config_for_rate(kind, n, b, float(cell["p0"]), m_size, seed)
        sched = sampling.sample_schedule(sc)
        min_sep = None
    text = sched.to_jsonl()
    with open(path, "w") as fh:
        fh.write(text)
    st = sampling.schedule_stats(sched, m=None if kind.startswith("multiattr") else m_size,
                                 min_sep=min_sep)
    return [{"b": b, "dataset_size": m_size, "schedule_file": os.path.relpath(path, out_dir),
             "sha256": hashlib.sha256(text.encode()).hexdigest(),
             "mean_batch_size": st.mean_batch_size, "violations": len(st.violations)}]


def cell_validate(cfg, cell, seed):
    res = validation.run_all(int(cell["n"]), int(cell["b"]), float(cell["p0"]),
                             int(cfg.param("trials")), seed, float(cfg.param("p_scale")))
    return [dict(r.to_dict(), check_passed=r.passed) for r in res]


# --------------------------------------------------------------------------
# driver

@dataclasses.dataclass
class Report:
    rows: list
    ok: bool
    warning: str
    timings: list


def _run_cell(cfg, index, cell, out_dir):
    seed = rng_mod.derive_seed(cfg.seed, rng_mod.CELL, index)
    base = {"task": cfg.task, "cell": index, **{k: cell[k] for k in cell},
            "mode": cfg.mode, "matrix": cfg.matrix.get("source", "bsr"),
            "master_seed": cfg.seed, "cell_seed": seed, "version": __version__}
    t0 = time.perf_counter()
    try:
        if cfg.task == "calibrate":
            rows = cell_calibrate(cfg, cell, seed)
        elif cfg.task == "mse-table":
            rows = cell_mse(cfg, cell, seed)
        elif cfg.task == "estimate-delta":
            rows = cell_estimate(cfg, cell, seed)
        elif cfg.task == "simulate-batches":
            rows = cell_simulate(cfg, cell, seed, out_dir, index)
        else:
            rows = cell_validate(cfg, cell, seed)
        rows = [{**base, **r, "status": "ok", "error": ""} for r in rows]
    except Exception as exc:  # error isolation: record and continue
        rows = [{**base, "status": "error", "error": f"{type(exc).__name__}: {exc}"}]
        traceback.print_exc(file=sys.stderr)
    return rows, time.perf_counter() - t0


def run(cfg: ExperimentConfig, out_dir: str | None = None) -> Report:
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    cells = cfg.cells()
    warning = calibration.NON_PRIVATE_WARNING if (
        cfg.mode == "optimistic" and cfg.task in ("calibrate", "mse-table")) else ""
    if warning:
        print(warning, file=sys.stderr)
    if cfg.workers > 1 and len(cells) > 1:
        with cf.ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(lambda ic: _run_cell(cfg, ic[0], ic[1], out_dir),
                                  enumerate(cells)))
    else:
        results = [_run_cell(cfg, i, c, out_dir) for i, c in enumerate(cells)]
    rows = []
    for cell_rows, _ in results:
        for r in cell_rows:
            if warning:
                r["warning"] = warning
            rows.append(r)
    ok = all(r["status"] == "ok" and r.get("check_passed", True) for r in rows)
    timings = [{"cell": i, "seconds": t} for i, (_, t) in enumerate(results)]
    write_reports(cfg, rows, warning, timings, out_dir)
    return Report(rows, ok, warning, timings)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, sort_keys=True)
    if v is None:
        return ""
    return v


def rows_to_csv(rows) -> str:
    fields = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def write_reports(cfg, rows, warning, timings, out_dir):
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(rows_to_csv(rows))
    doc = {"schema_version": SCHEMA_VERSION, "task": cfg.task, "version": __version__,
           "seed": cfg.seed, "mode": cfg.mode, "warning": warning,
           "config": _json_safe({"schemes": list(cfg.schemes), "grid": cfg.grid,
                                 "matrix": cfg.matrix, "params": cfg.params}),
           "rows": _json_safe(rows)}
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "timings.json"), "w") as fh:
        json.dump(timings, fh, indent=1)
