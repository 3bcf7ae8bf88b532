"""Experiment runner: config file in, CSV traces and a summary table out.

Config files are flat ``section.key = value`` lines; ``#`` starts a comment.
A value written as ``a|b|c`` expands the file into a grid of runs.

    run.name = a9a-stl
    run.algorithm = stl-sc
    objective.kind = logistic
    objective.path = data/a9a
    data.clients = 8
    data.iid_fraction = 50
    schedule.eta1 = 0.8
    schedule.T1 = 50
    schedule.k1 = 4
    schedule.S = 16
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from .engine import ClientFleet, NumericalDivergence, RunTrace, run_stagewise, sample_stage_index
from .metrics import ensure_optimum, zeta_at
from .objectives import (Objective, estimate_sigma2, logistic_objective, pl_objective,
                         quadratic_objective)
from .rng import control_stream
from .schedules import (EngineOverrides, StagePlan, initial_k, plan_baseline, plan_stl_nc,
                        plan_stl_sc)

log = logging.getLogger("stlsgd")

ALGORITHMS = ("stl-sc", "stl-nc-1", "stl-nc-2", "local", "sync", "lb-sgd", "cr-psgd")
OBJECTIVES = ("logistic", "quadratic", "pl")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _k1(s: str):
    return "auto" if s.strip().lower() == "auto" else float(s)


def _floats(s: str) -> tuple:
    return tuple(float(p) for p in s.split(",") if p.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    objective: str
    name: str = "run"
    seed: int = 0
    target_gap: float = 1e-4
    eval_every: Optional[int] = None
    return_mode: str = "random"
    stop_at_target: bool = False
    execution: str = "vectorized"
    workers: Optional[int] = None
    path: Optional[str] = None
    lam: Optional[float] = None
    positive_label: Optional[float] = None
    classes: Optional[tuple] = None
    dim: int = 10
    spread: float = 1.0
    sigma2: Optional[float] = None
    x0: float = 0.0
    clients: int = 8
    iid_fraction: float = 100.0
    eta1: Optional[float] = None
    T1: Optional[int] = None
    T: Optional[int] = None
    k1: object = "auto"
    k: Optional[int] = None
    S: Optional[int] = None
    batch_size: int = 1
    alpha: Optional[float] = None
    gamma: Optional[float] = None
    iid: Optional[bool] = None
    B: Optional[int] = None
    rho_B: Optional[float] = None
    B_cap: int = 512

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"run.algorithm must be one of {', '.join(ALGORITHMS)}; got {self.algorithm!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective.kind must be one of {', '.join(OBJECTIVES)}; got {self.objective!r}")
        if self.clients < 1:
            raise ConfigError("data.clients must be >= 1")
        if not 0 <= self.iid_fraction <= 100:
            raise ConfigError("data.iid_fraction must be in [0, 100]")
        if self.return_mode not in ("random", "last"):
            raise ConfigError("run.return_mode must be 'random' or 'last'")
        required = {
            "stl-sc": ("eta1", "T1", "S"),
            "stl-nc-1": ("eta1", "T1", "S"),
            "stl-nc-2": ("eta1", "T1", "S"),
            "local": ("eta1", "T", "k", "alpha"),
            "sync": ("eta1", "T", "alpha"),
            "lb-sgd": ("eta1", "T", "alpha", "B"),
            "cr-psgd": ("eta1", "T", "B", "rho_B"),
        }[self.algorithm]
        missing = [f for f in required if getattr(self, f) is None]
        if missing:
            keys = ", ".join(f"schedule.{m}" for m in missing)
            raise ConfigError(f"algorithm {self.algorithm} needs {keys}")
        if self.algorithm.startswith("stl-nc") and self.objective != "pl":
            raise ConfigError(f"{self.algorithm} needs a weakly convex objective (objective.kind = pl)")
        if self.objective == "logistic" and self.path is None:
            raise ConfigError("objective.path is required for logistic (use 'synthetic' for the bundled set)")
        return self

    @property
    def is_iid(self) -> bool:
        return self.iid if self.iid is not None else self.iid_fraction >= 100


# config key -> (field, parser)
KEYS = {
    "run.name": ("name", str),
    "run.algorithm": ("algorithm", str),
    "run.seed": ("seed", int),
    "run.target_gap": ("target_gap", float),
    "run.eval_every": ("eval_every", int),
    "run.return_mode": ("return_mode", str),
    "run.stop_at_target": ("stop_at_target", _bool),
    "run.execution": ("execution", str),
    "run.workers": ("workers", int),
    "objective.kind": ("objective", str),
    "objective.path": ("path", str),
    "objective.lambda": ("lam", float),
    "objective.positive_label": ("positive_label", float),
    "objective.classes": ("classes", _floats),
    "objective.dim": ("dim", int),
    "objective.spread": ("spread", float),
    "objective.sigma2": ("sigma2", float),
    "objective.x0": ("x0", float),
    "data.clients": ("clients", int),
    "data.iid_fraction": ("iid_fraction", float),
    "schedule.eta1": ("eta1", float),
    "schedule.T1": ("T1", int),
    "schedule.T": ("T", int),
    "schedule.k1": ("k1", _k1),
    "schedule.k": ("k", int),
    "schedule.S": ("S", int),
    "schedule.batch_size": ("batch_size", int),
    "schedule.alpha": ("alpha", float),
    "schedule.gamma": ("gamma", float),
    "schedule.iid": ("iid", _bool),
    "schedule.B": ("B", int),
    "schedule.rho_B": ("rho_B", float),
    "schedule.B_cap": ("B_cap", int),
}


def parse_config_text(text: str) -> dict:
    """Raw ``key -> value string`` mapping; rejects unknown and duplicate keys."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_config(raw: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        name, conv = KEYS[key]
        try:
            kwargs[name] = conv(value)
        except ValueError as e:
            raise ConfigError(f"{key}: cannot parse {value!r} ({e})") from None
    for need in ("algorithm", "objective"):
        if need not in kwargs:
            raise ConfigError(f"missing required key {'run.algorithm' if need == 'algorithm' else 'objective.kind'}")
    return ExperimentConfig(**kwargs).validate()


def expand_grid(raw: dict) -> list[dict]:
    """One raw config per combination of ``|``-separated alternatives."""
    axes = [(k, [p.strip() for p in v.split("|")]) for k, v in raw.items() if "|" in v]
    if not axes:
        return [dict(raw)]
    out = []
    base_name = raw.get("run.name", "run")
    for combo in itertools.product(*(vals for _, vals in axes)):
        r = dict(raw)
        tags = []
        for (k, _), v in zip(axes, combo):
            r[k] = v
            tags.append(f"{k.split('.')[-1]}={v}")
        r["run.name"] = f"{base_name}[{','.join(tags)}]"
        out.append(r)
    return out


def load_configs(path) -> list[ExperimentConfig]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    raw = parse_config_text(text)
    raw.setdefault("run.name", Path(path).stem)
    return [build_config(r) for r in expand_grid(raw)]


@dataclass(frozen=True)
class SummaryRecord:
    name: str
    algorithm: str
    comm_rounds_total: int
    comm_rounds_to_target: Optional[int]
    iterations_total: int
    final_gap: Optional[float]
    final_grad_norm_sq: float
    wall_time_s: float


SUMMARY_COLUMNS = tuple(f.name for f in fields(SummaryRecord))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


@dataclass
class Setup:
    objective: Objective
    x0: np.ndarray
    plan: StagePlan
    overrides: EngineOverrides
    prox_gamma: Optional[float]
    shards: Optional[list]


def _load_dataset(cfg: ExperimentConfig):
    try:
        return data_mod.bundled_or_file(cfg.path, positive_label=cfg.positive_label, classes=cfg.classes)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    except ValueError as e:
        raise ConfigError(f"cannot load {cfg.path}: {e}") from None


def build_objective(cfg: ExperimentConfig):
    N = cfg.clients
    if cfg.objective == "logistic":
        ds = _load_dataset(cfg)
        if N > ds.num_examples:
            raise ConfigError(f"data.clients={N} exceeds the {ds.num_examples} examples")
        shards = data_mod.partition(ds, data_mod.PartitionSpec(N, cfg.iid_fraction, cfg.seed))
        lam = cfg.lam if cfg.lam is not None else 1.0 / ds.num_examples
        obj = logistic_objective(ds, lam, shards)
        key = hashlib.sha256(
            (data_mod.dataset_fingerprint(ds) + repr(lam)).encode()
            + b"".join(s.tobytes() for s in shards)).hexdigest()
        ensure_optimum(obj, key)
        return obj, shards
    if cfg.objective == "quadratic":
        rng = control_stream(cfg.seed, "centers")
        centers = cfg.spread * rng.standard_normal((N, cfg.dim))
        return quadratic_objective(centers, 1.0 if cfg.sigma2 is None else cfg.sigma2), None
    return pl_objective(1.0 if cfg.sigma2 is None else cfg.sigma2, N), None


def build_setup(cfg: ExperimentConfig) -> Setup:
    obj, shards = build_objective(cfg)
    x0 = np.full(obj.dim, cfg.x0)
    N = cfg.clients
    iid = cfg.is_iid
    alg = cfg.algorithm
    over = EngineOverrides()
    gamma = None
    if alg.startswith("stl"):
        L = obj.constants.L
        if alg.startswith("stl-nc"):
            rho = obj.constants.rho
            gamma = cfg.gamma if cfg.gamma is not None else 1.0 / (2.0 * rho)
            L = L + 1.0 / gamma
        k1 = cfg.k1
        if k1 == "auto":
            sigma2 = cfg.sigma2 if cfg.sigma2 is not None else obj.constants.sigma2
            if cfg.objective == "logistic" and cfg.sigma2 is None:
                sigma2 = estimate_sigma2(obj, x0, control_stream(cfg.seed, "sigma2"), 1000, cfg.batch_size)
            zeta = 0.0 if iid else (obj.constants.zeta_star if obj.constants.zeta_star is not None
                                   else zeta_at(obj, obj.optimum.x))
            try:
                k1 = initial_k(iid, cfg.eta1, L, N, sigma2, zeta)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        if alg == "stl-sc":
            plan = plan_stl_sc(cfg.eta1, cfg.T1, k1, cfg.S, iid, mu=obj.constants.mu)
        else:
            plan = plan_stl_nc(cfg.eta1, cfg.T1, k1, cfg.S, iid, 1 if alg == "stl-nc-1" else 2,
                               rho=obj.constants.rho)
    else:
        kind = {"local": "local-fixed-k"}.get(alg, alg)
        epoch = None
        if alg == "cr-psgd":
            epoch = (sum(len(s) for s in shards) // N) if shards is not None else None
            if epoch is None:
                raise ConfigError("cr-psgd needs a dataset-backed objective to define an epoch")
        try:
            plan, over = plan_baseline(kind, eta1=cfg.eta1, T=cfg.T, k=cfg.k, alpha=cfg.alpha,
                                       batch_size=cfg.batch_size, B=cfg.B, rho_B=cfg.rho_B,
                                       B_cap=cfg.B_cap, epoch_samples=epoch, iid=iid)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    return Setup(obj, x0, plan, over, gamma, shards)


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Run one configuration; returns ``(trace, summary)`` and writes files when ``out_dir`` is set."""
    cfg.validate()
    setup = build_setup(cfg)
    obj = setup.objective
    fleet = ClientFleet.create(cfg.clients, setup.x0, cfg.seed, setup.shards)
    start = time.perf_counter()
    x_final, trace, iterates = run_stagewise(
        obj, setup.x0, setup.plan, fleet, setup.prox_gamma, overrides=setup.overrides,
        return_mode=cfg.return_mode, batch_size=cfg.batch_size, eval_every=cfg.eval_every,
        stop_at_gap=cfg.target_gap if cfg.stop_at_target else None,
        execution=cfg.execution, workers=cfg.workers)
    wall = time.perf_counter() - start
    if cfg.algorithm == "stl-nc-2" and not trace.stopped_early:
        s = sample_stage_index(len(setup.plan), control_stream(cfg.seed, "stage-sample"))
        x_report = iterates[s - 1]
    else:
        x_report = x_final
    g = obj.full_gradient(x_report)
    gap = obj.value(x_report) - obj.optimum.f if obj.optimum is not None else None
    if (gap is not None and not math.isfinite(gap)) or not np.all(np.isfinite(g)):
        last = trace.records[-1]
        raise NumericalDivergence(trace.iterations, last.eta, last.k, last.stage)
    summary = SummaryRecord(cfg.name, cfg.algorithm, trace.comm_rounds,
                            trace.first_rounds_below(cfg.target_gap), trace.iterations,
                            gap, float(g @ g), wall)
    if out_dir is not None:
        write_outputs(Path(out_dir), cfg, setup.plan, trace, [summary])
    return trace, summary


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=,\[\]-]+", "_", name)


def write_outputs(out: Path, cfg, plan: StagePlan, trace: RunTrace, summaries, summary_name=None):
    out.mkdir(parents=True, exist_ok=True)
    stem = _safe(cfg.name)
    with open(out / f"{stem}.trace.csv", "w", newline="") as fh:
        trace.write_csv(fh)
    meta = {"config": {f.name: getattr(cfg, f.name) for f in fields(cfg)}, "plan": plan.to_dict(),
            "stage_ends": trace.stage_ends}
    (out / f"{stem}.plan.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    (out / (summary_name or f"{stem}.summary.csv")).write_text(summary_csv(summaries))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _sweep_child(args):
    cfg, out_dir = args
    try:
        trace, summary = run_experiment(cfg, out_dir)
        return cfg.name, summary, None, EXIT_OK
    except ConfigError as e:
        return cfg.name, None, f"config error: {e}", EXIT_CONFIG
    except NumericalDivergence as e:
        return cfg.name, None, f"diverged: {e}", EXIT_DIVERGED


def sweep(configs, out_dir, seed: Optional[int] = None, jobs: int = 1):
    """Run every config in isolation; returns ``(summaries, failures)`` and writes ``summary.csv``."""
    configs = list(configs)
    if not configs:
        raise ConfigError("sweep needs at least one config")
    if seed is not None:
        configs = [replace(c, seed=seed) for c in configs]
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError(f"sweep run names must be unique: {names}")
    out_dir = Path(out_dir)
    tasks = [(c, out_dir) for c in configs]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_child, tasks))
    else:
        results = [_sweep_child(t) for t in tasks]
    summaries, failures = [], []
    for name, summary, err, code in results:
        if summary is not None:
            summaries.append(summary)
        else:
            log.error("%s: %s", name, err)
            failures.append((name, err, code))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.csv").write_text(summary_csv(summaries))
    return summaries, failures


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="stlsgd", description="Simulate Local SGD / STL-SGD experiments.")
    ap.add_argument("--config", action="append", required=True, metavar="PATH",
                    help="experiment config; repeat to run a sweep")
    ap.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
    ap.add_argument("--seed", type=int, default=None, help="override the seed of every run")
    ap.add_argument("--jobs", type=int, default=1, help="configs run concurrently in a sweep")
    ap.add_argument("--quiet", action="store_true", help="only report errors")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        configs = [c for path in args.config for c in load_configs(path)]
        jobs = max(1, min(args.jobs, int(os.environ.get("STLSGD_THREADS", args.jobs))))
        summaries, failures = sweep(configs, args.out, args.seed, jobs)
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_CONFIG
    for s in summaries:
        log.info("%s: %d rounds, %s to target, final gap %s", s.name, s.comm_rounds_total,
                 s.comm_rounds_to_target, s.final_gap)
    if failures:
        return max(code for _, _, code in failures)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
