"""Simulated Local SGD over a fleet of clients, and the stagewise outer loop."""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .objectives import Objective, prox_wrap
from .rng import client_streams, control_stream
from .schedules import EngineOverrides, StagePlan, decayed_lr, grow_batch

EXECUTION_MODES = ("vectorized", "sequential", "threads")


class NumericalDivergence(FloatingPointError):
    def __init__(self, t: int, eta: float, k: int, stage: int):
        super().__init__(f"non-finite iterate at t={t} (eta={eta:.6g}, k={k}, stage={stage})")
        self.t, self.eta, self.k, self.stage = t, eta, k, stage


def _mean_rows(states: np.ndarray) -> np.ndarray:
    # Offsets from client 0, summed in client order: deterministic, and exact on consensus.
    base = states[0]
    acc = np.zeros_like(base)
    for j in range(1, states.shape[0]):
        acc += states[j] - base
    return base + acc / states.shape[0]


def _spread(states: np.ndarray, center: np.ndarray) -> float:
    return float(np.mean(np.sum((states - center) ** 2, axis=1)))


@dataclass
class ClientFleet:
    states: np.ndarray
    streams: list
    shards: Optional[list] = None
    seed: int = 0
    control: Optional[np.random.Generator] = None

    @classmethod
    def create(cls, num_clients: int, x0, seed: int = 0, shards=None) -> "ClientFleet":
        if num_clients < 1:
            raise ValueError("a fleet needs at least one client")
        x0 = np.asarray(x0, dtype=float)
        states = np.repeat(x0[None, :], num_clients, axis=0)
        return cls(states, client_streams(seed, num_clients), shards, seed,
                   control_stream(seed, "engine"))

    @property
    def num_clients(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def reset(self, x) -> None:
        self.states[:] = np.asarray(x, dtype=float)[None, :]

    def mean(self) -> np.ndarray:
        return _mean_rows(self.states)


def average_models(fleet: ClientFleet) -> np.ndarray:
    """Replace every client state with the client mean and return it."""
    if fleet.num_clients == 0:
        raise ValueError("cannot average an empty fleet")
    avg = fleet.mean()
    fleet.states[:] = avg[None, :]
    return avg.copy()


@dataclass(frozen=True)
class TraceRecord:
    t: int
    comm_rounds: int
    gap: Optional[float]
    grad_norm_sq: Optional[float]
    divergence: Optional[float]
    eta: float
    k: int
    stage: int


TRACE_COLUMNS = tuple(f.name for f in fields(TraceRecord))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v))


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    iterations: int = 0
    comm_rounds: int = 0
    stage_ends: list = field(default_factory=list)
    stopped_early: bool = False

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.t <= self.records[-1].t:
            raise ValueError(f"trace times must increase: {rec.t} after {self.records[-1].t}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def first_rounds_below(self, target: float) -> Optional[int]:
        for r in self.records:
            if r.gap is not None and r.gap <= target:
                return r.comm_rounds
        return None

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


@dataclass(frozen=True)
class LocalSgdConfig:
    eta: float
    T: int
    k: int
    batch_size: int = 1
    return_mode: str = "random"
    return_index: Optional[int] = None
    eval_every: Optional[int] = None
    lr_alpha: Optional[float] = None
    batch_growth: Optional[float] = None
    batch_cap: Optional[int] = None
    epoch_samples: Optional[int] = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.return_mode not in ("random", "last"):
            raise ValueError(f"return_mode must be 'random' or 'last', got {self.return_mode!r}")
        if self.return_index is not None and not 0 <= self.return_index < self.T:
            raise ValueError(f"return_index must lie in [0, {self.T - 1}]")
        if self.eval_every is not None and self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.batch_growth is not None and self.epoch_samples is None:
            raise ValueError("batch_growth needs epoch_samples")


def _thread_cap(workers: Optional[int]) -> int:
    env = os.environ.get("STLSGD_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(workers or cap, cap))


class _Stepper:
    """Computes one round of client stochastic gradients in the chosen execution mode."""

    def __init__(self, obj: Objective, fleet: ClientFleet, execution: str, workers: Optional[int]):
        if execution not in EXECUTION_MODES:
            raise ValueError(f"execution must be one of {EXECUTION_MODES}")
        self.obj, self.fleet, self.execution = obj, fleet, execution
        self.ids = list(range(fleet.num_clients))
        self.pool = ThreadPoolExecutor(_thread_cap(workers)) if execution == "threads" else None

    def _one(self, i: int, B: int) -> np.ndarray:
        f = self.fleet
        return self.obj.sample_gradients(f.states[i:i + 1], [i], [f.streams[i]], B)[0]

    def gradients(self, B: int) -> np.ndarray:
        f = self.fleet
        if self.execution == "vectorized":
            return self.obj.sample_gradients(f.states, self.ids, f.streams, B)
        if self.execution == "sequential":
            return np.stack([self._one(i, B) for i in self.ids])
        return np.stack(list(self.pool.map(lambda i: self._one(i, B), self.ids)))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown()


def local_sgd(obj: Objective, x0, cfg: LocalSgdConfig, fleet: ClientFleet, *,
              eval_obj: Optional[Objective] = None, trace: Optional[RunTrace] = None,
              stage: int = 1, record_grad_norm: bool = True,
              stop_at_gap: Optional[float] = None,
              callback: Optional[Callable] = None,
              execution: str = "vectorized", workers: Optional[int] = None):
    """Run ``cfg.T`` local steps on every client, averaging whenever ``t % k == 0``.

    Returns ``(x_tilde, trace)``: the client mean at the designated return
    index (random mode) or after the last step.  Metrics are computed on
    ``eval_obj`` (default ``obj``) at the client mean.  ``trace`` carries the
    global iteration and communication counters across calls.
    ``callback(t, fleet, averaged)`` fires after every iteration.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (obj.dim,) or fleet.dim != obj.dim:
        raise ValueError(f"dimension mismatch: x0 {x0.shape}, fleet {fleet.dim}, objective {obj.dim}")
    eval_obj = eval_obj or obj
    trace = trace if trace is not None else RunTrace()
    fstar = eval_obj.optimum.f if eval_obj.optimum is not None else None

    if cfg.return_mode == "random":
        t_hat = cfg.return_index
        if t_hat is None:
            t_hat = int(fleet.control.integers(0, cfg.T))
    else:
        t_hat = None

    def sample(t_global, eta, xhat, div):
        gap = eval_obj.value(xhat) - fstar if fstar is not None else None
        gn = None
        if record_grad_norm:
            g = eval_obj.full_gradient(xhat)
            gn = float(g @ g)
        if (gap is not None and not math.isfinite(gap)) or (gn is not None and not math.isfinite(gn)):
            raise NumericalDivergence(t_global, eta, cfg.k, stage)
        trace.append(TraceRecord(t_global, trace.comm_rounds, gap, gn, div, eta, cfg.k, stage))
        return gap

    fleet.reset(x0)
    x_tilde = x0.copy() if t_hat == 0 else None
    if not trace.records:
        sample(trace.iterations, cfg.eta, x0, 0.0)

    period = cfg.eval_every or cfg.k
    B = cfg.batch_size
    seen = 0
    t0 = trace.iterations
    eta_t = cfg.eta
    # Overflow surfaces as NumericalDivergence below, so numpy's own warnings are noise.
    with _Stepper(obj, fleet, execution, workers) as stepper, np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, cfg.T + 1):
            tg = t0 + t
            eta_t = cfg.eta if cfg.lr_alpha is None else decayed_lr(cfg.eta, cfg.lr_alpha, tg - 1)
            G = stepper.gradients(B)
            fleet.states -= eta_t * G
            if not np.all(np.isfinite(fleet.states)):
                raise NumericalDivergence(tg, eta_t, cfg.k, stage)
            if cfg.batch_growth is not None:
                seen += B
                if seen >= cfg.epoch_samples:
                    seen -= cfg.epoch_samples
                    B = grow_batch(B, cfg.batch_growth, cfg.batch_cap or B)
            averaged = t % cfg.k == 0
            want = t % period == 0 or t == cfg.T
            div = None
            if averaged:
                if want:
                    div = _spread(fleet.states, fleet.mean())
                xhat = average_models(fleet)
                trace.comm_rounds += 1
            elif want or t == t_hat:
                xhat = fleet.mean()
                if want:
                    div = _spread(fleet.states, xhat)
            trace.iterations = tg
            if t == t_hat:
                x_tilde = xhat.copy()
            if want:
                gap = sample(tg, eta_t, xhat, div)
                if stop_at_gap is not None and gap is not None and gap <= stop_at_gap:
                    trace.stopped_early = True
                    return xhat.copy(), trace
            if callback is not None:
                callback(tg, fleet, averaged)
    if x_tilde is None:
        x_tilde = fleet.mean()
    return x_tilde, trace


def run_stagewise(obj: Objective, x1, plan: StagePlan, fleet: ClientFleet,
                  prox_gamma: Optional[float] = None, *,
                  overrides: Optional[EngineOverrides] = None,
                  return_mode: str = "random", batch_size: int = 1,
                  eval_every: Optional[int] = None, record_grad_norm: bool = True,
                  stop_at_gap: Optional[float] = None,
                  execution: str = "vectorized", workers: Optional[int] = None):
    """Call Local SGD once per stage, feeding each stage's output into the next.

    With ``prox_gamma`` each stage optimizes ``f + ||x - x_s||^2 / (2 gamma)``
    around its own starting point.  Returns ``(x_final, trace, stage_iterates)``
    where ``stage_iterates`` is ``[x_1, ..., x_{S+1}]``.
    """
    if prox_gamma is not None:
        rho = obj.constants.rho
        if rho is None:
            raise ValueError("proximal stages need an objective with a declared rho")
        if not 1.0 / prox_gamma > rho:
            raise ValueError(f"1/gamma = {1.0 / prox_gamma:.6g} must exceed rho = {rho:.6g}")
    overrides = overrides or EngineOverrides()
    x = np.array(x1, dtype=float)
    iterates = [x.copy()]
    trace = RunTrace()
    for s, st in enumerate(plan.stages, start=1):
        stage_obj = prox_wrap(obj, x, prox_gamma) if prox_gamma is not None else obj
        cfg = LocalSgdConfig(
            eta=st.eta, T=st.T, k=st.k, batch_size=st.batch_size or batch_size,
            return_mode=return_mode, eval_every=eval_every,
            lr_alpha=overrides.lr_alpha, batch_growth=overrides.batch_growth,
            batch_cap=overrides.batch_cap, epoch_samples=overrides.epoch_samples,
        )
        x, trace = local_sgd(stage_obj, x, cfg, fleet, eval_obj=obj, trace=trace, stage=s,
                             record_grad_norm=record_grad_norm, stop_at_gap=stop_at_gap,
                             execution=execution, workers=workers)
        iterates.append(x.copy())
        g = obj.full_gradient(x)
        gap = obj.value(x) - obj.optimum.f if obj.optimum is not None else None
        trace.stage_ends.append({"stage": s, "t": trace.iterations, "comm_rounds": trace.comm_rounds,
                                 "gap": gap, "grad_norm_sq": float(g @ g)})
        if trace.stopped_early:
            break
    return x, trace, iterates


def sample_stage_index(S: int, rng: np.random.Generator) -> int:
    """Draw s from {1..S} with probability proportional to s."""
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    u = rng.random() * (S * (S + 1) // 2)
    acc = 0
    for s in range(1, S + 1):
        acc += s
        if u < acc:
            return s
    return S
