"""Diagnostics and closed-form bound values."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import ClientFleet, _spread
from .objectives import Objective, Optimum, solve_optimum
from .schedules import StagePlan


@dataclass(frozen=True)
class BoundInputs:
    eta: float = 0.0
    T: int = 0
    N: int = 1
    sigma2: float = 0.0
    dist0_sq: float = 0.0
    eta1: float = 0.0
    S: int = 1
    mu: Optional[float] = None


def objective_gap(obj: Objective, x) -> float:
    if obj.optimum is None:
        raise ValueError("objective has no known optimum; call ensure_optimum first")
    return obj.value(x) - obj.optimum.f


_OPTIMUM_CACHE: dict = {}


def ensure_optimum(obj: Objective, key: Optional[str] = None) -> Optimum:
    """Attach a high-precision optimum to ``obj`` if it has none, caching by ``key``."""
    if obj.optimum is not None:
        return obj.optimum
    if key is not None and key in _OPTIMUM_CACHE:
        obj.optimum = _OPTIMUM_CACHE[key]
        return obj.optimum
    opt = solve_optimum(obj)
    obj.optimum = opt
    if key is not None:
        _OPTIMUM_CACHE[key] = opt
    return opt


def zeta_at(obj: Objective, x) -> float:
    """Spread of the client gradients around the full gradient at ``x``."""
    G = obj.client_gradients(x)
    return _spread(G, obj.full_gradient(x))


def divergence(fleet: ClientFleet) -> float:
    return _spread(fleet.states, fleet.mean())


def theorem1_bound(b: BoundInputs) -> float:
    """``3 ||x0 - x*||^2 / (4 eta T) + eta sigma^2 / N`` for single-stage Local SGD."""
    return 3.0 * b.dist0_sq / (4.0 * b.eta * b.T) + b.eta * b.sigma2 / b.N


def theorem1_optimal_eta(N: int, T: int, sigma2: float, dist0_sq: float) -> float:
    return math.sqrt(3.0 * N * dist0_sq / (4.0 * sigma2 * T))


def theorem2_bound(b: BoundInputs) -> float:
    """``9 eta1 sigma^2 / (2^S N)``: the guarantee after S strongly convex stages."""
    if b.S < 1:
        raise ValueError("S must be >= 1")
    return 9.0 * b.eta1 * b.sigma2 / (2.0 ** b.S * b.N)


def stage_noise_floor(eta: float, sigma2: float, N: int) -> float:
    return 9.0 * eta * sigma2 / N


def bregman_divergence(obj: Objective, x, y) -> float:
    if not obj.convex:
        raise ValueError("Bregman divergence diagnostics assume a convex objective")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return obj.value(x) - obj.value(y) - float(obj.full_gradient(y) @ (x - y))


def comm_rounds(plan: StagePlan) -> int:
    return sum(s.T // s.k for s in plan.stages)
