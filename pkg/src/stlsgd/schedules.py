"""Stage plans for STL-SGD and the baseline configurations."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

REGIMES = ("sc", "nc-opt1", "nc-opt2", "baseline")
BASELINES = ("sync", "local-fixed-k", "lb-sgd", "cr-psgd")


class TheoryWarning(UserWarning):
    """A plan parameter is outside the range the convergence theory covers."""


@dataclass(frozen=True)
class Stage:
    eta: float
    T: int
    k_real: float
    batch_size: Optional[int] = None

    @property
    def k(self) -> int:
        """Communication period actually used: ``max(floor(k_real), 1)``."""
        return max(int(math.floor(self.k_real)), 1)

    @property
    def rounds(self) -> int:
        return self.T // self.k


@dataclass(frozen=True)
class EngineOverrides:
    """Per-iteration behaviour the baselines layer on top of a plain stage.

    ``lr_alpha`` turns on the decaying rate ``eta1 / (1 + alpha t)``;
    ``batch_growth`` multiplies the per-client batch once per epoch of
    ``epoch_samples`` draws, flooring and capping at ``batch_cap``.
    """
    lr_alpha: Optional[float] = None
    batch_growth: Optional[float] = None
    batch_cap: Optional[int] = None
    epoch_samples: Optional[int] = None


@dataclass(frozen=True)
class StagePlan:
    stages: tuple
    regime: str
    iid: bool
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a plan needs at least one stage")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")

    def __len__(self):
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)

    @property
    def total_iterations(self) -> int:
        return sum(s.T for s in self.stages)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stages"] = [dict(asdict(s), k=s.k) for s in self.stages]
        return out


def decayed_lr(eta1: float, alpha: float, t: int) -> float:
    """``eta1 / (1 + alpha t)`` for global iteration index ``t`` (0-based)."""
    return eta1 / (1.0 + alpha * t)


def grow_batch(B: int, rho_B: float, cap: int) -> int:
    return min(int(math.floor(rho_B * B)), cap)


def initial_k(iid: bool, eta1: float, L: float, N: int, sigma2: float = 0.0,
              zeta_star: float = 0.0) -> float:
    """Largest communication period the single-stage theory allows, before flooring.

    Pass the regularized smoothness ``L + 1/gamma`` as ``L`` for the
    non-convex regimes.
    """
    if eta1 <= 0 or L <= 0 or N < 1:
        raise ValueError("initial_k needs eta1 > 0, L > 0 and N >= 1")
    cap = 1.0 / (9.0 * eta1 * L)
    if iid:
        return min(1.0 / (6.0 * eta1 * L * N), cap)
    if sigma2 <= 0:
        if zeta_star > 0:
            raise ValueError("Non-IID k1 is undefined with sigma2 = 0 and zeta_star > 0; "
                             "set k1 explicitly")
        # sigma2 -> 0 limit with zeta_star = 0
        return min(1.0 / math.sqrt(6.0 * eta1 * L * N), cap)
    sigma = math.sqrt(sigma2)
    return min(sigma / math.sqrt(6.0 * eta1 * L * N * (sigma2 + 4.0 * zeta_star)), cap)


def stage_count_requirement(N: int, initial_gap: float, eta1: float, sigma2: float) -> int:
    """Smallest integer S with ``S >= ln(N gap0 / (eta1 sigma2)) + 2`` (and S >= 1)."""
    if initial_gap <= 0:
        return 1
    bound = math.log(N * initial_gap / (eta1 * sigma2)) + 2.0
    return max(1, math.ceil(bound - 1e-12))


def _check_product(eta1, T1, target, label):
    if target is not None and not math.isclose(eta1 * T1, target, rel_tol=1e-2):
        warnings.warn(f"eta1*T1 = {eta1 * T1:.6g} but theory expects {label} = {target:.6g}",
                      TheoryWarning, stacklevel=3)


def _geometric(eta1, T1, k1, S, iid):
    growth = 2.0 if iid else math.sqrt(2.0)
    stages = []
    eta, T, k = eta1, T1, float(k1)
    for _ in range(S):
        stages.append(Stage(eta, T, k))
        eta, T, k = eta / 2.0, 2 * T, k * growth
    return tuple(stages)


def _validate(eta1, T1, k1, S):
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if eta1 <= 0 or T1 < 1 or k1 <= 0:
        raise ValueError("need eta1 > 0, T1 >= 1 and k1 > 0")


def plan_stl_sc(eta1: float, T1: int, k1: float, S: int, iid: bool,
                mu: Optional[float] = None) -> StagePlan:
    """Halve the rate, double the stage length and grow k by 2 (IID) or sqrt 2 per stage."""
    _validate(eta1, T1, k1, S)
    _check_product(eta1, T1, None if mu is None else 6.0 / mu, "6/mu")
    return StagePlan(_geometric(eta1, T1, k1, S, iid), "sc", iid,
                     {"eta1": eta1, "T1": T1, "k1": k1, "S": S})


def plan_stl_nc(eta1: float, T1: int, k1: float, S: int, iid: bool, option: int,
                rho: Optional[float] = None) -> StagePlan:
    _validate(eta1, T1, k1, S)
    prov = {"eta1": eta1, "T1": T1, "k1": k1, "S": S, "option": option}
    if option == 1:
        _check_product(eta1, T1, None if rho is None else 6.0 / rho, "6/rho")
        return StagePlan(_geometric(eta1, T1, k1, S, iid), "nc-opt1", iid, prov)
    if option == 2:
        _check_product(eta1, T1, None if rho is None else 3.0 / rho, "3/rho")
        stages = tuple(
            Stage(eta1 / s, s * T1, (s if iid else math.sqrt(s)) * float(k1))
            for s in range(1, S + 1)
        )
        return StagePlan(stages, "nc-opt2", iid, prov)
    raise ValueError(f"option must be 1 or 2, got {option!r}")


def plan_baseline(kind: str, *, eta1: float, T: int, k: Optional[int] = None,
                  alpha: Optional[float] = None, batch_size: int = 1,
                  B: Optional[int] = None, rho_B: Optional[float] = None,
                  B_cap: int = 512, epoch_samples: Optional[int] = None,
                  iid: bool = True) -> tuple[StagePlan, EngineOverrides]:
    """Single-stage plans for SyncSGD, fixed-period Local SGD, LB-SGD and CR-PSGD."""
    if eta1 <= 0 or T < 1:
        raise ValueError("need eta1 > 0 and T >= 1")

    def need(name, value):
        if value is None:
            raise ValueError(f"baseline {kind!r} requires parameter {name!r}")
        return value

    prov = {"kind": kind, "eta1": eta1, "T": T}
    if kind == "sync":
        alpha = need("alpha", alpha)
        stage = Stage(eta1, T, 1.0, batch_size)
        over = EngineOverrides(lr_alpha=alpha)
    elif kind == "local-fixed-k":
        alpha = need("alpha", alpha)
        k = need("k", k)
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        stage = Stage(eta1, T, float(k), batch_size)
        over = EngineOverrides(lr_alpha=alpha)
    elif kind == "lb-sgd":
        alpha = need("alpha", alpha)
        stage = Stage(eta1, T, 1.0, need("B", B))
        over = EngineOverrides(lr_alpha=alpha)
    elif kind == "cr-psgd":
        stage = Stage(eta1, T, 1.0, need("B", B))
        over = EngineOverrides(lr_alpha=alpha, batch_growth=need("rho_B", rho_B),
                               batch_cap=B_cap, epoch_samples=need("epoch_samples", epoch_samples))
    else:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    prov.update(alpha=alpha, k=stage.k, B=stage.batch_size, rho_B=rho_B)
    return StagePlan((stage,), "baseline", iid, prov), over
