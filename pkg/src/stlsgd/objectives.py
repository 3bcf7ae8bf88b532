"""Objective oracles: value, full and stochastic gradients, and their constants.

Every objective is a sum over ``num_clients`` client objectives,
``f(x) = (1/N) sum_i f_i(x)``.  Stochastic gradients are produced in batches
of client rows by :meth:`Objective.sample_gradients`; the single-client
:meth:`Objective.stochastic_gradient` is the same kernel applied to a slice,
so per-client and vectorized evaluation agree bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset


@dataclass(frozen=True)
class ObjectiveConstants:
    L: float
    mu: Optional[float] = None
    rho: Optional[float] = None
    sigma2: float = 0.0
    zeta_star: Optional[float] = None

    def __post_init__(self):
        if self.L < 0:
            raise ValueError(f"L must be >= 0, got {self.L}")
        if self.mu is not None and self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.rho is not None:
            if self.rho <= 0:
                raise ValueError(f"rho must be > 0, got {self.rho}")
            if self.rho > self.L:
                raise ValueError(f"rho={self.rho} exceeds L={self.L}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.zeta_star is not None and self.zeta_star < 0:
            raise ValueError(f"zeta_star must be >= 0, got {self.zeta_star}")


@dataclass(frozen=True)
class Optimum:
    x: np.ndarray
    f: float


class Objective:
    """Base class for finite-sum objectives split across clients.

    Subclasses implement :meth:`value`, :meth:`client_gradients` and
    :meth:`sample_gradients`.
    """

    dim: int
    num_clients: int
    constants: ObjectiveConstants
    optimum: Optional[Optimum] = None
    convex: bool = True

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected vector of shape ({self.dim},), got {x.shape}")
        return x

    def value(self, x) -> float:
        raise NotImplementedError

    def client_gradients(self, x) -> np.ndarray:
        """Exact gradients of every client objective at ``x``, shape (N, dim)."""
        raise NotImplementedError

    def full_gradient(self, x) -> np.ndarray:
        return _row_mean(self.client_gradients(x))

    def client_gradient(self, x, client_id: int) -> np.ndarray:
        return self.client_gradients(x)[client_id]

    def sample_gradients(self, X: np.ndarray, client_ids: Sequence[int],
                         rngs: Sequence[np.random.Generator], batch_size: int = 1) -> np.ndarray:
        """Stochastic gradients for rows of ``X``; row j belongs to ``client_ids[j]``
        and draws only from ``rngs[j]``."""
        raise NotImplementedError

    def stochastic_gradient(self, x, client_id: int, rng: np.random.Generator,
                            batch_size: int = 1) -> np.ndarray:
        x = self._check(x)
        return self.sample_gradients(x[None, :], [client_id], [rng], batch_size)[0]


def _row_mean(rows: np.ndarray) -> np.ndarray:
    base = rows[0]
    acc = np.zeros_like(base)
    for j in range(1, rows.shape[0]):
        acc += rows[j] - base
    return base + acc / rows.shape[0]


def objective_value(obj: Objective, x) -> float:
    return float(obj.value(obj._check(x)))


class QuadraticObjective(Objective):
    """Client i minimizes ``0.5 * ||x - c_i||^2``; gradient noise is isotropic Gaussian."""

    def __init__(self, centers, sigma2: float = 0.0):
        centers = np.asarray(centers, dtype=float)
        if centers.ndim == 1:
            centers = centers[:, None]
        if centers.ndim != 2 or centers.shape[0] == 0:
            raise ValueError("centers must be a non-empty list of equal-length vectors")
        if sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
        self.centers = centers
        self.num_clients, self.dim = centers.shape
        self.sigma2 = float(sigma2)
        xstar = _row_mean(centers)
        diffs = centers - xstar
        fstar = float(np.mean(0.5 * np.sum(diffs ** 2, axis=1)))
        zeta = float(np.mean(np.sum(diffs ** 2, axis=1)))
        self.optimum = Optimum(xstar, fstar)
        self.constants = ObjectiveConstants(L=1.0, mu=1.0, sigma2=self.sigma2, zeta_star=zeta)

    def value(self, x) -> float:
        x = self._check(x)
        return float(np.mean(0.5 * np.sum((x - self.centers) ** 2, axis=1)))

    def client_gradients(self, x) -> np.ndarray:
        x = self._check(x)
        return x - self.centers

    def sample_gradients(self, X, client_ids, rngs, batch_size=1):
        G = X - self.centers[np.asarray(client_ids, dtype=int)]
        if self.sigma2 > 0:
            # Mean of batch_size i.i.d. draws has the same law as one draw scaled by 1/sqrt(b).
            scale = math.sqrt(self.sigma2 / (self.dim * batch_size))
            noise = np.stack([rng.standard_normal(self.dim) for rng in rngs])
            G = G + scale * noise
        return G


def quadratic_objective(centers, sigma2: float = 0.0) -> QuadraticObjective:
    return QuadraticObjective(centers, sigma2)


class LogisticObjective(Objective):
    """L2-regularized logistic regression over a libsvm dataset.

    With ``shards`` each client owns the listed example indices and the global
    objective is the average of the client objectives; without shards there is
    a single client holding every example.
    """

    def __init__(self, dataset: Dataset, lam: float, shards=None):
        if dataset.num_examples == 0:
            raise ValueError("logistic objective needs a non-empty dataset")
        if lam < 0:
            raise ValueError(f"lambda must be >= 0, got {lam}")
        y = np.asarray(dataset.labels, dtype=float)
        if not np.all((y == 1.0) | (y == -1.0)):
            bad = sorted(set(y[(y != 1.0) & (y != -1.0)].tolist()))[:5]
            raise ValueError(f"labels must be in {{-1, +1}}, found {bad}")
        self.X = dataset.dense()
        self.y = y
        self.lam = float(lam)
        n, self.dim = self.X.shape
        if shards is None:
            shards = [np.arange(n)]
        self.shards = [np.asarray(s, dtype=np.int64) for s in shards]
        if any(len(s) == 0 for s in self.shards):
            raise ValueError("every client shard must be non-empty")
        self.num_clients = len(self.shards)
        # Per-example weight 1/(N |shard|) so that value() is the mean of client objectives.
        self._weights = np.zeros(n)
        for s in self.shards:
            np.add.at(self._weights, s, 1.0 / (self.num_clients * len(s)))
        self._shard_X = [self.X[s] for s in self.shards]
        self._shard_y = [self.y[s] for s in self.shards]
        L = 0.25 * float(np.max(np.sum(self.X ** 2, axis=1))) + self.lam
        self.constants = ObjectiveConstants(L=L, mu=self.lam if self.lam > 0 else None)

    def value(self, x) -> float:
        x = self._check(x)
        margins = self.y * (self.X @ x)
        # log(1 + exp(-m)), stable for either sign of m
        loss = np.maximum(-margins, 0.0) + np.log1p(np.exp(-np.abs(margins)))
        return float(self._weights @ loss) + 0.5 * self.lam * float(x @ x)

    def full_gradient(self, x) -> np.ndarray:
        x = self._check(x)
        margins = self.y * (self.X @ x)
        coef = -self.y * expit(-margins) * self._weights
        return self.X.T @ coef + self.lam * x

    def hessian(self, x) -> np.ndarray:
        x = self._check(x)
        p = expit(self.y * (self.X @ x))
        curv = self._weights * p * (1.0 - p)
        return (self.X.T * curv) @ self.X + self.lam * np.eye(self.dim)

    def client_gradients(self, x) -> np.ndarray:
        x = self._check(x)
        out = np.empty((self.num_clients, self.dim))
        for i, (Xs, ys) in enumerate(zip(self._shard_X, self._shard_y)):
            coef = -ys * expit(-ys * (Xs @ x))
            out[i] = Xs.T @ coef / len(ys) + self.lam * x
        return out

    def sample_gradients(self, X, client_ids, rngs, batch_size=1):
        rows = np.empty((len(client_ids), batch_size), dtype=np.int64)
        for j, (cid, rng) in enumerate(zip(client_ids, rngs)):
            shard = self.shards[cid]
            rows[j] = shard[rng.integers(0, len(shard), size=batch_size)]
        A = self.X[rows]
        yb = self.y[rows]
        margins = yb * np.einsum("nbd,nd->nb", A, X)
        coef = -yb * expit(-margins) / batch_size
        return np.einsum("nb,nbd->nd", coef, A) + self.lam * X


def logistic_objective(dataset: Dataset, lam: float, shards=None) -> LogisticObjective:
    return LogisticObjective(dataset, lam, shards)


class PLObjective(Objective):
    """``f(x) = x^2 + 3 sin^2(x)``: non-convex, 8-smooth, 4-weakly convex and PL.

    Every client holds the same function; stochastic gradients add Gaussian
    noise of variance ``sigma2``.
    """

    # Minimum of f'(x)^2 / (2 f(x)) over a 1e-4 grid on [-10, 10].
    MU_PL = 0.175530985989065

    convex = False

    def __init__(self, sigma2: float = 1.0, num_clients: int = 1):
        if num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        self.dim = 1
        self.num_clients = num_clients
        self.sigma2 = float(sigma2)
        self.constants = ObjectiveConstants(L=8.0, mu=self.MU_PL, rho=4.0,
                                            sigma2=self.sigma2, zeta_star=0.0)
        self.optimum = Optimum(np.zeros(1), 0.0)

    @staticmethod
    def _f(x):
        return x ** 2 + 3.0 * np.sin(x) ** 2

    @staticmethod
    def _df(x):
        return 2.0 * x + 3.0 * np.sin(2.0 * x)

    def value(self, x) -> float:
        x = self._check(x)
        return float(self._f(x)[0])

    def client_gradients(self, x) -> np.ndarray:
        x = self._check(x)
        return np.repeat(self._df(x)[None, :], self.num_clients, axis=0)

    def full_gradient(self, x) -> np.ndarray:
        return self._df(self._check(x))

    def sample_gradients(self, X, client_ids, rngs, batch_size=1):
        G = self._df(X)
        if self.sigma2 > 0:
            scale = math.sqrt(self.sigma2 / batch_size)
            G = G + scale * np.stack([rng.standard_normal(1) for rng in rngs])
        return G


def pl_objective(sigma2: float = 1.0, num_clients: int = 1) -> PLObjective:
    return PLObjective(sigma2, num_clients)


def pl_constant_on_grid(lo: float = -10.0, hi: float = 10.0, step: float = 1e-4) -> float:
    """Brute-force PL constant of :class:`PLObjective` over a uniform grid."""
    n = int(round((hi - lo) / step))
    x = lo + step * np.arange(n + 1)
    f = PLObjective._f(x)
    g = PLObjective._df(x)
    keep = f > 0
    return float(np.min(g[keep] ** 2 / (2.0 * f[keep])))


class ProxObjective(Objective):
    """``f(x) + ||x - center||^2 / (2 gamma)`` around a fixed center."""

    def __init__(self, inner: Objective, center, gamma: float):
        if not gamma > 0:
            raise ValueError(f"gamma must be > 0, got {gamma}")
        center = np.asarray(center, dtype=float)
        if center.shape != (inner.dim,):
            raise ValueError(f"center shape {center.shape} does not match dim {inner.dim}")
        self.inner = inner
        self.center = center.copy()
        self.gamma = float(gamma)
        self.dim = inner.dim
        self.num_clients = inner.num_clients
        self.L_gamma = inner.constants.L + 1.0 / self.gamma
        rho = inner.constants.rho
        if rho is not None:
            mu = 1.0 / self.gamma - rho if 1.0 / self.gamma > rho else None
        else:
            mu = (inner.constants.mu or 0.0) + 1.0 / self.gamma
        self.convex = rho is None or 1.0 / self.gamma > rho
        self.constants = ObjectiveConstants(L=self.L_gamma, mu=mu,
                                            sigma2=inner.constants.sigma2)

    def value(self, x) -> float:
        x = self._check(x)
        d = x - self.center
        return self.inner.value(x) + float(d @ d) / (2.0 * self.gamma)

    def full_gradient(self, x) -> np.ndarray:
        x = self._check(x)
        return self.inner.full_gradient(x) + (x - self.center) / self.gamma

    def client_gradients(self, x) -> np.ndarray:
        x = self._check(x)
        return self.inner.client_gradients(x) + (x - self.center) / self.gamma

    def sample_gradients(self, X, client_ids, rngs, batch_size=1):
        return self.inner.sample_gradients(X, client_ids, rngs, batch_size) + (X - self.center) / self.gamma


def prox_wrap(inner: Objective, center, gamma: float) -> ProxObjective:
    return ProxObjective(inner, center, gamma)


def estimate_sigma2(obj: Objective, x, rng: np.random.Generator, draws: int = 1000,
                    batch_size: int = 1) -> float:
    """Mean of ``||g(x, xi) - grad f_i(x)||^2`` over clients and ``draws`` samples."""
    x = obj._check(x)
    exact = obj.client_gradients(x)
    total = 0.0
    for _ in range(draws):
        for i in range(obj.num_clients):
            g = obj.stochastic_gradient(x, i, rng, batch_size)
            total += float(np.sum((g - exact[i]) ** 2))
    return total / (draws * obj.num_clients)


def solve_optimum(obj: Objective, x0=None, tol: float = 1e-10, max_iter: int = 200) -> Optimum:
    """High-precision minimizer of a smooth strongly convex objective.

    Newton's method with backtracking, using a finite-difference Hessian of
    the exact gradient when the objective has no analytic one.  Stops once
    ``||grad f|| < tol``.
    """
    x = np.zeros(obj.dim) if x0 is None else np.array(x0, dtype=float)
    hess = getattr(obj, "hessian", None)
    fx = obj.value(x)
    for _ in range(max_iter):
        g = obj.full_gradient(x)
        if np.linalg.norm(g) < tol:
            return Optimum(x, fx)
        H = hess(x) if hess is not None else _fd_hessian(obj, x)
        step = np.linalg.solve(H, g)
        a = 1.0
        while a > 1e-12:
            xn = x - a * step
            fn = obj.value(xn)
            if fn <= fx - 1e-4 * a * float(g @ step):
                break
            a *= 0.5
        else:
            # Newton step no longer decreases f at double precision; accept it
            xn = x - step
            fn = obj.value(xn)
        x, fx = xn, fn
    g = obj.full_gradient(x)
    if np.linalg.norm(g) >= tol:
        raise RuntimeError(f"optimum solver stalled at gradient norm {np.linalg.norm(g):.3e}")
    return Optimum(x, fx)


def _fd_hessian(obj: Objective, x, h: float = 1e-6) -> np.ndarray:
    d = obj.dim
    H = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        H[:, j] = (obj.full_gradient(x + e) - obj.full_gradient(x - e)) / (2 * h)
    return 0.5 * (H + H.T)
