"""One synchronous round of leader-assisted decentralized SGD.

A round, for every worker ``i``:

1. minibatch gradient ``g_i`` and loss on the local shard;
2. sample the active Laplacian of the current graph;
3. degrees on the active graph, losses from step 1;
4. pick the best-loss leader ``x^N`` and the max-degree leader ``x^tau`` in
   the closed neighborhood;
5. corrective step ``x_half = x - g*grad - g*lam_N (x - x^N) - g*lam_tau (x - x^tau)``;
6. averaging ``(1 - w) (sum_{j != i} W_ij x_j + W_ii x_half_i) + w_N x^N + w_tau x^tau``.

Cross-worker reads all use the pre-round snapshot, so the outcome does not
depend on the order in which workers are processed. Leader parameters in
step 6 are the pre-round values.

``neighbor_models="post"`` swaps the neighbor terms of step 6 for their
half-step models, ``W @ X_half``; with no leader terms this is the classic
D-PSGD update ``X_{k+1} = W (X_k - g G_k)``.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace

import numpy as np

from .mixing import BudgetSchedule, base_weight_matrix, sample_laplacian
from .objectives import Problem
from .topology import DynamicGraphSet

__all__ = [
    "DivergenceError",
    "HyperParams",
    "RoundInfo",
    "SystemState",
    "WorkerState",
    "closed_form_update",
    "corrective_step",
    "leader_average",
    "output_model",
    "preset",
    "run_round",
    "select_all_leaders",
    "select_leaders",
]

PRESETS = ("dpsgd", "matcha", "aldsgd", "custom", "theorem2")


class DivergenceError(FloatingPointError):
    def __init__(self, k: int, worker: int, detail: str):
        self.k = k
        self.worker = worker
        super().__init__(f"round {k}: worker {worker} {detail}")


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 0.05
    lr_schedule: tuple[tuple[int, float], ...] = ()
    lambda_best: float = 0.1
    lambda_deg: float = 0.1
    omega_best: float = 0.1
    omega_deg: float = 0.1
    alpha: float | None = None
    c_b: float = 1.0
    n_graphs: int = 3
    neighbor_models: str = "pre"

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_schedule",
                           tuple(sorted((int(r), float(f)) for r, f in self.lr_schedule)))
        if not self.gamma > 0:
            raise ValueError(f"learning rate must be positive, got {self.gamma}")
        for name in ("lambda_best", "lambda_deg", "omega_best", "omega_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.omega_best + self.omega_deg >= 1:
            raise ValueError("omega_best + omega_deg must be < 1")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.n_graphs < 1:
            raise ValueError("n_graphs must be >= 1")
        if self.neighbor_models not in ("pre", "post"):
            raise ValueError("neighbor_models must be 'pre' or 'post'")
        BudgetSchedule(self.c_b)

    @property
    def omega(self) -> float:
        return self.omega_best + self.omega_deg

    @property
    def schedule(self) -> BudgetSchedule:
        return BudgetSchedule(self.c_b)

    def lr_at(self, k: int) -> float:
        """Learning rate of round ``k``: multipliers apply from their round on, cumulatively."""
        g = self.gamma
        for start, factor in self.lr_schedule:
            if k >= start:
                g *= factor
        return g

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return out


def preset(name: str, m: int | None = None, K: int | None = None, **overrides) -> HyperParams:
    """Named parameter sets.

    ``dpsgd`` and ``matcha`` switch the leader terms off and use one static
    graph (``dpsgd`` also forces full activation). ``theorem2`` sets
    ``lambda = sqrt(m/K)`` split evenly between the two leaders and
    ``gamma = sqrt(m / ((1-omega)(1-alpha) K))``; it needs ``m``, ``K`` and
    ``alpha``.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}")
    if name in ("dpsgd", "matcha"):
        forced = dict(lambda_best=0.0, lambda_deg=0.0, omega_best=0.0, omega_deg=0.0, n_graphs=1)
        if name == "dpsgd":
            forced["c_b"] = 1.0
        base = {"neighbor_models": "post", **overrides, **forced}
        return HyperParams(**base)
    if name == "theorem2":
        if m is None or K is None or overrides.get("alpha") is None:
            raise ValueError("theorem2 preset needs m, K and alpha")
        hp = HyperParams(**overrides)
        lam = math.sqrt(m / K)
        gamma = math.sqrt(m / ((1 - hp.omega) * (1 - hp.alpha) * K))
        return replace(hp, lambda_best=lam / 2, lambda_deg=lam / 2, gamma=gamma)
    return HyperParams(**overrides)


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class WorkerState:
    x: np.ndarray
    last_loss: float
    degree: int


@dataclass
class SystemState:
    """Stacked worker parameters plus the random streams that drive them.

    ``k`` counts completed rounds; the next round has index ``k + 1``.
    """

    X: np.ndarray
    last_loss: np.ndarray
    degree: np.ndarray
    k: int
    lap_rng: np.random.Generator
    batch_rngs: list[np.random.Generator]
    start: int = 0

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def workers(self) -> list[WorkerState]:
        return [WorkerState(self.X[i], float(self.last_loss[i]), int(self.degree[i])) for i in range(self.m)]


@dataclass(frozen=True)
class RoundInfo:
    k: int
    gamma: float
    laplacian: np.ndarray
    W: np.ndarray
    grads: np.ndarray
    best: np.ndarray
    deg_leader: np.ndarray
    X_half: np.ndarray = field(repr=False, default=None)


def output_model(state: SystemState) -> np.ndarray:
    return state.X.mean(axis=0)


# ---------------------------------------------------------------------------
# steps


def select_leaders(i: int, adjacency: np.ndarray, losses: np.ndarray, degrees: np.ndarray) -> tuple[int, int]:
    """Best-loss and max-degree worker in the closed neighborhood of ``i`` (ties go to the lowest index)."""
    hood = np.flatnonzero(np.asarray(adjacency[i], dtype=bool) | (np.arange(len(losses)) == i))
    best = int(hood[np.argmin(losses[hood])])
    top = int(hood[np.argmax(degrees[hood])])
    return best, top


def select_all_leaders(adjacency: np.ndarray, losses: np.ndarray,
                       degrees: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = len(losses)
    closed = np.asarray(adjacency, dtype=bool) | np.eye(m, dtype=bool)
    # argmin/argmax return the first hit, so ties resolve to the lowest index
    best = np.where(closed, losses[None, :], np.inf).argmin(axis=1)
    top = np.where(closed, degrees[None, :].astype(float), -np.inf).argmax(axis=1)
    return best, top


def corrective_step(x_i: np.ndarray, g_i: np.ndarray, x_best: np.ndarray, x_deg: np.ndarray,
                    hp: HyperParams, gamma: float | None = None) -> np.ndarray:
    g = hp.gamma if gamma is None else gamma
    return x_i - g * g_i - g * hp.lambda_best * (x_i - x_best) - g * hp.lambda_deg * (x_i - x_deg)


def leader_average(i: int, x_half_i: np.ndarray, neighbor_params: np.ndarray, W_row_i: np.ndarray,
                   x_best: np.ndarray, x_deg: np.ndarray, hp: HyperParams) -> np.ndarray:
    """Step 6 for one worker; ``neighbor_params`` rows ``j != i`` are the neighbors' models."""
    w = np.asarray(W_row_i, dtype=float).copy()
    w_self = w[i]
    w[i] = 0.0
    mix = w @ neighbor_params + w_self * x_half_i
    return (1.0 - hp.omega) * mix + hp.omega_best * x_best + hp.omega_deg * x_deg


def closed_form_update(X: np.ndarray, G: np.ndarray, W: np.ndarray, best: np.ndarray,
                       deg_leader: np.ndarray, hp: HyperParams, gamma: float) -> np.ndarray:
    """Single-formula round update (pre-round neighbor models), used as a cross-check.

    ``x_next_i = (1-w) sum_j W_ij x_j + w_N x^N + w_tau x^tau
                 - gamma (1-w) W_ii [g_i + lam_N (x_i - x^N) + lam_tau (x_i - x^tau)]``
    """
    XN, XT = X[best], X[deg_leader]
    force = G + hp.lambda_best * (X - XN) + hp.lambda_deg * (X - XT)
    return ((1 - hp.omega) * (W @ X) + hp.omega_best * XN + hp.omega_deg * XT
            - gamma * (1 - hp.omega) * np.diag(W)[:, None] * force)


def _local_work(problem: Problem, X: np.ndarray, rngs, executor: Executor | None):
    def one(i):
        batch = problem.sample_batch(i, rngs[i])
        return problem.loss_grad(i, X[i], batch)

    idx = range(X.shape[0])
    results = list(executor.map(one, idx)) if executor is not None else [one(i) for i in idx]
    losses = np.array([r[0] for r in results])
    grads = np.stack([r[1] for r in results])
    return losses, grads


def run_round(state: SystemState, hp: HyperParams, problem: Problem, dset: DynamicGraphSet,
              executor: Executor | None = None, alpha: float | None = None,
              return_info: bool = False):
    """Advance ``state`` by one round; returns a new state (and a :class:`RoundInfo`)."""
    k = state.k + 1
    X = state.X
    m = X.shape[0]
    gamma = hp.lr_at(k)
    alpha = hp.alpha if alpha is None else alpha
    if alpha is None:
        raise ValueError("alpha must be set")

    losses, G = _local_work(problem, X, state.batch_rngs, executor)
    L = sample_laplacian(dset, k, hp.schedule, state.lap_rng, state.start)
    degrees = L.diagonal().copy()
    best, top = select_all_leaders(L < 0, losses, degrees)
    XN, XT = X[best], X[top]

    X_half = X - gamma * G - gamma * hp.lambda_best * (X - XN) - gamma * hp.lambda_deg * (X - XT)
    W = base_weight_matrix(L, alpha).entries
    if hp.neighbor_models == "post":
        mix = W @ X_half
    else:
        diag = np.diag(W).copy()
        W_off = W - np.diag(diag)
        mix = W_off @ X + diag[:, None] * X_half
    X_next = (1.0 - hp.omega) * mix + hp.omega_best * XN + hp.omega_deg * XT

    bad = ~np.isfinite(X_next).all(axis=1) | ~np.isfinite(losses) | (np.abs(losses) > 1e12)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DivergenceError(k, i, f"diverged (loss={losses[i]!r})")

    new = SystemState(X_next, losses, degrees, k, state.lap_rng, state.batch_rngs, state.start)
    if return_info:
        return new, RoundInfo(k, gamma, L, W, G, best, top, X_half)
    return new
