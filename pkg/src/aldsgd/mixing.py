"""Per-round weight matrices.

Conventions: models are stacked as rows of an ``(m, d)`` array ``P``. The
gossip matrix ``W = I - alpha*L`` is symmetric, so row ``i`` holds node ``i``'s
averaging weights. Selection matrices and the effective matrix ``W~`` follow
the column convention of ``X_{k+1} = X_k W~`` with ``X = P.T``: column ``i``
of ``W~`` holds the weights node ``i`` applies, so every column sums to one.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .topology import DynamicGraphSet

__all__ = [
    "BudgetSchedule",
    "MixingMatrix",
    "NegativeWeightWarning",
    "base_weight_matrix",
    "effective_mixing",
    "sample_laplacian",
    "sample_matching_mask",
    "selection_matrices",
    "write_matrix_csv",
]


class NegativeWeightWarning(UserWarning):
    """alpha is large enough that W = I - alpha*L has negative entries."""


@dataclass(frozen=True)
class BudgetSchedule:
    """Communication budget; every matching is activated with probability ``c_b``."""

    c_b: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.c_b <= 1.0:
            raise ValueError(f"communication budget must be in (0, 1], got {self.c_b}")

    def probabilities(self, dset: DynamicGraphSet) -> list[np.ndarray]:
        return [np.full(len(dec), self.c_b) for dec in dset.decompositions]


@dataclass(frozen=True)
class MixingMatrix:
    entries: np.ndarray
    kind: str  # "base" or "effective"
    has_negative: bool = False

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def sample_matching_mask(dset: DynamicGraphSet, graph_idx: int, sched: BudgetSchedule,
                         rng: np.random.Generator) -> np.ndarray:
    """Bernoulli activation flags, one per matching of ``graphs[graph_idx]``.

    One uniform draw per matching is consumed even when ``c_b = 1``, so the
    stream position does not depend on the budget.
    """
    n_match = len(dset.decompositions[graph_idx])
    return rng.random(n_match) < sched.c_b


def sample_laplacian(dset: DynamicGraphSet, k: int, sched: BudgetSchedule,
                     rng: np.random.Generator, start: int = 0) -> np.ndarray:
    """Laplacian of the links active in round ``k`` (1-based).

    Round ``k`` uses ``graphs[(k - 1 + start) mod n]``; each of its matchings is
    switched on independently with probability ``c_b``.
    """
    if k < 1:
        raise ValueError(f"round index starts at 1, got {k}")
    idx = dset.graph_index(k, start)
    mask = sample_matching_mask(dset, idx, sched, rng)
    laps = dset.matching_laplacians[idx]
    return laps[mask].sum(axis=0, dtype=np.int64) if mask.any() else np.zeros((dset.m, dset.m), np.int64)


def base_weight_matrix(L: np.ndarray, alpha: float) -> MixingMatrix:
    """``W = I - alpha*L``; flagged (not rejected) when some entry goes negative."""
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    m = L.shape[0]
    W = np.eye(m) - alpha * L
    negative = bool(alpha * L.diagonal().max(initial=0) > 1.0)
    if negative:
        warnings.warn(f"alpha={alpha} gives negative self-weights (max degree "
                      f"{int(L.diagonal().max())})", NegativeWeightWarning, stacklevel=2)
    return MixingMatrix(W, "base", negative)


def selection_matrices(leaders: Sequence[tuple[int, int]] | np.ndarray,
                       adjacency: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One-hot selection matrices for the best-loss and max-degree leaders.

    ``leaders[i] = (best_idx, maxdeg_idx)``. Column ``i`` of each returned
    matrix is ``e_{leader(i)}``. If ``adjacency`` is given, each leader must be
    ``i`` itself or one of its neighbors.
    """
    leaders = np.asarray(leaders, dtype=np.int64).reshape(-1, 2)
    m = leaders.shape[0]
    if adjacency is not None:
        closed = np.asarray(adjacency, dtype=bool) | np.eye(m, dtype=bool)
        for i, (b, t) in enumerate(leaders):
            for role, j in (("best-loss", b), ("max-degree", t)):
                if not 0 <= j < m or not closed[i, j]:
                    raise ValueError(f"{role} leader {j} is outside the closed neighborhood of node {i}")
    cols = np.arange(m)
    A_best = np.zeros((m, m))
    A_best[leaders[:, 0], cols] = 1.0
    A_deg = np.zeros((m, m))
    A_deg[leaders[:, 1], cols] = 1.0
    return A_best, A_deg


def effective_mixing(W: MixingMatrix | np.ndarray, A_best: np.ndarray, A_deg: np.ndarray,
                     omega_best: float, omega_deg: float) -> MixingMatrix:
    """``W~ = (1 - w_N - w_t) W + w_N A_N + w_t A_t`` (columns sum to one)."""
    if omega_best < 0 or omega_deg < 0:
        raise ValueError("averaging weights must be nonnegative")
    if omega_best + omega_deg >= 1:
        raise ValueError(f"omega_N + omega_tau must be < 1, got {omega_best + omega_deg}")
    W = np.asarray(W, dtype=float)
    entries = (1.0 - omega_best - omega_deg) * W + omega_best * A_best + omega_deg * A_deg
    return MixingMatrix(entries, "effective", bool((entries < 0).any()))


def write_matrix_csv(matrix: np.ndarray | MixingMatrix, path: str | Path) -> None:
    """Dump a matrix row-major at full precision (debugging aid)."""
    arr = np.asarray(matrix, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in arr:
            writer.writerow([repr(float(x)) for x in row])
