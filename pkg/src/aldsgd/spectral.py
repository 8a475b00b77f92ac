"""Spectral checks on the effective mixing matrix.

The quantities follow the column convention of :mod:`aldsgd.mixing`:
``P = I - J`` projects onto the consensus-error subspace (``J = 11^T/m``), and
for a sample ``W~`` we average

    W~ P W~^T      (contraction of the consensus error)
    W~ W~^T        (second moment)

Because every ``W~`` is column stochastic, ``1^T W~ W~^T 1 / m = 1`` for every
sample, so the unrestricted norm of ``E[W~ W~^T]`` never drops below one. The
second moment is therefore measured on the consensus subspace,
``||P E[W~ W~^T] P||``; the unrestricted value is reported separately as
``e2_full_norm``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mixing import BudgetSchedule
from .topology import DynamicGraphSet

__all__ = [
    "ConvergenceError",
    "ContractionReport",
    "InfeasibleParameterError",
    "LambdaZeta",
    "ParamRange",
    "SpectralReport",
    "alpha_range",
    "check_contraction",
    "default_k_free",
    "estimate_rho",
    "feasible_grid",
    "k_threshold",
    "lambda_zeta",
    "sample_effective",
    "spectral_norm",
]

LeaderPolicy = Callable[[np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray]]


class ConvergenceError(RuntimeError):
    pass


class InfeasibleParameterError(ValueError):
    """Raised when the free parameter ``k`` does not clear a lower bound.

    ``bound`` names the violated condition.
    """

    def __init__(self, bound: str, value: float, k_free: float):
        self.bound = bound
        self.value = value
        self.k_free = k_free
        super().__init__(f"k_free={k_free:.6g} violates {bound} (needs k > {value:.6g})")


def spectral_norm(C: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000,
                  dense_fallback_max: int = 64, block: int = 4) -> tuple[float, np.ndarray]:
    """Largest-magnitude eigenvalue (and eigenvector) of a symmetric matrix.

    Block power iteration with a Rayleigh-Ritz step on a ``block``-wide
    subspace, so near-degenerate leading eigenvalues (common for Monte Carlo
    estimates of symmetric topologies) do not stall convergence. Stops once
    the eigen-residual ``||Cx - lx||`` falls below ``tol * max(1, |l|)``. A
    dense eigensolve takes over when that has not happened after ``max_iter``
    steps and ``m <= dense_fallback_max``.
    """
    C = np.asarray(C, dtype=float)
    C = 0.5 * (C + C.T)
    m = C.shape[0]
    if not np.any(C):
        return 0.0, np.eye(m)[0]
    b = min(m, block)
    Q, _ = np.linalg.qr(np.random.default_rng(20240611).standard_normal((m, b)))
    for _ in range(max_iter):
        Z = C @ Q
        vals, vecs = np.linalg.eigh(Q.T @ Z)
        j = int(np.argmax(np.abs(vals)))
        lam = float(vals[j])
        x = Q @ vecs[:, j]
        if np.linalg.norm(Z @ vecs[:, j] - lam * x) <= tol * max(1.0, abs(lam)):
            return abs(lam), x
        Q, _ = np.linalg.qr(Z)
    if m <= dense_fallback_max:
        vals, vecs = np.linalg.eigh(C)
        j = int(np.argmax(np.abs(vals)))
        return float(abs(vals[j])), vecs[:, j]
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps (m={m})")


# ---------------------------------------------------------------------------
# feasible parameter window


@dataclass(frozen=True)
class LambdaZeta:
    lambda_min: float
    lambda_max: float
    zeta: float
    m: int
    disconnected: bool = False


def lambda_zeta(dset: DynamicGraphSet, sched: BudgetSchedule) -> LambdaZeta:
    """Expected-Laplacian spectra across the graph set.

    For graph ``i`` with matching Laplacians ``L_j`` and activation
    probabilities ``p_j``: ``M_i = sum p_j L_j`` and
    ``N_i = sum p_j (1 - p_j) L_j``.
    """
    probs = sched.probabilities(dset)
    lam_min, lam_max, zeta = math.inf, -math.inf, 0.0
    for laps, p in zip(dset.matching_laplacians, probs):
        M = np.tensordot(p, laps.astype(float), axes=1)
        N = np.tensordot(p * (1 - p), laps.astype(float), axes=1)
        ev = np.linalg.eigvalsh(M)
        lam_min = min(lam_min, float(ev[1]))
        lam_max = max(lam_max, float(ev[-1]))
        zeta = max(zeta, float(np.abs(np.linalg.eigvalsh(N)).max()))
    return LambdaZeta(lam_min, lam_max, zeta, dset.m, disconnected=lam_min <= 1e-10)


def k_threshold(lz: LambdaZeta) -> tuple[float, str]:
    """Lower bound on ``k`` and the name of the binding term."""
    if lz.disconnected:
        raise ValueError("a graph in the set is disconnected (lambda_min <= 1e-10)")
    terms = [(1.0, "k > 1"), (8 * lz.zeta / lz.lambda_min**2 - 1, "k > 8*zeta/lambda_min^2 - 1")]
    if lz.zeta > 0:
        terms.append((lz.lambda_max**2 / (2 * lz.zeta), "k > lambda_max^2/(2*zeta)"))
    return max(terms, key=lambda t: t[0])


def default_k_free(lz: LambdaZeta, factor: float = 1.05) -> float:
    return factor * k_threshold(lz)[0]


@dataclass(frozen=True)
class ParamRange:
    k_free: float
    alpha_min: float
    alpha_max: float
    lambda_min: float
    lambda_max: float
    zeta: float
    m: int
    threshold: float

    def omega_max(self, alpha: float) -> float:
        """Upper end of the total averaging weight ``omega = omega_N + omega_tau``."""
        return (1.0 - alpha * self.lambda_min) / (2.0 * self.k_free * math.sqrt(self.m))

    def contraction_bound(self, alpha: float) -> float:
        """``h(alpha)``, the analytic bound on rho at the top of the omega range."""
        k, lam, z = self.k_free, self.lambda_min, self.zeta
        t = 1.0 - alpha * lam
        return ((k + 1) / k) ** 2 * t**2 + 2 * t / k + 2 * alpha**2 * z


def alpha_range(lz: LambdaZeta, k_free: float | None = None) -> ParamRange:
    if lz.disconnected:
        raise ValueError("a graph in the set is disconnected (lambda_min <= 1e-10)")
    threshold, _ = k_threshold(lz)
    if k_free is None:
        k_free = default_k_free(lz)
    terms = [(1.0, "k > 1"), (8 * lz.zeta / lz.lambda_min**2 - 1, "k > 8*zeta/lambda_min^2 - 1")]
    if lz.zeta > 0:
        terms.append((lz.lambda_max**2 / (2 * lz.zeta), "k > lambda_max^2/(2*zeta)"))
    for value, name in terms:
        if not k_free > value:
            raise InfeasibleParameterError(name, value, k_free)
    k, lam, z = k_free, lz.lambda_min, lz.zeta
    den = (k + 1) ** 2 * lam**2 + 2 * k**2 * z
    return ParamRange(
        k_free=k,
        alpha_min=(k + 1) ** 2 * lam / den,
        # capped at 1/lambda_min so that 1 - alpha*lambda_min stays nonnegative
        alpha_max=min(1.0 / lam, ((k + 1) ** 2 + k) * lam / den),
        lambda_min=lam,
        lambda_max=lz.lambda_max,
        zeta=z,
        m=lz.m,
        threshold=threshold,
    )


def feasible_grid(pr: ParamRange, n_alpha: int = 5, n_omega: int = 4) -> list[tuple[float, float]]:
    """Interior grid of ``(alpha, omega)`` pairs, ``omega`` being the total averaging weight.

    Points sit strictly inside ``(alpha_min, alpha_max)`` and ``(0, omega_max(alpha))``.
    When ``omega_max(alpha) <= 0`` the omega values come out nonpositive;
    callers decide what to do with such an empty window.
    """
    out = []
    for a in range(1, n_alpha + 1):
        alpha = pr.alpha_min + a / (n_alpha + 1) * (pr.alpha_max - pr.alpha_min)
        w_max = pr.omega_max(alpha)
        for b in range(1, n_omega + 1):
            out.append((alpha, b / (n_omega + 1) * w_max))
    return out


# ---------------------------------------------------------------------------
# Monte Carlo estimates


def _uniform_leaders(L: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    S, m, _ = L.shape
    closed = (L < 0) | np.eye(m, dtype=bool)
    picks = []
    for _ in range(2):
        scores = rng.random((S, m, m))
        scores[~closed] = -1.0
        picks.append(scores.argmax(axis=2))
    return picks[0], picks[1]


def _self_leaders(L: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    S, m, _ = L.shape
    own = np.broadcast_to(np.arange(m), (S, m)).copy()
    return own, own.copy()


def _equal_loss_leaders(L: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Leaders the protocol picks when every worker reports the same loss."""
    S, m, _ = L.shape
    closed = (L < 0) | np.eye(m, dtype=bool)
    best = closed.argmax(axis=2)
    deg = np.einsum("sii->si", L)
    top = np.where(closed, deg[:, None, :], -1.0).argmax(axis=2)
    return best, top


def _resolve_policy(policy: str | LeaderPolicy) -> LeaderPolicy:
    if callable(policy):
        return policy
    if policy == "uniform":
        return _uniform_leaders
    if policy == "self":
        return _self_leaders
    if policy == "equal_loss":
        return _equal_loss_leaders
    raise ValueError(f"unknown leader policy {policy!r}")


def sample_effective(dset: DynamicGraphSet, graph_idx: int, sched: BudgetSchedule, alpha: float,
                     omega_best: float, omega_deg: float, leader_policy: str | LeaderPolicy,
                     size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` independent effective matrices for one graph; shape ``(size, m, m)``."""
    m = dset.m
    laps = dset.matching_laplacians[graph_idx].astype(float)
    mask = rng.random((size, laps.shape[0])) < sched.c_b
    L = np.einsum("sj,jab->sab", mask.astype(float), laps)
    W = np.eye(m) - alpha * L
    best, deg = _resolve_policy(leader_policy)(L, rng)
    rows = np.arange(size)[:, None]
    cols = np.arange(m)[None, :]
    A_best = np.zeros((size, m, m))
    A_best[rows, best, cols] = 1.0
    A_deg = np.zeros((size, m, m))
    A_deg[rows, deg, cols] = 1.0
    return (1.0 - omega_best - omega_deg) * W + omega_best * A_best + omega_deg * A_deg


@dataclass(frozen=True)
class SpectralReport:
    rho: float
    e1_norm: float
    e2_norm: float
    samples: int
    std_err: float
    e2_full_norm: float = 0.0
    phase_rho: tuple[float, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "e1_norm": self.e1_norm,
            "e2_norm": self.e2_norm,
            "e2_full_norm": self.e2_full_norm,
            "samples": self.samples,
            "std_err": self.std_err,
            "phase_rho": list(self.phase_rho),
        }


def estimate_rho(dset: DynamicGraphSet, sched: BudgetSchedule, alpha: float, omega_best: float,
                 omega_deg: float, leader_policy: str | LeaderPolicy = "uniform",
                 samples: int = 2000, rng: np.random.Generator | None = None) -> SpectralReport:
    """Monte Carlo estimate of rho, the worst case over the graphs of the set.

    ``std_err`` is first-order: with ``v`` the top eigenvector of the averaged
    matrix, it is the standard error of ``v^T X_s v`` over the samples.
    """
    if samples < 100:
        raise ValueError(f"need at least 100 samples, got {samples}")
    rng = np.random.default_rng(0) if rng is None else rng
    m = dset.m
    P = np.eye(m) - np.full((m, m), 1.0 / m)
    best = None
    e1_all, e2_all, e2_full_all, phase_rho = [], [], [], []
    for idx in range(dset.n):
        Wt = sample_effective(dset, idx, sched, alpha, omega_best, omega_deg, leader_policy, samples, rng)
        second = Wt @ Wt.transpose(0, 2, 1)
        rows = Wt.sum(axis=2)
        contraction = second - rows[:, :, None] * rows[:, None, :] / m
        C1 = contraction.mean(axis=0)
        C2 = second.mean(axis=0)
        e1, v1 = spectral_norm(C1)
        e2, v2 = spectral_norm(P @ C2 @ P)
        e2_full, _ = spectral_norm(C2)
        e1_all.append(e1)
        e2_all.append(e2)
        e2_full_all.append(e2_full)
        phase_rho.append(max(e1, e2))
        for value, vec, stack in ((e1, v1, contraction), (e2, P @ v2, second)):
            if best is None or value > best[0]:
                q = np.einsum("i,sij,j->s", vec, stack, vec)
                best = (value, float(q.std(ddof=1) / math.sqrt(samples)))
    return SpectralReport(
        rho=max(phase_rho),
        e1_norm=max(e1_all),
        e2_norm=max(e2_all),
        samples=samples,
        std_err=best[1],
        e2_full_norm=max(e2_full_all),
        phase_rho=tuple(phase_rho),
    )


@dataclass(frozen=True)
class ContractionReport:
    passed: bool
    empirical_mean: float
    std_err: float
    bound: float
    margin: float
    n_products: int
    trials: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_contraction(dset: DynamicGraphSet, sched: BudgetSchedule, alpha: float, omega_best: float,
                      omega_deg: float, rho: float | SpectralReport, n_products: int = 20,
                      trials: int = 500, rng: np.random.Generator | None = None,
                      leader_policy: str | LeaderPolicy = "uniform") -> ContractionReport:
    """Empirical check of ``E||B (prod W~_k) (I - J)||_F^2 <= rho^n ||B||_F^2``.

    Each trial draws a fresh ``B`` with unit Frobenius norm and a fresh matrix
    sequence following the graph schedule (round ``k`` uses graph
    ``(k - 1) mod n``). Passes when the trial mean stays within three standard
    errors of ``rho^n``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    rho_value = rho.rho if isinstance(rho, SpectralReport) else float(rho)
    m = dset.m
    B = rng.standard_normal((trials, m, m))
    B /= np.linalg.norm(B, axis=(1, 2))[:, None, None]
    prod = np.broadcast_to(np.eye(m), (trials, m, m)).copy()
    for k in range(1, n_products + 1):
        Wt = sample_effective(dset, dset.graph_index(k), sched, alpha, omega_best, omega_deg,
                              leader_policy, trials, rng)
        prod = prod @ Wt
    P = np.eye(m) - np.full((m, m), 1.0 / m)
    vals = np.linalg.norm(B @ prod @ P, axis=(1, 2)) ** 2
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    bound = rho_value**n_products
    margin = bound + 3 * se - mean
    return ContractionReport(margin >= 0, mean, se, bound, margin, n_products, trials)
