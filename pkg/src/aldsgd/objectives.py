"""Local objectives, minibatch gradients and the constants that enter the convergence bound.

Three desk-scale problem families:

* ``quadratic``: sample ``s`` has loss ``0.5 (x - s)^T Q_i (x - s) - c_i`` on
  worker ``i``. ``c_i`` is chosen so that the shard average is exactly
  ``F_i(x) = 0.5 (x - b_i)^T Q_i (x - b_i)`` with ``b_i`` the shard mean.
* ``logistic``: two Gaussian classes, bias feature appended, small ridge term.
* ``mlp``: one tanh hidden layer with a sigmoid output on XOR-style clusters.

Every sample carries a group id (region for quadratics, class label for the
classifiers) and ``label_skew(s)`` puts a fraction ``s`` of each worker's
shard in its preferred group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import minimize

from .seeding import stream

__all__ = [
    "ConstantEstimates",
    "Problem",
    "ProblemSpec",
    "estimate_constants",
    "global_grad_norm",
    "make_problem",
    "quadratic_sigma2",
    "stoch_grad",
]

KINDS = ("quadratic", "logistic", "mlp")


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "quadratic"
    d: int = 10
    n_samples: int = 800
    partition: Any = "iid"  # "iid" or {"label_skew": s}
    batch_size: int = 8
    seed: int | None = None
    hidden: int = 8
    reg: float = 1e-3
    mu: float = 0.5
    L: float = 2.0
    spread: float = 2.0
    noise: float = 1.0
    n_test: int = 400

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.mu <= self.L:
            raise ValueError("need 0 < mu <= L")
        skew_of(self.partition)

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemSpec":
        return cls(**data)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        if isinstance(out["partition"], dict):
            out["partition"] = dict(out["partition"])
        return out


def skew_of(partition: Any) -> float:
    if partition == "iid":
        return 0.0
    if isinstance(partition, dict) and set(partition) == {"label_skew"}:
        s = float(partition["label_skew"])
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"label_skew must be in [0, 1], got {s}")
        return s
    raise ValueError(f"partition must be 'iid' or {{'label_skew': s}}, got {partition!r}")


# ---------------------------------------------------------------------------
# problem container


@dataclass(frozen=True, eq=False)
class Problem:
    kind: str
    m: int
    n_params: int
    features: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    groups: tuple[np.ndarray, ...]
    test_features: np.ndarray
    test_labels: np.ndarray
    batch_size: int
    reg: float = 0.0
    hidden: int = 0
    Q: np.ndarray | None = None  # (m, d, d), quadratic only
    offsets: np.ndarray | None = None  # c_i, quadratic only
    x_star: np.ndarray | None = None
    f_star: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.n_params

    def shard_size(self, i: int) -> int:
        return self.features[i].shape[0]

    def sample_batch(self, i: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Uniform indices with replacement into worker ``i``'s shard."""
        return rng.integers(0, self.shard_size(i), size=self.batch_size if size is None else size)

    # per-worker loss / gradient -------------------------------------------------

    def loss_grad(self, i: int, x: np.ndarray, idx: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        S = self.features[i] if idx is None else self.features[i][idx]
        y = self.labels[i] if idx is None else self.labels[i][idx]
        if self.kind == "quadratic":
            return _quad_loss_grad(self.Q[i], self.offsets[i], x, S)
        if self.kind == "logistic":
            return _logistic_loss_grad(x, S, y, self.reg)
        return _mlp_loss_grad(x, S, y, self.reg, self.hidden)

    def loss(self, i: int, x: np.ndarray, idx: np.ndarray | None = None) -> float:
        return self.loss_grad(i, x, idx)[0]

    def full_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic":
            return self.Q[i] @ (x - self.extra["b"][i])
        return self.loss_grad(i, x)[1]

    def global_loss(self, x: np.ndarray) -> float:
        return float(np.mean([self.loss(i, x) for i in range(self.m)]))

    def global_grad(self, x: np.ndarray) -> np.ndarray:
        return np.mean([self.full_grad(i, x) for i in range(self.m)], axis=0)

    def eval_loss(self, x: np.ndarray) -> float:
        """Held-out proxy: distance to the optimum (quadratic) or test-set loss."""
        if self.kind == "quadratic":
            return float(np.linalg.norm(x - self.x_star))
        if self.kind == "logistic":
            return _logistic_loss_grad(x, self.test_features, self.test_labels, 0.0, need_grad=False)[0]
        return _mlp_loss_grad(x, self.test_features, self.test_labels, 0.0, self.hidden, need_grad=False)[0]


def _quad_loss_grad(Q, c, x, S):
    diff = x[None, :] - S
    Qd = diff @ Q
    loss = 0.5 * float(np.einsum("ij,ij->", Qd, diff)) / len(S) - c
    return loss, Qd.mean(axis=0)


def _with_bias(S):
    return np.hstack([S, np.ones((S.shape[0], 1))])


def _logistic_loss_grad(x, S, y, reg, need_grad=True):
    A = _with_bias(S)
    z = A @ x
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * reg * float(x @ x)
    if not need_grad:
        return loss, None
    p = 0.5 * (1.0 + np.tanh(0.5 * z))  # sigmoid without overflow
    return loss, A.T @ (p - y) / len(y) + reg * x


def _mlp_unpack(x, d, h):
    W1 = x[: h * d].reshape(h, d)
    b1 = x[h * d: h * d + h]
    w2 = x[h * d + h: h * d + 2 * h]
    return W1, b1, w2, x[-1]


def _mlp_loss_grad(x, S, y, reg, h, need_grad=True):
    n, d = S.shape
    W1, b1, w2, b2 = _mlp_unpack(x, d, h)
    H = np.tanh(S @ W1.T + b1)
    z = H @ w2 + b2
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * reg * float(x @ x)
    if not need_grad:
        return loss, None
    dz = (0.5 * (1.0 + np.tanh(0.5 * z)) - y) / n
    dH = np.outer(dz, w2) * (1.0 - H**2)
    grad = np.concatenate([(dH.T @ S).ravel(), dH.sum(axis=0), H.T @ dz, [dz.sum()]])
    return loss, grad + reg * x


# ---------------------------------------------------------------------------
# construction


def _shard_groups(rng, m, n_samples, n_groups, skew):
    """Group id of every sample, worker by worker (sizes differ by at most one)."""
    sizes = [len(a) for a in np.array_split(np.arange(n_samples), m)]
    out = []
    for i, n_i in enumerate(sizes):
        if n_i == 0:
            raise ValueError(f"worker {i} would get an empty shard ({n_samples} samples, m={m})")
        n_pref = int(round(skew * n_i))
        g = np.concatenate([np.full(n_pref, i % n_groups), rng.integers(0, n_groups, n_i - n_pref)])
        out.append(rng.permutation(g))
    return out


def _random_spd(rng, d, lo, hi):
    U, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = rng.uniform(lo, hi, d)
    eig[0], eig[-1] = lo, hi  # pin the extremes so L_smooth is known exactly
    return (U * eig) @ U.T


def make_problem(spec: ProblemSpec | dict, m: int, seed: int | None = None) -> Problem:
    """Build a reproducible problem instance for ``m`` workers."""
    if isinstance(spec, dict):
        spec = ProblemSpec.from_dict(spec)
    if m < 2:
        raise ValueError(f"need m >= 2 workers, got {m}")
    seed = spec.seed if seed is None else seed
    if seed is None:
        raise ValueError("a seed is required")
    rng = stream(seed, "data")
    skew = skew_of(spec.partition)
    if spec.kind == "quadratic":
        return _make_quadratic(spec, m, rng, skew)
    return _make_classifier(spec, m, rng, skew)


def _make_quadratic(spec, m, rng, skew):
    d = spec.d
    centers = spec.spread * rng.standard_normal((m, d))
    groups = _shard_groups(rng, m, spec.n_samples, m, skew)
    feats = tuple(centers[g] + spec.noise * rng.standard_normal((len(g), d)) for g in groups)
    Q = np.stack([_random_spd(rng, d, spec.mu, spec.L) for _ in range(m)])
    b = np.stack([S.mean(axis=0) for S in feats])
    offsets = np.array([
        0.5 * float(np.einsum("ij,jk,ik->", S - b[i], Q[i], S - b[i])) / len(S)
        for i, S in enumerate(feats)
    ])
    Qsum = Q.sum(axis=0)
    x_star = np.linalg.solve(Qsum, np.einsum("ijk,ik->j", Q, b))
    f_star = float(np.mean([0.5 * (x_star - b[i]) @ Q[i] @ (x_star - b[i]) for i in range(m)]))
    test_g = rng.integers(0, m, spec.n_test)
    test = centers[test_g] + spec.noise * rng.standard_normal((spec.n_test, d))
    labels = tuple(np.zeros(len(g)) for g in groups)
    return Problem("quadratic", m, d, feats, labels, tuple(groups), test, np.zeros(spec.n_test),
                   spec.batch_size, Q=Q, offsets=offsets, x_star=x_star, f_star=f_star,
                   extra={"b": b, "L_smooth": spec.L, "mu": spec.mu})


def _make_classifier(spec, m, rng, skew):
    d = spec.d
    if spec.kind == "logistic":
        mean = np.full(d, spec.spread / math.sqrt(d))

        def draw(labels):
            sign = 2.0 * labels[:, None] - 1.0
            return sign * mean + spec.noise * rng.standard_normal((len(labels), d))
    else:
        if d < 2:
            raise ValueError("mlp problems need d >= 2")

        def draw(labels):
            # XOR clusters on the first two coordinates; remaining ones are noise
            quad = rng.integers(0, 2, len(labels))
            a = 2.0 * quad - 1.0
            bsign = np.where(labels == 1, -a, a)
            X = spec.noise * 0.5 * rng.standard_normal((len(labels), d))
            X[:, 0] += spec.spread * 0.5 * a
            X[:, 1] += spec.spread * 0.5 * bsign
            return X

    groups = _shard_groups(rng, m, spec.n_samples, 2, skew)
    labels = tuple(g.astype(float) for g in groups)
    feats = tuple(draw(g) for g in groups)
    test_labels = rng.integers(0, 2, spec.n_test).astype(float)
    test = draw(test_labels.astype(np.int64))
    hidden = spec.hidden if spec.kind == "mlp" else 0
    n_params = d + 1 if spec.kind == "logistic" else hidden * (d + 2) + 1
    prob = Problem(spec.kind, m, n_params, feats, labels, tuple(groups), test, test_labels,
                   spec.batch_size, reg=spec.reg, hidden=hidden)
    if spec.kind == "logistic":
        res = minimize(lambda x: (prob.global_loss(x), prob.global_grad(x)), np.zeros(n_params),
                       jac=True, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 1000})
        object.__setattr__(prob, "x_star", res.x)
        object.__setattr__(prob, "f_star", float(res.fun))
    return prob


# ---------------------------------------------------------------------------
# gradients and constants


def stoch_grad(p: Problem, i: int, x: np.ndarray, batch: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Minibatch gradient of worker ``i``; draws a batch from ``rng`` when none is given."""
    if batch is None:
        if rng is None:
            raise ValueError("need a batch or an rng")
        batch = p.sample_batch(i, rng)
    return p.loss_grad(i, x, batch)[1]


def global_grad_norm(p: Problem, xbar: np.ndarray) -> float:
    """``||(1/m) sum_i grad F_i(xbar)||^2`` on the full local shards."""
    g = p.global_grad(xbar)
    return float(g @ g)


def quadratic_sigma2(p: Problem, batch_size: int | None = None) -> float:
    """Exact worst-worker minibatch gradient variance for a quadratic problem."""
    if p.kind != "quadratic":
        raise ValueError("closed form only exists for quadratic problems")
    b = p.batch_size if batch_size is None else batch_size
    worst = 0.0
    for i, S in enumerate(p.features):
        dev = (S - p.extra["b"][i]) @ p.Q[i]
        worst = max(worst, float(np.mean(np.einsum("ij,ij->i", dev, dev))))
    return worst / b


@dataclass(frozen=True)
class ConstantEstimates:
    L_smooth: float
    beta_lip: float
    sigma2: float
    zeta2: float
    delta2: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def estimate_constants(p: Problem, points: np.ndarray, delta2: float = 0.0,
                       batch_size: int | None = None, rng: np.random.Generator | None = None,
                       n_draws: int = 200, n_pairs: int = 200) -> ConstantEstimates:
    """Constants of the smoothness/variance assumptions over visited parameters.

    ``points`` is an ``(N, d)`` sample of visited parameter vectors and
    ``delta2`` the largest squared worker-to-leader distance seen during the
    run (measured by the engine). ``zeta2`` is the worst case over points and
    workers of ``||grad F_i - grad F||^2``. With ``batch_size`` equal to the
    shard size every gradient is exact and ``sigma2`` is zero.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise ValueError("need at least one visited point")
    rng = np.random.default_rng(0) if rng is None else rng
    b = p.batch_size if batch_size is None else batch_size
    grads = np.array([[p.full_grad(i, x) for i in range(p.m)] for x in points])  # (N, m, d)
    mean_g = grads.mean(axis=1, keepdims=True)
    zeta2 = float(np.max(np.sum((grads - mean_g) ** 2, axis=2)))
    if p.kind == "quadratic":
        L = float(max(np.linalg.eigvalsh(Q)[-1] for Q in p.Q))
        # ||grad F_i|| is convex, so its maximum over the hull sits at a vertex
        beta = float(np.max(np.linalg.norm(grads, axis=2)))
        full = all(b >= p.shard_size(i) for i in range(p.m))
        sigma2 = 0.0 if full else quadratic_sigma2(p, b)
        return ConstantEstimates(L, beta, sigma2, zeta2, float(delta2))
    L, beta = 0.0, 0.0
    N = points.shape[0]
    for _ in range(n_pairs):
        j, k = rng.integers(0, N, 2)
        x, y = points[j], points[k]
        if np.array_equal(x, y):
            y = x + 1e-3 * rng.standard_normal(x.shape)
        dist = np.linalg.norm(x - y)
        for i in range(p.m):
            lx, gx = p.loss_grad(i, x)
            ly, gy = p.loss_grad(i, y)
            L = max(L, float(np.linalg.norm(gx - gy) / dist))
            beta = max(beta, float(abs(lx - ly) / dist))
    sigma2 = 0.0
    if not all(b >= p.shard_size(i) for i in range(p.m)):
        for x in points[rng.integers(0, N, min(N, 5))]:
            for i in range(p.m):
                g = p.full_grad(i, x)
                dev = [stoch_grad(p, i, x, p.sample_batch(i, rng, b)) - g for _ in range(n_draws)]
                sigma2 = max(sigma2, float(np.mean(np.sum(np.square(dev), axis=1))))
    return ConstantEstimates(L, beta, sigma2, zeta2, float(delta2))
