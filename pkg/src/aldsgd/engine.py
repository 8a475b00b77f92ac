"""Experiment orchestration: build the network and problem, run K rounds, log metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from .objectives import ConstantEstimates, Problem, estimate_constants, make_problem
from .protocol import DivergenceError, HyperParams, SystemState, output_model, preset, run_round
from .seeding import stream, worker_streams
from .topology import DynamicGraphSet, build_graph, default_shifts, make_dynamic_set, reduce_degree

__all__ = [
    "BoundInputs",
    "BoundPreconditionError",
    "MetricsLog",
    "bound_inputs_from_run",
    "build_network",
    "consensus_distance",
    "default_alpha",
    "init_workers",
    "resolve_hyperparams",
    "run_experiment",
    "theorem2_bound",
]

CSV_HEADER = ("k", "node", "local_loss", "eval_loss", "consensus_dist", "global_grad_norm_sq")


def build_network(topology: dict, n_graphs: int) -> DynamicGraphSet:
    """Base graph, optional sparsification, then ``n_graphs`` rotations."""
    g = build_graph(topology["kind"], topology.get("m"), topology.get("edges"))
    if topology.get("target_D") is not None:
        g = reduce_degree(g, int(topology["target_D"]))
    shifts = topology.get("shifts")
    if shifts is None or len(shifts) != n_graphs:
        shifts = default_shifts(g.m, n_graphs)
    return make_dynamic_set(g, n_graphs, list(shifts))


def default_alpha(dset: DynamicGraphSet) -> float:
    """``1 / (max degree + 1)``, which keeps every entry of ``W`` nonnegative."""
    return 1.0 / (max(g.max_degree for g in dset.graphs) + 1)


def resolve_hyperparams(name: str, hyper: dict, dset_m: int, K: int, alpha: float) -> HyperParams:
    overrides = dict(hyper)
    overrides.setdefault("alpha", alpha)
    if overrides["alpha"] is None:
        overrides["alpha"] = alpha
    return preset(name, m=dset_m, K=max(K, 1), **overrides)


def init_workers(m: int, d: int, mode: dict | str, seed: int, start: int = 0) -> SystemState:
    """Initial state with fresh random streams.

    ``mode`` is ``{"mode": "distinct_gaussian", "scale": s}`` (independent
    ``N(0, s^2)`` vectors) or ``{"mode": "identical", "value": v}``.
    """
    if isinstance(mode, str):
        mode = {"mode": mode}
    kind = mode.get("mode", "distinct_gaussian")
    if kind == "distinct_gaussian":
        X = float(mode.get("scale", 1.0)) * stream(seed, "init").standard_normal((m, d))
    elif kind == "identical":
        v = np.broadcast_to(np.asarray(mode.get("value", 0.0), dtype=float), (d,))
        X = np.tile(v, (m, 1))
    else:
        raise ValueError(f"unknown init mode {kind!r}")
    return SystemState(X, np.full(m, np.nan), np.zeros(m, dtype=np.int64), 0,
                       stream(seed, "laplacian"), worker_streams(seed, "batch", m), start)


def consensus_distance(state: SystemState | np.ndarray) -> float:
    """``||X (I - J)||_F``: root of the summed squared deviations from the mean model."""
    X = state.X if isinstance(state, SystemState) else np.asarray(state, dtype=float)
    return float(np.linalg.norm(X - X.mean(axis=0)))


@dataclass
class MetricsLog:
    rows: list[tuple] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    diverged: bool = False
    # visited parameters (stacked worker models at recorded rounds), not serialized
    trajectory: list[np.ndarray] = field(default_factory=list, repr=False)

    def record(self, k: int, problem: Problem, X: np.ndarray, grad_norm_sq: float) -> None:
        cons = consensus_distance(X)
        for i in range(X.shape[0]):
            first = i == 0
            self.rows.append((k, i, problem.loss(i, X[i]), problem.eval_loss(X[i]),
                              cons if first else None, grad_norm_sq if first else None))
        self.trajectory.append(X.copy())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def write(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}_summary.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    def column(self, name: str, node: int | None = None) -> np.ndarray:
        j = CSV_HEADER.index(name)
        return np.array([r[j] for r in self.rows if (node is None and r[j] is not None) or r[1] == node],
                        dtype=float)


def run_experiment(config, jobs: int = 1, problem: Problem | None = None) -> MetricsLog:
    """Run ``config.K`` rounds; ``config`` is an :class:`aldsgd.config.ExperimentConfig`.

    Divergence stops the run and returns the truncated log with
    ``diverged`` set.
    """
    t0 = time.perf_counter()
    n_graphs = 1 if config.preset in ("dpsgd", "matcha") else int(config.topology.get("dynamic_n") or 3)
    dset = build_network(config.topology, n_graphs)
    alpha = config.hyper.get("alpha")
    alpha = default_alpha(dset) if alpha is None else alpha
    hp = resolve_hyperparams(config.preset, {**config.hyper, "n_graphs": n_graphs}, dset.m, config.K, alpha)
    if problem is None:
        problem = make_problem(config.problem, dset.m, config.seed)
    start = int(stream(config.seed, "init", 1).integers(dset.n)) if config.random_start else 0
    state = init_workers(dset.m, problem.d, config.init, config.seed, start)

    log = MetricsLog()
    stride = max(1, int(config.stride))
    grad_sum, delta2 = 0.0, 0.0
    gn = problem_grad_norm(problem, output_model(state))
    f1 = problem.global_loss(output_model(state))
    log.record(0, problem, state.X, gn)
    error = None
    executor = ThreadPoolExecutor(jobs) if jobs > 1 else None
    try:
        for k in range(1, config.K + 1):
            try:
                nxt, info = run_round(state, hp, problem, dset, executor, return_info=True)
            except DivergenceError as exc:
                log.diverged = True
                error = str(exc)
                break
            grad_sum += gn
            X = state.X
            delta2 = max(delta2, float(np.max(np.sum((X - X[info.best]) ** 2, axis=1))),
                         float(np.max(np.sum((X - X[info.deg_leader]) ** 2, axis=1))))
            state = nxt
            gn = problem_grad_norm(problem, output_model(state))
            if not math.isfinite(gn) or gn > 1e24:
                log.diverged = True
                error = f"round {k}: averaged gradient norm {gn!r}"
                break
            if k % stride == 0 or k == config.K:
                log.record(k, problem, state.X, gn)
    finally:
        if executor is not None:
            executor.shutdown()

    done = state.k
    xbar = output_model(state)
    log.summary = {
        "preset": config.preset,
        "seed": config.seed,
        "K": config.K,
        "rounds_completed": done,
        "diverged": log.diverged,
        "error": error,
        "alpha": hp.alpha,
        "gamma": hp.gamma,
        "hyperparams": hp.to_dict(),
        "avg_grad_norm_mean": grad_sum / done if done else gn,
        "final_eval": [problem.eval_loss(x) for x in state.X],
        "final_avg_eval": problem.eval_loss(xbar),
        "final_consensus_dist": consensus_distance(state),
        "initial_global_loss": f1,
        "f_star": problem.f_star,
        "delta2": delta2,
        "total_degree": dset.graphs[0].total_degree,
        "wall_time_s": time.perf_counter() - t0,
    }
    return log


def problem_grad_norm(problem: Problem, xbar: np.ndarray) -> float:
    g = problem.global_grad(xbar)
    return float(g @ g)


# ---------------------------------------------------------------------------
# convergence bound


class BoundPreconditionError(ValueError):
    def __init__(self, condition: str, detail: str):
        self.condition = condition
        super().__init__(f"precondition '{condition}' violated: {detail}")


@dataclass(frozen=True)
class BoundInputs:
    constants: ConstantEstimates
    rho: float
    eta: float
    lam: float
    K: int
    m: int
    f1: float
    f_star: float

    @classmethod
    def from_hyper(cls, constants: ConstantEstimates, rho: float, hp: HyperParams, K: int, m: int,
                   f1: float, f_star: float) -> "BoundInputs":
        if not math.isclose(hp.lambda_best, hp.lambda_deg, rel_tol=1e-12, abs_tol=0.0):
            raise ValueError("the bound assumes lambda_best == lambda_deg")
        eta = (1 - hp.alpha) * (1 - hp.omega) * hp.gamma
        return cls(constants, rho, eta, 2 * hp.lambda_best, K, m, f1, f_star)


def theorem2_bound(bi: BoundInputs) -> float:
    """Upper bound on ``(1/K) sum_k E||grad F(xbar_k)||^2``.

    ``8(F1 - F*)/(eta K) + 8M/eta + 8 eta^2 L^2 rho / (1 - sqrt rho) *
    ((m sigma^2 + lam^2 Delta^2) / (m (1 + sqrt rho)) + 3 zeta^2 / (1 - sqrt rho))``
    with ``M = eta^2 L sigma^2/(2m) + lam eta beta Delta + lam eta^2 L beta Delta
    + lam^2 eta^2 L Delta^2 / 2``.
    """
    c = bi.constants
    if not bi.rho < 1:
        raise BoundPreconditionError("rho < 1", f"rho = {bi.rho}")
    if not bi.eta > 0 or bi.K < 1:
        raise BoundPreconditionError("eta > 0 and K >= 1", f"eta = {bi.eta}, K = {bi.K}")
    sr = math.sqrt(bi.rho)
    limit = min(1.0, 1.0 / sr - 1.0) if sr > 0 else 1.0
    if bi.eta * c.L_smooth > limit:
        raise BoundPreconditionError("eta*L <= min(1, rho^-1/2 - 1)",
                                     f"eta*L = {bi.eta * c.L_smooth:.6g} > {limit:.6g}")
    eta, L, lam, m = bi.eta, c.L_smooth, bi.lam, bi.m
    delta = math.sqrt(c.delta2)
    M = (eta**2 * L * c.sigma2 / (2 * m) + lam * eta * c.beta_lip * delta
         + lam * eta**2 * L * c.beta_lip * delta + lam**2 * eta**2 * L * c.delta2 / 2)
    consensus = (8 * eta**2 * L**2 * bi.rho / (1 - sr)) * (
        (m * c.sigma2 + lam**2 * c.delta2) / (m * (1 + sr)) + 3 * c.zeta2 / (1 - sr))
    return 8 * (bi.f1 - bi.f_star) / (eta * bi.K) + 8 * M / eta + consensus


def bound_inputs_from_run(problem: Problem, log: MetricsLog, hp: HyperParams, rho: float,
                          rng: np.random.Generator | None = None) -> BoundInputs:
    """Measure the assumption constants on a finished run and package them."""
    points = np.concatenate(log.trajectory, axis=0)
    consts = estimate_constants(problem, points, delta2=log.summary["delta2"], rng=rng)
    return BoundInputs.from_hyper(consts, rho, hp, log.summary["rounds_completed"], problem.m,
                                  log.summary["initial_global_loss"], problem.f_star)
