"""Independent reference code shared by the protocol and acceptance tests."""

import numpy as np

from aldsgd.seeding import stream, worker_streams

# "PASS/FAIL criterion N: ..." lines collected by the acceptance suite
ACCEPTANCE_LINES = []


def report(number, passed, detail):
    """Record and print one acceptance line, then assert on it."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


class ZeroGradProblem:
    """Every worker reports zero loss and zero gradient: rounds reduce to pure mixing."""

    kind = "zero"

    def __init__(self, m, d):
        self.m, self.d = m, d

    def sample_batch(self, i, rng, size=None):
        return rng.integers(0, 1, size=1)

    def loss_grad(self, i, x, idx=None):
        return 0.0, np.zeros(self.d)


def dpsgd_reference(problem, edges, m, alpha, gamma, X0, seed, rounds, c_b=1.0, matchings=None):
    """Plain D-PSGD, ``X <- W (X - gamma G)``, coded from scratch.

    It consumes the same random streams as the library (one uniform per
    matching per round for link activation, per-worker minibatch streams) so
    the two can be compared bit for bit.
    """
    lap_rng = stream(seed, "laplacian")
    batch_rngs = worker_streams(seed, "batch", m)
    matchings = matchings if matchings is not None else [[e] for e in edges]
    X = X0.copy()
    traj = [X.copy()]
    for _ in range(rounds):
        G = np.empty_like(X)
        for i in range(m):
            idx = batch_rngs[i].integers(0, problem.shard_size(i), size=problem.batch_size)
            G[i] = problem.loss_grad(i, X[i], idx)[1]
        on = lap_rng.random(len(matchings)) < c_b
        L = np.zeros((m, m), dtype=np.int64)
        for mt, flag in zip(matchings, on):
            if flag:
                for u, v in mt:
                    L[u, u] += 1
                    L[v, v] += 1
                    L[u, v] -= 1
                    L[v, u] -= 1
        W = np.eye(m) - alpha * L
        X = W @ (X - gamma * G)
        traj.append(X.copy())
    return traj
