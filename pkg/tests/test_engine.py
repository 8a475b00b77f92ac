import csv
import io
import math

import numpy as np
import pytest

from aldsgd.config import ExperimentConfig
from aldsgd.engine import (
    CSV_HEADER,
    BoundInputs,
    BoundPreconditionError,
    consensus_distance,
    default_alpha,
    build_network,
    init_workers,
    run_experiment,
    theorem2_bound,
)
from aldsgd.objectives import ConstantEstimates
from aldsgd.protocol import preset


def _cfg(**kw):
    base = dict(topology={"kind": "ring", "m": 8},
                problem={"kind": "quadratic", "d": 6, "n_samples": 400, "batch_size": 8},
                preset="aldsgd", hyper={"gamma": 0.05, "c_b": 0.5}, K=100, seed=0, stride=10)
    base.update(kw)
    return ExperimentConfig(**base)


class TestInit:
    def test_identical_zero(self):
        s = init_workers(5, 3, {"mode": "identical", "value": 0.0}, 0)
        assert not s.X.any() and consensus_distance(s) == 0

    def test_distinct(self):
        assert consensus_distance(init_workers(5, 3, {"mode": "distinct_gaussian", "scale": 1.0}, 0)) > 0

    def test_deterministic(self):
        a, b = init_workers(4, 3, "distinct_gaussian", 9), init_workers(4, 3, "distinct_gaussian", 9)
        assert np.array_equal(a.X, b.X)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            init_workers(4, 3, {"mode": "zeros"}, 0)


class TestConsensus:
    def test_equal(self):
        assert consensus_distance(np.ones((3, 2))) == 0

    def test_two_points(self):
        assert consensus_distance(np.array([[0.0], [2.0]])) == pytest.approx(math.sqrt(2))

    def test_translation(self):
        X = np.random.default_rng(0).standard_normal((5, 3))
        assert consensus_distance(X + 7.5) == pytest.approx(consensus_distance(X), rel=1e-12)


class TestRunExperiment:
    def test_zero_rounds(self):
        log = run_experiment(_cfg(K=0))
        assert len(log.rows) == 8 and {r[0] for r in log.rows} == {0}

    def test_csv_layout(self):
        log = run_experiment(_cfg(K=25, stride=10))
        rows = list(csv.reader(io.StringIO(log.to_csv())))
        assert tuple(rows[0]) == CSV_HEADER
        assert sorted({int(r[0]) for r in rows[1:]}) == [0, 10, 20, 25]
        for r in rows[1:]:
            first = r[1] == "0"
            assert (r[4] != "") == first and (r[5] != "") == first
            assert float(r[4] or 0) >= 0

    def test_repeatable(self, tmp_path):
        a = run_experiment(_cfg(problem={"kind": "logistic", "d": 4, "n_samples": 400}))
        b = run_experiment(_cfg(problem={"kind": "logistic", "d": 4, "n_samples": 400}))
        assert a.to_csv() == b.to_csv()
        csv_path, json_path = a.write(tmp_path)
        assert csv_path.read_text() == b.to_csv() and json_path.exists()

    def test_dpsgd_converges(self):
        cfg = _cfg(preset="dpsgd", hyper={"gamma": 0.2, "lr_schedule": [[1000, 0.1], [1500, 0.1]]},
                   problem={"kind": "quadratic", "d": 10, "n_samples": 800, "batch_size": 8}, K=2000, stride=100)
        g = run_experiment(cfg).column("global_grad_norm_sq")
        assert g[-1] * 100 <= g[0]

    def test_divergence_truncates(self):
        log = run_experiment(_cfg(preset="dpsgd", hyper={"gamma": 50.0}, K=500))
        assert log.diverged and log.summary["rounds_completed"] < 500
        assert log.summary["error"]

    def test_random_start_is_seeded(self):
        a = run_experiment(_cfg(random_start=True, K=10))
        b = run_experiment(_cfg(random_start=True, K=10))
        assert a.to_csv() == b.to_csv()

    def test_summary_fields(self):
        s = run_experiment(_cfg(K=20)).summary
        for key in ("avg_grad_norm_mean", "final_eval", "wall_time_s", "delta2", "initial_global_loss"):
            assert key in s
        assert len(s["final_eval"]) == 8 and s["delta2"] > 0


def _consts(**kw):
    base = dict(L_smooth=2.0, beta_lip=1.0, sigma2=1.0, zeta2=0.5, delta2=0.2)
    base.update(kw)
    return ConstantEstimates(**base)


class TestBound:
    def test_vanishes(self):
        bi = BoundInputs(_consts(sigma2=0, zeta2=0, delta2=0), 0.5, 0.1, 0.2, 100, 8, 1.0, 1.0)
        assert theorem2_bound(bi) == 0.0

    def test_matches_hand_evaluation(self):
        c = _consts()
        rho, eta, lam, K, m, f1, fs = 0.49, 0.1, 0.2, 100, 8, 3.0, 1.0
        d = math.sqrt(c.delta2)
        M = eta**2 * 2 * 1 / 16 + lam * eta * d + lam * eta**2 * 2 * d + lam**2 * eta**2 * 2 * 0.2 / 2
        tail = 8 * eta**2 * 4 * rho / 0.3 * ((8 + lam**2 * 0.2) / (8 * 1.7) + 3 * 0.5 / 0.3)
        expect = 8 * 2 / (eta * K) + 8 * M / eta + tail
        assert theorem2_bound(BoundInputs(c, rho, eta, lam, K, m, f1, fs)) == pytest.approx(expect, rel=1e-12)

    def test_shrinks_with_K(self):
        def bound(K):
            hp = preset("theorem2", m=8, K=K, alpha=0.25, omega_best=0.05, omega_deg=0.05)
            return theorem2_bound(BoundInputs.from_hyper(_consts(), 0.3, hp, K, 8, 2.0, 0.0))
        assert bound(2000) < bound(1000)

    def test_rho_precondition(self):
        with pytest.raises(BoundPreconditionError) as exc:
            theorem2_bound(BoundInputs(_consts(), 1.0, 0.1, 0.2, 100, 8, 1.0, 0.0))
        assert exc.value.condition == "rho < 1"

    def test_step_precondition(self):
        with pytest.raises(BoundPreconditionError) as exc:
            theorem2_bound(BoundInputs(_consts(), 0.81, 0.1, 0.2, 100, 8, 1.0, 0.0))
        assert "eta*L" in exc.value.condition

    def test_zero_rho_allowed(self):
        assert theorem2_bound(BoundInputs(_consts(), 0.0, 0.1, 0.2, 100, 8, 1.0, 0.0)) > 0

    def test_eta_definition(self):
        hp = preset("aldsgd", gamma=0.1, alpha=0.2)
        bi = BoundInputs.from_hyper(_consts(), 0.5, hp, 10, 8, 1.0, 0.0)
        assert bi.eta == pytest.approx(0.8 * 0.8 * 0.1) and bi.lam == pytest.approx(0.2)


def test_network_and_alpha():
    ds = build_network({"kind": "pendant_ring", "m": 8, "target_D": None}, 3)
    assert ds.n == 3 and ds.shifts == (0, 2, 5)
    assert default_alpha(ds) == pytest.approx(0.25)
    sparse = build_network({"kind": "complete", "m": 6, "target_D": 7}, 1)
    assert sparse.graphs[0].total_degree == 7
