"""Command-line front end: ``aldsgd {run,spectral,sweep,decompose}``.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 infeasible
``k_free``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import engine
from .config import ConfigError, ExperimentConfig, expand_sweep, load_config
from .mixing import BudgetSchedule
from .seeding import stream
from .spectral import InfeasibleParameterError, alpha_range, check_contraction, estimate_rho, lambda_zeta

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INFEASIBLE = 0, 2, 3, 4

AGGREGATE_METRICS = ("rounds_completed", "diverged", "avg_grad_norm_mean", "final_avg_eval",
                     "mean_final_eval", "final_consensus_dist", "total_degree")


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.out or os.environ.get("ALDSGD_OUT") or "runs")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "stride", None) is not None:
        updates["stride"] = args.stride
    return cfg.with_updates(**updates) if updates else cfg


def _n_graphs(cfg: ExperimentConfig) -> int:
    if cfg.preset in ("dpsgd", "matcha"):
        return 1
    return int(cfg.topology.get("dynamic_n") or 3)


def cmd_run(args) -> int:
    cfg = _load(args)
    log = engine.run_experiment(cfg, jobs=args.jobs)
    csv_path, _ = log.write(_out_dir(args, cfg))
    s = log.summary
    status = "DIVERGED" if log.diverged else "ok"
    print(f"{status} preset={cfg.preset} seed={cfg.seed} rounds={s['rounds_completed']}/{cfg.K} "
          f"avg_grad_norm={s['avg_grad_norm_mean']:.6g} final_eval={s['final_avg_eval']:.6g} -> {csv_path}")
    if log.diverged:
        print(s["error"], file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def spectral_report(cfg: ExperimentConfig) -> dict:
    """Feasible window, Monte Carlo rho and a contraction check for one config."""
    spec = cfg.spectral
    c_b = 1.0 if cfg.preset == "dpsgd" else cfg.hyper.get("c_b", 1.0)
    sched = BudgetSchedule(c_b)
    dset = engine.build_network(cfg.topology, _n_graphs(cfg))
    lz = lambda_zeta(dset, sched)
    pr = alpha_range(lz, spec.get("k_free"))
    alpha = spec.get("alpha")
    alpha = 0.5 * (pr.alpha_min + pr.alpha_max) if alpha is None else alpha
    omega_max = pr.omega_max(alpha)
    omega = spec.get("omega")
    if omega is None:
        omega = 0.5 * omega_max if omega_max > 0 else 0.0
    samples = spec.get("samples", 2000)
    policy = spec.get("leader_policy", "uniform")
    rng = stream(cfg.seed, "spectral")
    rep = estimate_rho(dset, sched, alpha, omega / 2, omega / 2, policy, samples, rng)
    con = check_contraction(dset, sched, alpha, omega / 2, omega / 2, rep, spec.get("n_products", 20),
                            spec.get("trials", 500), rng, policy)
    return {
        **rep.to_dict(),
        "alpha": alpha,
        "omega": omega,
        "alpha_min": pr.alpha_min,
        "alpha_max": pr.alpha_max,
        "omega_max_at_alpha": omega_max,
        "k_free": pr.k_free,
        "k_threshold": pr.threshold,
        "lambda_min": pr.lambda_min,
        "lambda_max": pr.lambda_max,
        "zeta": pr.zeta,
        "c_b": c_b,
        "n_graphs": dset.n,
        "leader_policy": policy,
        "seed": cfg.seed,
        "contraction": con.to_dict(),
    }


def cmd_spectral(args) -> int:
    cfg = _load(args)
    try:
        report = spectral_report(cfg)
    except InfeasibleParameterError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    text = json.dumps(report, indent=2, sort_keys=True)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spectral.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _run_cell(job: tuple[int, ExperimentConfig, str]) -> dict:
    idx, cfg, out_root = job
    log = engine.run_experiment(cfg)
    log.write(Path(out_root) / f"cell_{idx:04d}")
    s = dict(log.summary)
    s["mean_final_eval"] = sum(s["final_eval"]) / len(s["final_eval"])
    return s


def cmd_sweep(args) -> int:
    cfg = _load(args)
    cells = expand_sweep(cfg)
    if not cells:
        print("sweep: empty product (no axes or an empty axis)", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, c, str(out)) for i, (_, c) in enumerate(cells)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            summaries = list(pool.map(_run_cell, jobs))
    else:
        summaries = [_run_cell(j) for j in jobs]
    axes = list(cells[0][0])
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", *axes, *AGGREGATE_METRICS])
        for i, ((params, _), s) in enumerate(zip(cells, summaries)):
            w.writerow([i, *(params[a] for a in axes), *(_fmt(s[k]) for k in AGGREGATE_METRICS)])
    print(f"sweep: {len(cells)} cells -> {out / 'aggregate.csv'}")
    return EXIT_DIVERGED if any(s["diverged"] for s in summaries) else EXIT_OK


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def cmd_decompose(args) -> int:
    cfg = _load(args)
    dset = engine.build_network(cfg.topology, _n_graphs(cfg))
    doc = {"m": dset.m, "graphs": [
        {"shift": s, "edges": [list(e) for e in g.edges], "matchings": [[list(e) for e in mt] for mt in dec]}
        for g, dec, s in zip(dset.graphs, dset.decompositions, dset.shifts)
    ]}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aldsgd", description="Leader-assisted decentralized SGD simulator")
    sub = p.add_subparsers(dest="command", required=True)
    for name, func, help_text in (
        ("run", cmd_run, "run one experiment and write metrics CSV + summary JSON"),
        ("spectral", cmd_spectral, "feasible parameter window and Monte Carlo rho"),
        ("sweep", cmd_sweep, "Cartesian sweep over target_D, c_b, preset, seed, K"),
        ("decompose", cmd_decompose, "print the matching decomposition as JSON"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output directory (default: $ALDSGD_OUT or ./runs)")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads (run) or processes (sweep)")
        sp.add_argument("--stride", type=int, default=None, help="metrics stride in rounds")
        sp.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
