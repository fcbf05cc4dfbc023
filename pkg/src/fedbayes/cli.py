"""Command-line entry point: ``fedbayes {partition,run,sweep,accountant,evaluate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fedbayes import data, model, privacy, sim
from fedbayes.config import ExperimentConfig, load_config, save_config
from fedbayes.expfam import GaussianMoment

logger = logging.getLogger("fedbayes")


def _load_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seeds = None if args.seed is None else tuple(args.seed)
    return cfg.with_overrides(
        engine=args.engine,
        distribution=args.distribution,
        epsilon_max=args.epsilon_max,
        out=args.out,
        seeds=seeds,
        data_dir=getattr(args, "data_dir", None),
        max_communications=getattr(args, "max_communications", None),
    )


def _load_data(cfg: ExperimentConfig):
    return data.load_adult_dir(cfg.data_dir, missing=cfg.missing, seed=cfg.split_seed)


def _shards(cfg: ExperimentConfig, train):
    idx = data.partition(train, cfg.partition_spec(), cfg.partition_seed)
    return idx, [train.subset(i) for i in idx]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def posterior_to_dict(q: GaussianMoment) -> dict:
    return {"mean": [float(v) for v in q.mean], "variance": [float(v) for v in q.variance]}


def posterior_from_dict(d: dict) -> GaussianMoment:
    return GaussianMoment(np.asarray(d["mean"], dtype=np.float64),
                          np.asarray(d["variance"], dtype=np.float64))


def cmd_partition(cfg: ExperimentConfig) -> dict:
    """Partition the training split and write ``manifest.json`` plus ``shards.csv``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = _load_data(cfg)
    idx, _ = _shards(cfg, train)
    manifest = data.write_manifest(out / "manifest.json", train, idx, cfg.partition_spec(),
                                   extra={"distribution": cfg.distribution_label})
    summary = data.shard_summary(train, idx)
    _write_csv(out / "shards.csv", ["client", "group", "n", "positive_fraction", "delta"],
               [[s["client"], s["group"], s["n"], repr(s["positive_fraction"]), s["delta"]]
                for s in summary])
    for s in summary:
        print(f"client {s['client']:2d} {s['group']:5s} N={s['n']:5d} "
              f"positive={100 * s['positive_fraction']:6.2f}%")
    return manifest


def cmd_run(cfg: ExperimentConfig) -> dict:
    """Run every seed; write one metrics CSV and posterior per seed and a summary."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    train, test = _load_data(cfg)
    idx, shards = _shards(cfg, train)
    data.write_manifest(out / "manifest.json", train, idx, cfg.partition_spec(),
                        extra={"distribution": cfg.distribution_label})
    run_cfg = cfg.run_config()
    results = sim.run_seeds(run_cfg, shards, test, cfg.seeds, n_jobs=cfg.n_jobs)
    for seed, res in zip(cfg.seeds, results):
        _write_csv(out / f"metrics_seed{seed}.csv", sim.RunRecord.CSV_FIELDS,
                   [r.csv_row() for r in res.records])
        _write_json(out / f"posterior_seed{seed}.json", posterior_to_dict(res.posterior))
        if res.events:
            _write_json(out / f"events_seed{seed}.json", res.events)
    summary = sim.summarize(results, cfg.last)
    summary.update(
        engine=cfg.engine,
        distribution=cfg.distribution_label,
        seeds=list(cfg.seeds),
        communications=[r.communications for r in results],
        skipped_rounds=[len(r.events) for r in results],
        exhausted_at=[{str(k): v for k, v in sorted(r.exhausted_at.items())} for r in results],
        final_epsilons=[r.epsilons for r in results],
    )
    _write_json(out / "summary.json", summary)
    print(f"{cfg.engine} on {cfg.distribution_label}: accuracy "
          f"{100 * summary['accuracy_mean']:.2f} +/- {100 * summary['accuracy_std']:.2f}, "
          f"avg log likelihood {summary['avg_ll_mean']:.4f} +/- {summary['avg_ll_std']:.4f}")
    return summary


def cmd_sweep(cfg: ExperimentConfig, baseline: str = "global_vi") -> list:
    """Compare ``cfg.engine`` with ``baseline`` over the kappa x rho grid."""
    if not cfg.kappa_grid or not cfg.rho_grid:
        raise ValueError("sweep needs kappa_grid and rho_grid in the config")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = _load_data(cfg)
    grid = [(k, r) for k in cfg.kappa_grid for r in cfg.rho_grid]
    rows = sim.sweep(train, test, grid, configs=(cfg.run_config(), cfg.run_config(baseline)),
                     seeds=cfg.seeds, m_clients=cfg.m_clients, partition_seed=cfg.partition_seed,
                     last=cfg.last, n_jobs=cfg.n_jobs)
    header = ["kappa", "rho", "valid", "accuracy_diff", "avg_ll_diff"]
    _write_csv(out / "sweep.csv", header,
               [[r["kappa"], r["rho"], int(r["valid"]),
                 repr(r["accuracy_diff"]) if r["valid"] else "",
                 repr(r["avg_ll_diff"]) if r["valid"] else ""] for r in rows])
    _write_json(out / "sweep.json", rows)
    return rows


def cmd_accountant(q: float, sigma: float, steps: int, delta: float) -> float:
    eps = privacy.epsilon_for(q, sigma, steps, delta)
    print(f"epsilon = {eps:.6g}  (q={q}, sigma={sigma}, steps={steps}, delta={delta})")
    return eps


def cmd_evaluate(cfg: ExperimentConfig, posterior_path) -> tuple[float, float]:
    """Score a saved posterior on the configured test split."""
    with open(posterior_path, encoding="utf-8") as fh:
        q = posterior_from_dict(json.load(fh))
    _, test = _load_data(cfg)
    if q.dim != test.dim:
        raise ValueError(f"posterior has dimension {q.dim} but the data has {test.dim} features")
    acc, ll = model.evaluate(q, test.x, test.t)
    print(f"accuracy {100 * acc:.2f}  avg log likelihood {ll:.4f}")
    return acc, ll


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbayes",
                                     description="Federated Bayesian logistic regression simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--seed", type=int, action="append",
                       help="run seed; repeat for several seeds")
        p.add_argument("--engine", choices=sim.ENGINES)
        p.add_argument("--distribution", choices=sorted(data.DISTRIBUTIONS))
        p.add_argument("--epsilon-max", type=float, dest="epsilon_max")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data-dir", dest="data_dir",
                       help="directory with adult.data and adult.test (default $FEDBAYES_DATA_DIR)")
        p.add_argument("--max-communications", type=int, dest="max_communications")
        return p

    common(sub.add_parser("partition", help="write the shard manifest"))
    common(sub.add_parser("run", help="train and write metrics"))
    sw = common(sub.add_parser("sweep", help="engine difference over a kappa x rho grid"))
    sw.add_argument("--baseline", choices=sim.ENGINES, default="global_vi")
    ev = common(sub.add_parser("evaluate", help="score a saved posterior"))
    ev.add_argument("posterior", help="posterior JSON written by 'run'")

    acc = sub.add_parser("accountant", help="print epsilon for a subsampled Gaussian")
    acc.add_argument("--q", type=float, default=0.02)
    acc.add_argument("--sigma", type=float, default=5.0)
    acc.add_argument("--steps", type=int, default=1)
    acc.add_argument("--delta", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "accountant":
            if args.steps < 0:
                parser.error("--steps must be non-negative")
            cmd_accountant(args.q, args.sigma, args.steps, args.delta)
            return 0
        cfg = _load_config(args)
        if args.command == "partition":
            cmd_partition(cfg)
        elif args.command == "run":
            cmd_run(cfg)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.baseline)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.posterior)
    except (ValueError, FileNotFoundError) as err:
        print(f"fedbayes: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
