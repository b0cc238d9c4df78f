"""Dry-run of the adaptation-speedup study on the held-out catalog.

Builds the task forest on the 12-combination catalog, meta-trains each root,
then measures paired steps-to-convergence (meta-initialized vs from-scratch)
on the held-out combinations.  Used to pick protocol budgets.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from metadvfs import metadata, qlearner, simenv
from metadvfs.evalharness import adaptation_time_study
from metadvfs.maml import MetaConfig, meta_train
from metadvfs.rngstream import seed_for
from metadvfs.taskforest import QProtocol, build_forest

CATALOGS = Path(__file__).resolve().parents[1] / "src" / "metadvfs" / "catalogs"


def collect_all(catalog, seed, horizon, epsilon):
    records = metadata.load_catalog(catalog)
    out = []
    for d in [r for r in records if r.kind == "device"]:
        for a in [r for r in records if r.kind == "application"]:
            spec = simenv.generate_env(d, a, seed)
            policy = simenv.ExploringPolicy(epsilon, seed_for(seed, "behavior", spec.combination.id))
            ds, _ = simenv.rollout(simenv.DvfsEnv(spec), policy, horizon,
                                   seed_for(seed, "collect", spec.combination.id))
            out.append((spec, ds))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--horizon", type=int, default=150)
    ap.add_argument("--train-steps", type=int, default=1200)
    ap.add_argument("--hidden", type=int, default=10)
    ap.add_argument("--replicas", type=int, default=3)
    ap.add_argument("--tau", type=int, default=5)
    ap.add_argument("--delta", type=float, default=0.02)
    ap.add_argument("--outer-steps", type=int, default=200)
    ap.add_argument("--support", type=int, default=60)
    ap.add_argument("--eval-interval", type=int, default=20)
    ap.add_argument("--max-steps", type=int, default=800)
    ap.add_argument("--reference-steps", type=int, default=1500)
    args = ap.parse_args()

    t0 = time.time()
    cfg = qlearner.TrainConfig(
        train_steps=args.train_steps, hidden_dims=(args.hidden,), steps_per_input=2,
        target_update_interval=100, fqe_iterations=25, fqe_grad_steps=8, sequence_len=6,
    )
    train_items = collect_all(CATALOGS / "synthetic12.json", args.seed, args.horizon, 0.2)
    qc = QProtocol(train_config=cfg, seed=args.seed, merge_guard_delta=args.delta,
                   n_train_seeds=args.replicas)
    forest, _ = build_forest([(s.combination, d) for s, d in train_items], args.tau, qc)
    print("forest:", [sorted(r.members) for r in forest.roots])
    print("build t=%.0fs" % (time.time() - t0))

    mc = MetaConfig(outer_steps=args.outer_steps)
    metas = {}
    for root in forest.roots:
        metas[root.id] = meta_train(root, mc, cfg, seed_for(args.seed, "meta", root.id))
    print("meta t=%.0fs" % (time.time() - t0))

    new_items = collect_all(CATALOGS / "synthetic_new.json", args.seed + 1, args.support, 0.2)
    report = adaptation_time_study(
        new_items, metas, forest, cfg,
        reference_train_steps=args.reference_steps,
        eval_interval=args.eval_interval, max_steps=args.max_steps,
        seed=args.seed,
    )
    for row in report["rows"]:
        print(row)
    m, s = report["median_steps_meta"], report["median_steps_scratch"]
    print("median_meta", m, "median_scratch", s,
          "ratio", (m / s if s else float("nan")), "excluded", report["excluded"])
    print("total %.0fs" % (time.time() - t0))


if __name__ == "__main__":
    main()
