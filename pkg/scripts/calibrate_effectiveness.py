"""Dry-run of the training-strategy effectiveness grid on the synthetic catalog.

Prints the forest partition, per-combination task-specific improvements, and
the global-strategy extremes.  Used to pick protocol budgets.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from metadvfs import metadata, qlearner, simenv
from metadvfs.evalharness import effectiveness_analysis
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
            out.append((spec.combination, ds))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--horizon", type=int, default=150)
    ap.add_argument("--train-steps", type=int, default=800)
    ap.add_argument("--hidden", type=int, default=10)
    ap.add_argument("--replicas", type=int, default=2)
    ap.add_argument("--tau", type=int, default=5)
    ap.add_argument("--delta", type=float, default=0.0)
    args = ap.parse_args()

    t0 = time.time()
    cfg = qlearner.TrainConfig(
        train_steps=args.train_steps, hidden_dims=(args.hidden,), steps_per_input=2,
        target_update_interval=100, fqe_iterations=25, fqe_grad_steps=8, sequence_len=6,
    )
    data = collect_all(CATALOGS / "synthetic12.json", args.seed, args.horizon, 0.2)
    qc = QProtocol(train_config=cfg, seed=args.seed, merge_guard_delta=args.delta,
                   n_train_seeds=args.replicas)
    forest, trace = build_forest(data, args.tau, qc)
    print("forest:", [sorted(r.members) for r in forest.roots])
    print("build t=%.0fs trainings=%d" % (time.time() - t0, forest.n_trainings))
    cells = effectiveness_analysis(data, forest, qc)
    ts = [c.improvement_pct for c in cells if c.strategy == "task_specific"]
    gl = [c.improvement_pct for c in cells if c.strategy == "global"]
    for c in cells:
        if c.strategy == "task_specific":
            print(f"{c.device_id}x{c.app_id}: {c.improvement_pct:+.1f}%")
    print("task_specific pos frac", round(float(np.mean([t > 0 for t in ts])), 3),
          "mean", round(float(np.mean(ts)), 2))
    print("global neg cells", sum(1 for g in gl if g < 0), "min", round(min(gl), 1))
    print("total %.0fs" % (time.time() - t0))


if __name__ == "__main__":
    main()
