"""Dry-run of the tau sweep on the 12-combination catalog.

Prints the normalized mean FQE-Q per tau cap and the resulting partitions.
Used to pick protocol budgets for the sweep.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from metadvfs import metadata, qlearner, simenv
from metadvfs.evalharness import tau_sweep
from metadvfs.rngstream import seed_for
from metadvfs.taskforest import QProtocol

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
    ap.add_argument("--train-steps", type=int, default=600)
    ap.add_argument("--hidden", type=int, default=10)
    ap.add_argument("--replicas", type=int, default=2)
    ap.add_argument("--delta", type=float, default=0.02)
    ap.add_argument("--taus", type=int, nargs="+", default=[1, 2, 3, 5, 8, 12])
    args = ap.parse_args()

    t0 = time.time()
    cfg = qlearner.TrainConfig(
        train_steps=args.train_steps, hidden_dims=(args.hidden,), steps_per_input=2,
        target_update_interval=100, fqe_iterations=25, fqe_grad_steps=8, sequence_len=6,
    )
    data = collect_all(CATALOGS / "synthetic12.json", args.seed, args.horizon, 0.2)
    qc = QProtocol(train_config=cfg, seed=args.seed, merge_guard_delta=args.delta,
                   n_train_seeds=args.replicas)
    points = tau_sweep(data, args.taus, qc)
    for p in points:
        print(f"tau={p.tau:2d} mean_q={p.mean_fqe_q:+.3f} norm={p.norm_fqe_q:.4f} "
              f"time={p.definition_time_norm:.2f}  t={time.time()-t0:.0f}s")
    import numpy as np
    norms = [p.norm_fqe_q for p in points]
    k = int(np.argmax(norms))
    print("argmax tau", points[k].tau, "interior", 0 < k < len(points) - 1,
          ">= ends", norms[k] >= norms[0] and norms[k] >= norms[-1])
    print("total %.0fs" % (time.time() - t0))


if __name__ == "__main__":
    main()
