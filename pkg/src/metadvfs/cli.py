"""Stage-oriented command line pipeline.

Subcommands: collect, define-tasks, meta-train, adapt, eval, sweep-tau,
report.  Each stage writes artifacts under --out and records them in a
manifest (config snapshot + content hashes).  Re-running a completed stage
with unchanged inputs is a no-op; all randomness derives from the single
root seed via named substreams, so identical invocations produce
byte-identical artifacts.  Wall-clock timestamps go to the run log, never
into the manifest, to keep reruns byte-comparable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import evalharness, maml, metadata, qlearner, simenv, taskforest
from .rngstream import seed_for

TOOL_VERSION = "metadvfs 0.1.0"


class MissingStage(Exception):
    pass


@dataclass
class RunConfig:
    catalog: str = ""
    seed: int = 0
    samples_per_combination: int = 1000
    explore_epsilon: float = 0.2
    tau_cap: int = 5
    adapt_support_samples: int = 300
    new_catalog: str = ""
    methods: tuple[str, ...] = ("schedutil", "metadvfs")
    tau_values: tuple[int, ...] = (1, 2, 3, 5, 8)
    workers: int = 1
    q: qlearner.TrainConfig = field(default_factory=qlearner.TrainConfig)
    meta: maml.MetaConfig = field(default_factory=maml.MetaConfig)
    eval_protocol: evalharness.EvalProtocol = field(default_factory=evalharness.EvalProtocol)

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        raw = {}
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        cfg = cls()
        q = replace(cfg.q, **{k: _tup(v) for k, v in raw.get("q", {}).items()})
        meta = replace(cfg.meta, **raw.get("meta", {}))
        ev = replace(cfg.eval_protocol, **{k: _tup(v) for k, v in raw.get("eval", {}).items()})
        scalar = {k: v for k, v in raw.items() if k not in ("q", "meta", "eval")}
        scalar.update({k: v for k, v in overrides.items() if v is not None})
        for k in ("methods", "tau_values"):
            if k in scalar and not isinstance(scalar[k], tuple):
                scalar[k] = tuple(scalar[k])
        return replace(cfg, q=q, meta=meta, eval_protocol=ev, **scalar)

    def snapshot(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), sort_keys=True, default=list))


def _tup(v):
    return tuple(v) if isinstance(v, list) else v


# -- manifest ---------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunDir:
    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = out / "manifest.json"
        self.manifest = {"tool_version": TOOL_VERSION, "stages": {}, "artifacts": {}}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())

    def log(self, msg: str) -> None:
        line = f"[{time.strftime('%H:%M:%S')}] {msg}"
        print(line, file=sys.stderr)
        with open(self.out / "run.log", "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def stage_signature(self, config: RunConfig, inputs: list[str]) -> str:
        payload = json.dumps({"config": config.snapshot(), "inputs": sorted(inputs)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def stage_done(self, stage: str, signature: str) -> bool:
        rec = self.manifest["stages"].get(stage)
        if not rec or rec["signature"] != signature:
            return False
        for rel, h in rec["artifacts"].items():
            p = self.out / rel
            if not p.exists() or _sha256(p) != h:
                return False
        return True

    def require_stage(self, stage: str) -> None:
        if stage not in self.manifest["stages"]:
            raise MissingStage(f"stage {stage!r} has not been run in {self.out}")

    def finish_stage(self, stage: str, signature: str, files: list[Path]) -> None:
        artifacts = {str(p.relative_to(self.out)): _sha256(p) for p in sorted(files)}
        self.manifest["stages"][stage] = {"signature": signature, "artifacts": artifacts}
        self.manifest["artifacts"].update(artifacts)
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


# -- shared loading helpers -------------------------------------------------


def _load_combos(config: RunConfig):
    records = metadata.load_catalog(config.catalog)
    devices = [r for r in records if r.kind == "device"]
    apps = [r for r in records if r.kind == "application"]
    return records, [(d, a) for d in devices for a in apps]


def _env_for(device, app, config: RunConfig) -> simenv.DvfsEnv:
    return simenv.DvfsEnv(simenv.generate_env(device, app, config.seed))


def _dataset_path(run: RunDir, combo_id: str) -> Path:
    return run.out / "datasets" / f"{combo_id}.jsonl"


def _task_file_id(root_id: str) -> str:
    return hashlib.sha1(root_id.encode()).hexdigest()[:12]


def _q_protocol(config: RunConfig) -> taskforest.QProtocol:
    return taskforest.QProtocol(train_config=config.q, seed=seed_for(config.seed, "qproto"))


def _load_datasets(run: RunDir, config: RunConfig):
    _, pairs = _load_combos(config)
    out = []
    for device, app in pairs:
        combo = metadata.CombinationKey.from_records(device, app)
        path = _dataset_path(run, combo.id)
        if not path.exists():
            raise MissingStage(f"dataset for {combo.id} missing; run 'collect' first")
        out.append((combo, simenv.Dataset.load_jsonl(path)))
    return out


def _load_forest(run: RunDir, config: RunConfig) -> taskforest.TaskForest:
    run.require_stage("define-tasks")
    doc = json.loads((run.out / "forest.json").read_text())
    data = {c.id: d for c, d in _load_datasets(run, config)}
    combos = {c.id: c for c, _ in _load_datasets(run, config)}
    qc = _q_protocol(config)
    roots = []
    by_id = {n["id"]: n for n in doc["nodes"]}
    for rid in doc["roots"]:
        node = by_id[rid]
        members = frozenset(node["members"])
        model_path = run.out / "models" / f"task_{_task_file_id(rid)}.npz"
        model = qlearner.LtcQNetwork.load(model_path) if model_path.exists() else None
        roots.append(
            taskforest.TaskNode(
                k=dict(node["k"]),
                datasets={m: data[m] for m in node["members"]},
                q=qlearner.QEstimate(value=node["q"], n_states=0, seed=0,
                                     member_values=dict(node.get("member_q") or {}) or None),
                members=members,
                model=model,
                processed=True,
            )
        )
    forest = taskforest.TaskForest(roots=roots, tau_cap=doc["tau_cap"], q_config=qc)
    forest.sort_roots()
    return forest


# -- stages -----------------------------------------------------------------


def cmd_collect(run: RunDir, config: RunConfig) -> None:
    sig = run.stage_signature(config, ["collect"])
    if run.stage_done("collect", sig):
        run.log("collect: up to date, skipping")
        return
    records, pairs = _load_combos(config)
    (run.out / "datasets").mkdir(exist_ok=True)
    (run.out / "envs").mkdir(exist_ok=True)
    files = []
    for device, app in pairs:
        spec = simenv.generate_env(device, app, config.seed)
        env = simenv.DvfsEnv(spec)
        combo_id = spec.combination.id
        policy = simenv.ExploringPolicy(
            config.explore_epsilon, seed_for(config.seed, "behavior", combo_id)
        )
        ds, _ = simenv.rollout(
            env, policy, config.samples_per_combination,
            seed_for(config.seed, "collect", combo_id),
        )
        dpath = _dataset_path(run, combo_id)
        ds.save_jsonl(dpath)
        epath = run.out / "envs" / f"{combo_id}.json"
        epath.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
        files += [dpath, epath]
        run.log(f"collect: {combo_id} ({len(ds)} transitions)")
    run.finish_stage("collect", sig, files)


def cmd_define_tasks(run: RunDir, config: RunConfig) -> None:
    run.require_stage("collect")
    sig = run.stage_signature(config, sorted(run.manifest["stages"]["collect"]["artifacts"].values()))
    if run.stage_done("define-tasks", sig):
        run.log("define-tasks: up to date, skipping")
        return
    datasets = _load_datasets(run, config)
    forest, trace = taskforest.build_forest(datasets, config.tau_cap, _q_protocol(config))
    (run.out / "models").mkdir(exist_ok=True)
    files = []
    forest.save(run.out / "forest.json")
    taskforest.save_trace(trace, run.out / "trace.jsonl")
    files += [run.out / "forest.json", run.out / "trace.jsonl"]
    for root in forest.roots:
        path = run.out / "models" / f"task_{_task_file_id(root.id)}.npz"
        root.model.save(path)
        files.append(path)
    run.log(f"define-tasks: {len(forest.roots)} tasks from {len(datasets)} combinations")
    run.finish_stage("define-tasks", sig, files)


def cmd_meta_train(run: RunDir, config: RunConfig) -> None:
    run.require_stage("define-tasks")
    sig = run.stage_signature(config, sorted(run.manifest["stages"]["define-tasks"]["artifacts"].values()))
    if run.stage_done("meta-train", sig):
        run.log("meta-train: up to date, skipping")
        return
    forest = _load_forest(run, config)
    (run.out / "meta").mkdir(exist_ok=True)
    files = []
    index = {}
    for root in forest.roots:
        model = maml.meta_train(root, config.meta, config.q, seed_for(config.seed, "meta", root.id))
        path = run.out / "meta" / f"meta_{_task_file_id(root.id)}.npz"
        model.save(path)
        index[root.id] = {"file": path.name, "members": sorted(root.members)}
        files.append(path)
        run.log(f"meta-train: task {root.id}")
    ipath = run.out / "meta" / "index.json"
    ipath.write_text(json.dumps(index, indent=2, sort_keys=True))
    files.append(ipath)
    run.finish_stage("meta-train", sig, files)


def _load_meta_models(run: RunDir, config: RunConfig) -> dict[str, maml.MetaModel]:
    run.require_stage("meta-train")
    index = json.loads((run.out / "meta" / "index.json").read_text())
    out = {}
    for task_id, rec in index.items():
        qnet = qlearner.LtcQNetwork.load(run.out / "meta" / rec["file"])
        out[task_id] = maml.MetaModel(
            task_id=task_id, qnet=qnet, inner_lr=config.meta.inner_lr,
            inner_steps=config.meta.inner_steps, trained_on=tuple(rec["members"]),
            meta_config=config.meta,
        )
    return out


def _new_items(run: RunDir, config: RunConfig):
    if not config.new_catalog:
        raise MissingStage("adapt/eval on new combinations needs --new-catalog")
    records = metadata.load_catalog(config.new_catalog)
    devices = [r for r in records if r.kind == "device"]
    apps = [r for r in records if r.kind == "application"]
    items = []
    for d in devices:
        for a in apps:
            spec = simenv.generate_env(d, a, config.seed)
            env = simenv.DvfsEnv(spec)
            policy = simenv.ExploringPolicy(
                config.explore_epsilon, seed_for(config.seed, "behavior", spec.combination.id)
            )
            support, _ = simenv.rollout(
                env, policy, config.adapt_support_samples,
                seed_for(config.seed, "support", spec.combination.id),
            )
            items.append((spec, support))
    return items


def cmd_adapt(run: RunDir, config: RunConfig) -> None:
    metas = _load_meta_models(run, config)
    sig = run.stage_signature(config, sorted(run.manifest["stages"]["meta-train"]["artifacts"].values()))
    if run.stage_done("adapt", sig):
        run.log("adapt: up to date, skipping")
        return
    forest = _load_forest(run, config)
    (run.out / "adapted").mkdir(exist_ok=True)
    files = []
    report = []
    for spec, support in _new_items(run, config):
        combo_id = spec.combination.id
        task_id, fallback = maml.select_task(
            spec.combination, forest, arity=spec.branch_arity, state_dim=spec.state_dim
        )
        adapted = maml.fast_adapt(
            metas[task_id], support, config.q, seed=seed_for(config.seed, "fast-adapt", combo_id)
        )
        path = run.out / "adapted" / f"{combo_id}.npz"
        adapted.qnet.save(path)
        files.append(path)
        report.append(
            {"combination": combo_id, "task": task_id, "fallback": fallback,
             "steps": adapted.adaptation_steps_used, "support_size": adapted.support_size}
        )
        run.log(f"adapt: {combo_id} <- task {task_id}{' (fallback)' if fallback else ''}")
    rpath = run.out / "adapted" / "report.json"
    rpath.write_text(json.dumps(report, indent=2, sort_keys=True))
    files.append(rpath)
    run.finish_stage("adapt", sig, files)


def cmd_eval(run: RunDir, config: RunConfig) -> None:
    run.require_stage("collect")
    inputs = sorted(run.manifest["stages"]["collect"]["artifacts"].values())
    needs_models = any(m != "schedutil" for m in config.methods)
    if needs_models and "metadvfs" in config.methods:
        run.require_stage("define-tasks")
        inputs += sorted(run.manifest["stages"]["define-tasks"]["artifacts"].values())
    sig = run.stage_signature(config, inputs)
    if run.stage_done("eval", sig):
        run.log("eval: up to date, skipping")
        return
    records, pairs = _load_combos(config)
    envs = {}
    for device, app in pairs:
        env = _env_for(device, app, config)
        envs[env.spec.combination.id] = env

    methods: dict[str, object] = {}
    for m in config.methods:
        if m == "schedutil":
            methods[m] = {cid: None for cid in envs}  # handled by compare_methods
        elif m == "metadvfs":
            forest = _load_forest(run, config)
            methods[m] = {
                cid: qlearner.QPolicy(forest.root_for_member(cid).model) for cid in envs
            }
        elif m == "plain_dqn":
            datasets = dict((c.id, d) for c, d in _load_datasets(run, config))
            qc = _q_protocol(config)
            methods[m] = {
                cid: qlearner.QPolicy(
                    qlearner.train_on_dataset(datasets[cid], config.q, qc.node_seed([cid]))
                )
                for cid in envs
            }
        else:
            raise evalharness.MissingArtifact(f"unknown method {m!r}")
    results = evalharness.compare_methods(envs, methods, config.eval_protocol)
    files = [Path(p) for p in evalharness.write_comparison_report(
        run.out / "comparison", results, config.eval_protocol
    )]
    run.log(f"eval: {len(results)} (method x combination) cells")
    run.finish_stage("eval", sig, files)


def cmd_sweep_tau(run: RunDir, config: RunConfig) -> None:
    run.require_stage("collect")
    sig = run.stage_signature(config, sorted(run.manifest["stages"]["collect"]["artifacts"].values()))
    if run.stage_done("sweep-tau", sig):
        run.log("sweep-tau: up to date, skipping")
        return
    datasets = _load_datasets(run, config)
    points = evalharness.tau_sweep(datasets, list(config.tau_values), _q_protocol(config))
    path = run.out / "tau_sweep.csv"
    evalharness.write_sweep_report(path, points)
    run.log("sweep-tau: " + ", ".join(f"tau={p.tau}:{p.norm_fqe_q:.3f}" for p in points))
    run.finish_stage("sweep-tau", sig, [path])


def cmd_report(run: RunDir, config: RunConfig) -> None:
    run.require_stage("define-tasks")
    sig = run.stage_signature(config, sorted(run.manifest["stages"]["define-tasks"]["artifacts"].values()))
    if run.stage_done("report", sig):
        run.log("report: up to date, skipping")
        return
    datasets = _load_datasets(run, config)
    forest = _load_forest(run, config)
    cells = evalharness.effectiveness_analysis(datasets, forest, _q_protocol(config))
    path = run.out / "effectiveness.csv"
    evalharness.write_effectiveness_report(path, cells)
    summary = {
        "tasks": {r.id: sorted(r.members) for r in forest.roots},
        "stages_completed": sorted(run.manifest["stages"]),
    }
    spath = run.out / "summary.json"
    spath.write_text(json.dumps(summary, indent=2, sort_keys=True))
    run.log(f"report: {len(cells)} effectiveness cells")
    run.finish_stage("report", sig, [path, spath])


# -- entry point ------------------------------------------------------------

STAGES = {
    "collect": cmd_collect,
    "define-tasks": cmd_define_tasks,
    "meta-train": cmd_meta_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "sweep-tau": cmd_sweep_tau,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metadvfs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--catalog", default=None)
        p.add_argument("--new-catalog", dest="new_catalog", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--samples", dest="samples_per_combination", type=int, default=None)
        p.add_argument("--tau", dest="tau_cap", type=int, default=None)
        p.add_argument("--tau-values", dest="tau_values", default=None,
                       help="comma list for sweep-tau")
        p.add_argument("--methods", default=None, help="comma list for eval")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        k: getattr(args, k)
        for k in ("catalog", "new_catalog", "seed", "workers", "samples_per_combination", "tau_cap")
    }
    if args.methods:
        overrides["methods"] = tuple(args.methods.split(","))
    if args.tau_values:
        overrides["tau_values"] = tuple(int(t) for t in args.tau_values.split(","))
    try:
        config = RunConfig.load(args.config, overrides)
        if not config.catalog:
            raise MissingStage("a catalog is required (--catalog or config file)")
        run = RunDir(Path(args.out))
        STAGES[args.command](run, config)
    except (MissingStage, metadata.MetadataError, evalharness.MissingArtifact) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
