"""Bottom-up task-forest construction from per-combination datasets.

Each dataset starts as its own root.  A root may merge with another root
that shares at least one attribute key/value pair, provided the merged
member count respects the tau cap and the offline Q-value of training on
the pooled samples beats the transition-weighted mix of both parents'
standalone Qs.  Accepted merges create a
parent node whose attribute set is the value-level intersection of the two
children.  Roots are kept sorted by ascending Q between iterations and the
loop runs until every root is processed.

Q-values of differently-sized datasets are only comparable under a fixed
protocol: every node is trained and evaluated with the same TrainConfig and
a seed derived from its member-id set, so identical inputs always reproduce
identical forests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .metadata import CombinationKey, shared_attributes, merge_view, DEFAULT_MERGE_KEYS
from .qlearner import LtcQNetwork, QEstimate, TrainConfig, fqe_q_value, train_on_dataset
from .rngstream import seed_for
from .simenv import Dataset


@dataclass(frozen=True)
class QProtocol:
    """Fixed train-and-evaluate protocol shared by every node in one run."""

    train_config: TrainConfig
    seed: int
    merge_guard_delta: float = 0.01  # accept only if Q gain clears this relative margin
    literal_else: bool = False  # reproduce the pseudocode's rejected-merge absorption
    merge_keys: frozenset[str] = DEFAULT_MERGE_KEYS
    n_train_seeds: int = 1  # node Q averaged over this many training replicas

    def node_seed(self, member_ids, replica: int = 0) -> int:
        if replica == 0:
            return seed_for(self.seed, "node", *sorted(member_ids))
        return seed_for(self.seed, "node", f"replica{replica}", *sorted(member_ids))


@dataclass
class TaskNode:
    k: dict[str, str]
    datasets: dict[str, Dataset]  # member combination id -> its own samples
    q: QEstimate
    members: frozenset[str]
    children: list["TaskNode"] = field(default_factory=list)
    processed: bool = False
    model: LtcQNetwork | None = None

    @property
    def id(self) -> str:
        return "+".join(sorted(self.members))

    @property
    def arity(self):
        return next(iter(self.datasets.values())).branch_arity

    @property
    def state_dim(self):
        return next(iter(self.datasets.values())).state_dim

    def merged_dataset(self) -> Dataset:
        parts = [self.datasets[m] for m in sorted(self.datasets)]
        return parts[0] if len(parts) == 1 else Dataset.concat(parts)


@dataclass
class MergeRecord:
    target_id: str
    candidate_id: str | None
    q_before: float
    q_combined: float | None
    accepted: bool

    def to_dict(self) -> dict:
        return {
            "target": self.target_id,
            "candidate": self.candidate_id,
            "q_before": self.q_before,
            "q_combined": self.q_combined,
            "accepted": self.accepted,
        }


@dataclass
class TaskForest:
    roots: list[TaskNode]
    tau_cap: int
    q_config: QProtocol
    n_trainings: int = 0  # how many node train+evaluate runs the build spent

    def root_for_member(self, combination_id: str) -> TaskNode:
        for r in self.roots:
            if combination_id in r.members:
                return r
        raise KeyError(combination_id)

    def sort_roots(self) -> None:
        self.roots.sort(key=lambda r: (r.q.value, r.id))

    def to_dict(self) -> dict:
        nodes = []

        def walk(node: TaskNode):
            nodes.append(
                {
                    "id": node.id,
                    "k": dict(sorted(node.k.items())),
                    "members": sorted(node.members),
                    "q": node.q.value,
                    "member_q": node.q.member_values or {},
                    "children": [c.id for c in node.children],
                }
            )
            for c in node.children:
                walk(c)

        for r in self.roots:
            walk(r)
        return {"tau_cap": self.tau_cap, "roots": [r.id for r in self.roots], "nodes": nodes}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _fit_node(datasets: dict[str, Dataset], q_config: QProtocol):
    """Train on the pooled samples and score with per-member FQE.

    The node Q is the transition-weighted mean of one FQE run per member,
    each seeded by that member's id alone.  Running FQE on the pooled data
    instead would bias multi-member nodes upward (a single regressor fit
    across heterogeneous reward scales smooths low-value members toward the
    mixture mean), which makes Qs of different-sized nodes incomparable.
    Under member-keyed evaluation only the policy differs between a node
    and its parents, so merge decisions compare like with like.
    """
    seed = q_config.node_seed(datasets.keys())
    parts = [datasets[m] for m in sorted(datasets)]
    values, nets = [], []
    member_acc = {m: [] for m in datasets}
    n, converged, residual = 0, True, 0.0
    for replica in range(max(1, q_config.n_train_seeds)):
        net = train_on_dataset(parts, q_config.train_config, q_config.node_seed(datasets.keys(), replica))
        total, n = 0.0, 0
        for m in sorted(datasets):
            est = fqe_q_value(net, datasets[m], q_config.train_config, q_config.node_seed([m]))
            member_acc[m].append(est.value)
            total += est.value * len(datasets[m])
            n += len(datasets[m])
            converged &= est.converged
            residual = max(residual, est.residual)
        values.append(total / n)
        nets.append(net)
    # Q is the replica mean; the kept model is the best-scoring replica
    q = QEstimate(
        value=float(np.mean(values)),
        n_states=n,
        seed=seed,
        converged=converged,
        residual=residual,
        member_values={m: float(np.mean(v)) for m, v in member_acc.items()},
    )
    return nets[int(np.argmax(values))], q


def init_forest(datasets: list[tuple[CombinationKey, Dataset]], q_config: QProtocol, tau_cap: int = 5) -> TaskForest:
    """One root per dataset, each scored under the shared protocol."""
    if not datasets:
        raise ValueError("at least one dataset required")
    if tau_cap < 1:
        raise ValueError("tau_cap must be >= 1")
    roots = []
    for combo, ds in datasets:
        node_data = {combo.id: ds}
        net, q = _fit_node(node_data, q_config)
        roots.append(
            TaskNode(k=dict(combo.merged_attributes), datasets=node_data, q=q, members=frozenset({combo.id}), model=net)
        )
    forest = TaskForest(roots=roots, tau_cap=tau_cap, q_config=q_config)
    forest.sort_roots()
    return forest


def find_candidates(forest: TaskForest, target: TaskNode) -> list[TaskNode]:
    """Other roots sharing >=1 merge-view pair with the target, tau permitting."""
    out = []
    for root in forest.roots:
        if root is target:
            continue
        if len(root.members | target.members) > forest.tau_cap:
            continue
        if root.arity != target.arity or root.state_dim != target.state_dim:
            continue  # incompatible action branching can never share a model
        if shared_attributes(
            merge_view(target.k, forest.q_config.merge_keys), merge_view(root.k, forest.q_config.merge_keys)
        ):
            out.append(root)
    return out


def evaluate_merge(target: TaskNode, candidate: TaskNode, q_config: QProtocol):
    """Score the tentative union without mutating anything.

    Returns (proposal node, Q estimate of the pooled training).
    """
    merged_data = {**target.datasets, **candidate.datasets}
    net, q = _fit_node(merged_data, q_config)
    proposal = TaskNode(
        k=shared_attributes(target.k, candidate.k),
        datasets=merged_data,
        q=q,
        members=target.members | candidate.members,
        children=[target, candidate],
        model=net,
    )
    return proposal, q


def separate_q(target: TaskNode, candidate: TaskNode) -> float:
    """Pre-merge baseline: both parents' Qs mixed by transition count.

    FQE returns a state-average, so the pooled node's Q is only comparable
    to its parents through the same evaluation mixture; comparing against
    the target's Q alone would let any merge with a higher-Q root look like
    an improvement.
    """
    n_t = sum(len(d) for d in target.datasets.values())
    n_c = sum(len(d) for d in candidate.datasets.values())
    return (n_t * target.q.value + n_c * candidate.q.value) / (n_t + n_c)


def merge_acceptable(target: TaskNode, candidate: TaskNode, proposal: TaskNode, qc: QProtocol) -> bool:
    """Accept only merges that leave no member worse off.

    The weighted Q alone can rise while one member's policy collapses (value
    redistributed toward easier members), so each member's FQE under the
    pooled model must clear its value under the parent it came from, plus
    the relative margin.  This implies the weighted condition
    Q_combined > Q_before as logged in the trace.
    """
    for parent in (target, candidate):
        for m in parent.members:
            before = parent.q.member_values[m]
            after = proposal.q.member_values[m]
            if not after > before + qc.merge_guard_delta * abs(before):
                return False
    return True


def update_forest(target: TaskNode, candidate: TaskNode | None, proposal: TaskNode | None, forest: TaskForest) -> bool:
    """Apply one merge decision; returns True when the forest changed."""
    qc = forest.q_config
    if proposal is not None and candidate is not None:
        if merge_acceptable(target, candidate, proposal, qc):
            forest.roots = [r for r in forest.roots if r is not target and r is not candidate]
            forest.roots.append(proposal)
            forest.sort_roots()
            return True
        if qc.literal_else:
            # pseudocode verbatim: a rejected merge still hands the target the
            # combined samples and Q; the candidate remains a separate root
            target.q = proposal.q
            target.datasets = dict(proposal.datasets)
    target.processed = True
    forest.sort_roots()
    return False


def build_forest(
    datasets: list[tuple[CombinationKey, Dataset]], tau_cap: int, q_config: QProtocol
) -> tuple[TaskForest, list[MergeRecord]]:
    """Run the merge loop until every root is processed."""
    forest = init_forest(datasets, q_config, tau_cap)
    forest.n_trainings = len(datasets)
    trace: list[MergeRecord] = []
    while True:
        target = next((r for r in forest.roots if not r.processed), None)
        if target is None:
            break
        candidates = find_candidates(forest, target)
        if not candidates:
            trace.append(MergeRecord(target.id, None, target.q.value, None, False))
            target.processed = True
            continue
        best, best_key = None, None
        for cand in candidates:
            proposal, q = evaluate_merge(target, cand, q_config)
            forest.n_trainings += 1
            feasible = merge_acceptable(target, cand, proposal, q_config)
            gain = q.value - separate_q(target, cand)
            key = (feasible, gain)  # any acceptable merge outranks all rejected ones
            if best is None or key > best_key:
                best, best_key = (cand, proposal), key
        cand, proposal = best
        q_before = separate_q(target, cand)
        changed = update_forest(target, cand, proposal, forest)
        trace.append(MergeRecord(target.id, cand.id, q_before, proposal.q.value, changed))
    return forest, trace


def save_trace(trace: list[MergeRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
