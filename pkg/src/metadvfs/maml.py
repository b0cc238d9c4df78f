"""Meta-training of per-task initializations and fast adaptation.

Phase 1 runs bi-level optimization over a task's member combinations: the
inner loop takes plain gradient steps on each member's support split, the
outer loop updates the meta-parameters from query losses at the adapted
point.  First-order mode uses the query gradient directly; second-order
mode applies the inner-curvature correction via central-difference
Hessian-vector products (exact for quadratic objectives).

Phase 2 picks the task whose attribute set overlaps the new combination
most, then adapts its meta-model with a few support gradient steps.  The
meta-parameters themselves are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ltc import Params, tree_axpy, tree_copy, tree_zeros_like, tree_add_, tree_scale_
from .metadata import CombinationKey, merge_view, shared_attributes
from .qlearner import (
    Adam,
    ArityMismatch,
    LtcQNetwork,
    ReplayMemory,
    StateNormalizer,
    TrainConfig,
    td_loss_and_grads,
)
from .rngstream import substream
from .simenv import Dataset


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-2
    inner_steps: int = 5
    meta_lr: float = 1e-3
    outer_steps: int = 300
    support_frac: float = 0.7
    batch_size: int = 32
    second_order: bool = False
    hvp_epsilon: float = 1e-4


@dataclass(frozen=True)
class SupportQuerySplit:
    support: Dataset
    query: Dataset


@dataclass
class MetaModel:
    task_id: str
    qnet: LtcQNetwork  # theta_meta
    inner_lr: float
    inner_steps: int
    trained_on: tuple[str, ...]
    meta_config: MetaConfig

    def save(self, path) -> None:
        self.qnet.save(path)


@dataclass
class AdaptedModel:
    qnet: LtcQNetwork
    source_task_id: str
    adaptation_steps_used: int
    support_size: int


def split_support_query(ds: Dataset, support_frac: float) -> SupportQuerySplit:
    """Contiguous split preserving within-segment temporal order."""
    cut = int(round(len(ds) * support_frac))
    cut = min(max(cut, 1), len(ds) - 1)
    mk = lambda sl, episode_offset: Dataset(
        states=ds.states[sl],
        actions=ds.actions[sl],
        rewards=ds.rewards[sl],
        next_states=ds.next_states[sl],
        episode_ids=ds.episode_ids[sl] * 2 + episode_offset,  # keep halves in distinct episodes
        branch_arity=ds.branch_arity,
        source_ids=ds.source_ids,
    )
    return SupportQuerySplit(support=mk(slice(0, cut), 0), query=mk(slice(cut, None), 1))


# -- generic bi-level gradient machinery ------------------------------------


def _tree_dot(a: Params, b: Params) -> float:
    return float(sum(np.vdot(a[k], b[k]) for k in a))


def maml_meta_gradient(grad_support, grad_query, params: Params, alpha: float, inner_steps: int,
                       second_order: bool = False, hvp_epsilon: float = 1e-4):
    """Meta-gradient of the query loss after ``inner_steps`` support steps.

    ``grad_support``/``grad_query`` map a parameter tree to a gradient tree.
    Second-order mode backpropagates through the inner updates using
    central-difference Hessian-vector products of the support gradient.
    Returns (meta-gradient, adapted parameters).
    """
    thetas = [params]
    theta = params
    for _ in range(inner_steps):
        theta = tree_axpy(-alpha, grad_support(theta), theta)
        thetas.append(theta)
    g = grad_query(theta)
    if second_order:
        for i in range(inner_steps - 1, -1, -1):
            norm = np.sqrt(max(_tree_dot(g, g), 1e-300))
            eps = hvp_epsilon / norm
            gp = grad_support(tree_axpy(eps, g, thetas[i]))
            gm = grad_support(tree_axpy(-eps, g, thetas[i]))
            hvp = {k: (gp[k] - gm[k]) / (2.0 * eps) for k in g}
            g = tree_axpy(-alpha, hvp, g)
    return g, theta


# -- phase 1 ----------------------------------------------------------------


def _batch_grad_fn(qnet: LtcQNetwork, target: LtcQNetwork, batch: dict, config: TrainConfig):
    def fn(params: Params) -> Params:
        trial = LtcQNetwork(type(qnet.net)(qnet.net.config, params), qnet.branch_arity, qnet.normalizer)
        _, grads = td_loss_and_grads(trial, target, batch, config)
        return grads

    return fn


def meta_train(task, meta_config: MetaConfig, train_config: TrainConfig, seed: int) -> MetaModel:
    """Phase 1 for one task root of the forest; deterministic per seed."""
    members = sorted(task.datasets)
    splits = {m: split_support_query(task.datasets[m], meta_config.support_frac) for m in members}

    if task.model is not None:
        qnet = task.model.copy()  # warm start from the node's offline checkpoint
    else:
        qnet = LtcQNetwork.init(task.state_dim, task.arity, train_config, substream(seed, "meta", "init"))
    qnet.normalizer = StateNormalizer.fit(np.concatenate([splits[m].support.states for m in members]))

    mems = {}
    for m in members:
        sup, qry = splits[m].support, splits[m].query
        seq = min(train_config.sequence_len, len(sup), len(qry))
        mems[m] = (
            ReplayMemory.from_dataset(sup),
            ReplayMemory.from_dataset(qry),
            seq,
        )
    ends = {m: (mems[m][0].valid_sequence_ends(mems[m][2]), mems[m][1].valid_sequence_ends(mems[m][2])) for m in members}

    rng = substream(seed, "meta", "train")
    opt = Adam(qnet.params, meta_config.meta_lr)
    for _ in range(meta_config.outer_steps):
        target = qnet.copy()  # TD targets frozen at the outer-step start
        meta_grad = tree_zeros_like(qnet.params)
        for m in members:
            sup_mem, qry_mem, seq = mems[m]
            sup_ends, qry_ends = ends[m]
            sup_batch = sup_mem.sample_sequences(sup_ends, meta_config.batch_size, seq, rng)
            qry_batch = qry_mem.sample_sequences(qry_ends, meta_config.batch_size, seq, rng)
            g, _ = maml_meta_gradient(
                _batch_grad_fn(qnet, target, sup_batch, train_config),
                _batch_grad_fn(qnet, target, qry_batch, train_config),
                qnet.params,
                meta_config.inner_lr,
                meta_config.inner_steps,
                second_order=meta_config.second_order,
                hvp_epsilon=meta_config.hvp_epsilon,
            )
            tree_add_(meta_grad, g)
        tree_scale_(meta_grad, 1.0 / len(members))
        opt.step(qnet.params, meta_grad)
    return MetaModel(
        task_id=task.id,
        qnet=qnet,
        inner_lr=meta_config.inner_lr,
        inner_steps=meta_config.inner_steps,
        trained_on=tuple(members),
        meta_config=meta_config,
    )


# -- phase 2 ----------------------------------------------------------------


def select_task(new_combination: CombinationKey, forest, arity=None, state_dim=None):
    """Most-overlapping task root for a new combination.

    Returns (task_id, fallback).  ``fallback`` is True when no root shares a
    single attribute pair (the highest-Q compatible root is returned then).
    """
    combo_view = merge_view(new_combination.merged_attributes, forest.q_config.merge_keys)
    compatible = [
        r
        for r in forest.roots
        if (arity is None or r.arity == tuple(arity)) and (state_dim is None or r.state_dim == state_dim)
    ]
    if not compatible:
        raise ArityMismatch("no task root is shape-compatible with the new combination")
    scored = [
        (len(shared_attributes(merge_view(r.k, forest.q_config.merge_keys), combo_view)), r.q.value, r.id)
        for r in compatible
    ]
    best_overlap = max(s[0] for s in scored)
    if best_overlap == 0:
        best = max(compatible, key=lambda r: (r.q.value, r.id))
        return best.id, True
    # ties: higher Q, then lexicographically smaller id
    tied = sorted((s for s in scored if s[0] == best_overlap), key=lambda t: (-t[1], t[2]))
    return tied[0][2], False


def fast_adapt(meta_model: MetaModel, support: Dataset, train_config: TrainConfig,
               steps: int | None = None, seed: int = 0) -> AdaptedModel:
    """Phase 2: a few support gradient steps from theta_meta (never mutated)."""
    if len(support) == 0:
        raise ValueError("nonempty support set required")
    qnet = meta_model.qnet.copy()
    if qnet.branch_arity != support.branch_arity:
        raise ArityMismatch(f"{qnet.branch_arity} vs {support.branch_arity}")
    n_steps = meta_model.inner_steps if steps is None else steps
    if n_steps == 0:
        return AdaptedModel(qnet=qnet, source_task_id=meta_model.task_id, adaptation_steps_used=0,
                            support_size=len(support))
    qnet.normalizer = StateNormalizer.fit(support.states)
    mem = ReplayMemory.from_dataset(support)
    seq = min(train_config.sequence_len, len(support))
    ends = mem.valid_sequence_ends(seq)
    rng = substream(seed, "adapt", meta_model.task_id)
    target = qnet.copy()
    for step in range(n_steps):
        batch = mem.sample_sequences(ends, meta_model.meta_config.batch_size, seq, rng)
        _, grads = td_loss_and_grads(qnet, target, batch, train_config)
        for k in qnet.params:
            qnet.params[k] -= meta_model.inner_lr * grads[k]
        if (step + 1) % train_config.target_update_interval == 0:
            target = qnet.copy()
    return AdaptedModel(qnet=qnet, source_task_id=meta_model.task_id,
                        adaptation_steps_used=n_steps, support_size=len(support))
