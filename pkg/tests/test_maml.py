import numpy as np
import pytest

from metadvfs import maml, qlearner, simenv
from metadvfs.maml import (
    MetaConfig,
    fast_adapt,
    maml_meta_gradient,
    meta_train,
    select_task,
    split_support_query,
)
from metadvfs.taskforest import QProtocol, build_forest

import mdp_oracle
from conftest import CATALOG_DIR, SMALL_TRAIN, collect

META_SMALL = MetaConfig(outer_steps=15, inner_steps=2)


@pytest.fixture(scope="module")
def toy_forest(toy_datasets):
    qc = QProtocol(train_config=SMALL_TRAIN, seed=0)
    forest, _ = build_forest(toy_datasets, tau_cap=3, q_config=qc)
    return forest


# -- support/query split -----------------------------------------------------

def test_split_is_contiguous_and_disjoint():
    ds = mdp_oracle.make_dataset(64, 0, n_episodes=4)
    split = split_support_query(ds, 0.7)
    assert len(split.support) + len(split.query) == len(ds)
    assert len(split.support) == pytest.approx(0.7 * 64, abs=2)
    # episodes each side are renumbered into disjoint id ranges
    assert set(split.support.episode_ids).isdisjoint(set(split.query.episode_ids))
    assert np.array_equal(split.support.states, ds.states[: len(split.support)])


# -- meta-gradient algebra on a quadratic ------------------------------------
# loss_i(theta) = 0.5 (theta - c_i)^T A (theta - c_i): gradients are linear,
# so finite-difference HVPs are exact and the second-order meta-gradient has
# the closed form (I - alpha A)^k A (theta_k - c_q).

A = np.diag([1.0, 3.0])
C_S = np.array([1.0, -1.0])
C_Q = np.array([-2.0, 0.5])


def quad_grad(center):
    return lambda p: {"w": A @ (p["w"] - center)}


@pytest.mark.parametrize("steps", [1, 3])
def test_second_order_matches_closed_form(steps):
    alpha = 0.05
    theta0 = {"w": np.array([0.3, 0.7])}
    g, adapted = maml_meta_gradient(
        quad_grad(C_S), quad_grad(C_Q), theta0, alpha, steps, second_order=True
    )
    M = np.eye(2) - alpha * A
    th = theta0["w"].copy()
    for _ in range(steps):
        th = th - alpha * A @ (th - C_S)
    expected = np.linalg.matrix_power(M, steps) @ A @ (th - C_Q)
    assert np.allclose(adapted["w"], th, atol=1e-12)
    assert np.allclose(g["w"], expected, atol=1e-6)


def test_first_order_is_plain_query_gradient():
    alpha = 0.05
    theta0 = {"w": np.array([0.3, 0.7])}
    g1, adapted = maml_meta_gradient(quad_grad(C_S), quad_grad(C_Q), theta0, alpha, 3)
    assert np.allclose(g1["w"], A @ (adapted["w"] - C_Q), atol=1e-12)


def test_first_and_second_order_agree_for_small_alpha():
    theta0 = {"w": np.array([0.3, 0.7])}
    g1, _ = maml_meta_gradient(quad_grad(C_S), quad_grad(C_Q), theta0, 1e-4, 2)
    g2, _ = maml_meta_gradient(quad_grad(C_S), quad_grad(C_Q), theta0, 1e-4, 2, second_order=True)
    assert np.allclose(g1["w"], g2["w"], atol=1e-3)


def test_zero_alpha_meta_gradient_is_query_gradient_at_theta():
    theta0 = {"w": np.array([0.3, 0.7])}
    for second in (False, True):
        g, adapted = maml_meta_gradient(
            quad_grad(C_S), quad_grad(C_Q), theta0, 0.0, 4, second_order=second
        )
        assert np.allclose(adapted["w"], theta0["w"])
        assert np.allclose(g["w"], A @ (theta0["w"] - C_Q), atol=1e-9)


# -- meta-training -----------------------------------------------------------

def test_meta_train_deterministic(toy_forest):
    task = max(toy_forest.roots, key=lambda r: len(r.members))
    m1 = meta_train(task, META_SMALL, SMALL_TRAIN, 3)
    m2 = meta_train(task, META_SMALL, SMALL_TRAIN, 3)
    for k, v in m1.qnet.params.items():
        assert np.array_equal(v, m2.qnet.params[k])
    assert m1.trained_on == tuple(sorted(task.members))


def test_meta_train_leaves_task_model_untouched(toy_forest):
    task = toy_forest.roots[0]
    before = {k: v.copy() for k, v in task.model.params.items()}
    meta_train(task, META_SMALL, SMALL_TRAIN, 0)
    for k, v in task.model.params.items():
        assert np.array_equal(v, before[k])


# -- task selection ----------------------------------------------------------

def test_select_task_prefers_max_overlap(toy_forest, toy_catalog):
    from metadvfs.metadata import CombinationKey

    devices = {r.id: r for r in toy_catalog if r.kind == "device"}
    apps = {r.id: r for r in toy_catalog if r.kind == "application"}
    combo = CombinationKey.from_records(devices["MiniB"], apps["VidOne"])
    task_id, fallback = select_task(combo, toy_forest)
    root = next(r for r in toy_forest.roots if r.id == task_id)
    assert not fallback
    # chosen root shares at least as many attributes as any other root
    from metadvfs.metadata import merge_view, shared_attributes

    mv = merge_view(combo.merged_attributes, toy_forest.q_config.merge_keys)
    chosen = len(shared_attributes(mv, merge_view(root.k, toy_forest.q_config.merge_keys)))
    for other in toy_forest.roots:
        ov = len(shared_attributes(mv, merge_view(other.k, toy_forest.q_config.merge_keys)))
        assert chosen >= ov


def test_select_task_falls_back_on_zero_overlap(toy_forest):
    from metadvfs.metadata import CombinationKey

    alien = CombinationKey(device_id="x", app_id="y",
                           merged_attributes={"device.chipset_vendor": "nonesuch"})
    task_id, fallback = select_task(alien, toy_forest)
    assert fallback
    best_q = max(r.q.value for r in toy_forest.roots)
    assert next(r for r in toy_forest.roots if r.id == task_id).q.value == best_q


def test_select_task_rejects_incompatible_arity(toy_forest):
    from metadvfs.metadata import CombinationKey

    combo = CombinationKey(device_id="x", app_id="y", merged_attributes={})
    with pytest.raises(qlearner.ArityMismatch):
        select_task(combo, toy_forest, arity=(4, 4), state_dim=99)


# -- fast adaptation ---------------------------------------------------------

def test_zero_step_adaptation_is_identity(toy_forest):
    task = toy_forest.roots[0]
    meta = meta_train(task, META_SMALL, SMALL_TRAIN, 0)
    support = task.merged_dataset()
    adapted = fast_adapt(meta, support, SMALL_TRAIN, steps=0)
    for k, v in adapted.qnet.params.items():
        assert np.array_equal(v, meta.qnet.params[k])


def test_fast_adapt_does_not_mutate_meta_model(toy_forest):
    task = toy_forest.roots[0]
    meta = meta_train(task, META_SMALL, SMALL_TRAIN, 0)
    before = {k: v.copy() for k, v in meta.qnet.params.items()}
    fast_adapt(meta, task.merged_dataset(), SMALL_TRAIN, steps=5)
    for k, v in meta.qnet.params.items():
        assert np.array_equal(v, before[k])


def test_fast_adapt_reduces_td_loss_on_support():
    # a meta model warm-started from the twins task, adapted to a fresh twin
    from metadvfs import metadata

    records = metadata.load_catalog(CATALOG_DIR / "toy6.json")
    devices = {r.id: r for r in records if r.kind == "device"}
    apps = {r.id: r for r in records if r.kind == "application"}
    spec, support, _ = collect(devices["MiniB"], apps["VidOne"], root_seed=9)

    parts = []
    for app in ("VidOne", "VidTwo"):
        s, ds, _ = collect(devices["MiniA"], apps[app])
        parts.append((s.combination, ds))
    qc = QProtocol(train_config=SMALL_TRAIN, seed=0)
    forest, _ = build_forest(parts, tau_cap=2, q_config=qc)
    task = max(forest.roots, key=lambda r: len(r.members))
    meta = meta_train(task, META_SMALL, SMALL_TRAIN, 0)

    def support_td_loss(qnet):
        mem = qlearner.ReplayMemory.from_dataset(support)
        ends = mem.valid_sequence_ends(4)
        batch = mem.sample_sequences(ends, 64, 4, np.random.default_rng(0))
        loss, _ = qlearner.td_loss_and_grads(qnet, qnet.copy(), batch, SMALL_TRAIN)
        return loss

    before = support_td_loss(fast_adapt(meta, support, SMALL_TRAIN, steps=0).qnet)
    after = support_td_loss(fast_adapt(meta, support, SMALL_TRAIN, steps=40).qnet)
    assert after < before
