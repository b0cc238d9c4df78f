import itertools

import numpy as np
import pytest

from metadvfs import taskforest
from metadvfs.metadata import merge_view, shared_attributes
from metadvfs.taskforest import QProtocol, build_forest, init_forest, _fit_node

from conftest import SMALL_TRAIN, collect


def proto(seed=0, **kw):
    return QProtocol(train_config=SMALL_TRAIN, seed=seed, **kw)


def three_item_instance(toy_catalog, root_seed=0):
    """Two near-identical combinations plus one distinct one."""
    devices = {r.id: r for r in toy_catalog if r.kind == "device"}
    apps = {r.id: r for r in toy_catalog if r.kind == "application"}
    picks = [
        (devices["MiniA"], apps["VidOne"]),
        (devices["MiniA"], apps["VidTwo"]),
        (devices["MiniA"], apps["ChatOne"]),
    ]
    out = []
    for d, a in picks:
        spec, ds, _ = collect(d, a, root_seed=root_seed)
        out.append((spec.combination, ds))
    return out


# -- exhaustive oracle -------------------------------------------------------

def all_partitions(items):
    if len(items) == 1:
        yield [items]
        return
    head, rest = items[0], items[1:]
    for part in all_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[head] + part[i]] + part[i + 1 :]
        yield [[head]] + part


def mergeable_block(block, combos, merge_keys):
    """Every pair in a block must share >=1 merge-view attribute pair."""
    for a, b in itertools.combinations(block, 2):
        if not shared_attributes(merge_view(combos[a].merged_attributes, merge_keys),
                                 merge_view(combos[b].merged_attributes, merge_keys)):
            return False
    return True


def best_partition_by_exhaustion(datasets, q_config, tau_cap):
    """Brute force over all partitions whose blocks the merge rule can build.

    A block is buildable when some sequence of pairwise node merges reaches
    it with every member's own FQE value improving at each step — the same
    acceptance rule the greedy builder applies, but tried in every order
    rather than in gain order.  Among buildable partitions the winner is the
    one with the highest transition-weighted sum of member values.
    """
    combos = {c.id: c for c, _ in datasets}
    data = {c.id: d for c, d in datasets}
    ids = sorted(combos)
    fits = {}

    def member_values(block):
        if block not in fits:
            fits[block] = _fit_node({m: data[m] for m in block}, q_config)[1].member_values
        return fits[block]

    delta = q_config.merge_guard_delta

    def improves(after, before):
        return after > before + delta * abs(before)

    buildable_memo = {}

    def buildable(block):
        if len(block) == 1:
            return True
        if block in buildable_memo:
            return buildable_memo[block]
        vals = member_values(block)
        ok = False
        rest = block[1:]
        for r in range(1, len(block)):
            for picked in itertools.combinations(rest, r):
                left = tuple(sorted((block[0],) + tuple(m for m in rest if m not in picked)))
                right = tuple(sorted(picked))
                if not (buildable(left) and buildable(right)):
                    continue
                if all(
                    improves(vals[m], member_values(side)[m])
                    for side in (left, right)
                    for m in side
                ):
                    ok = True
                    break
            if ok:
                break
        buildable_memo[block] = ok
        return ok

    best, best_score = None, -np.inf
    for part in all_partitions(ids):
        blocks = [tuple(sorted(b)) for b in part]
        if any(len(b) > tau_cap for b in blocks):
            continue
        if not all(mergeable_block(b, combos, q_config.merge_keys) for b in blocks):
            continue
        if not all(buildable(b) for b in blocks):
            continue
        # transition-weighted: the score of a partition is the expected value
        # of the block a uniformly drawn transition belongs to
        score = sum(len(data[m]) * member_values(b)[m] for b in blocks for m in b)
        if score > best_score:
            best, best_score = blocks, score
    return frozenset(frozenset(b) for b in best)


ORACLE_TRAIN = taskforest.TrainConfig(
    train_steps=600,
    hidden_dims=(10,),
    steps_per_input=2,
    target_update_interval=100,
    fqe_iterations=20,
    fqe_grad_steps=6,
)


def test_build_forest_matches_exhaustive_oracle(toy_catalog):
    agree = 0
    for seed in range(3):
        datasets = three_item_instance(toy_catalog, root_seed=seed)
        qc = QProtocol(train_config=ORACLE_TRAIN, seed=seed, n_train_seeds=2)
        forest, _ = build_forest(datasets, tau_cap=3, q_config=qc)
        got = frozenset(r.members for r in forest.roots)
        want = best_partition_by_exhaustion(datasets, qc, tau_cap=3)
        agree += int(got == want)
    assert agree >= 2


# -- trace soundness ---------------------------------------------------------

def test_accepted_merges_strictly_improve_q(toy_datasets):
    qc = proto()
    _, trace = build_forest(toy_datasets, tau_cap=3, q_config=qc)
    accepted = [r for r in trace if r.accepted]
    assert accepted, "expected at least one merge on the toy catalog"
    for rec in accepted:
        assert rec.q_combined > rec.q_before


def test_trace_covers_every_intermediate_target(toy_datasets):
    forest, trace = build_forest(toy_datasets, tau_cap=2, q_config=proto())
    assert all(r.processed for r in forest.roots)
    # member-set partition is preserved
    members = sorted(m for r in forest.roots for m in r.members)
    assert members == sorted(c.id for c, _ in toy_datasets)


def test_trace_roundtrips_to_jsonl(tmp_path, toy_datasets):
    _, trace = build_forest(toy_datasets[:3], tau_cap=2, q_config=proto())
    path = tmp_path / "trace.jsonl"
    taskforest.save_trace(trace, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(trace)


# -- structural behavior -----------------------------------------------------

def test_tau_one_forbids_all_merges(toy_datasets):
    forest, trace = build_forest(toy_datasets, tau_cap=1, q_config=proto())
    assert all(len(r.members) == 1 for r in forest.roots)
    assert not any(r.accepted for r in trace)


def test_tau_one_equals_standalone_fits(toy_datasets):
    qc = proto()
    forest, _ = build_forest(toy_datasets, tau_cap=1, q_config=qc)
    for combo, ds in toy_datasets:
        _, q = _fit_node({combo.id: ds}, qc)
        assert forest.root_for_member(combo.id).q.value == q.value  # bit-for-bit


def test_merge_narrows_attributes(toy_datasets):
    forest, trace = build_forest(toy_datasets, tau_cap=3, q_config=proto())
    merged = [r for r in forest.roots if len(r.members) > 1]
    assert merged
    for node in merged:
        for child in node.children:
            assert set(node.k.items()) <= set(child.k.items())


def test_tau_cap_respected(toy_datasets):
    for tau in (1, 2, 3):
        forest, _ = build_forest(toy_datasets, tau_cap=tau, q_config=proto())
        assert max(len(r.members) for r in forest.roots) <= tau


def test_forest_deterministic(toy_datasets):
    runs = []
    for _ in range(2):
        forest, trace = build_forest(toy_datasets, tau_cap=3, q_config=proto())
        runs.append((frozenset(r.members for r in forest.roots),
                     [r.to_dict() for r in trace]))
    assert runs[0] == runs[1]


def test_node_seed_depends_only_on_member_set():
    qc = proto(seed=4)
    assert qc.node_seed(["b", "a"]) == qc.node_seed(["a", "b"])
    assert qc.node_seed(["a"]) != qc.node_seed(["a", "b"])


def test_literal_else_absorbs_rejected_merge(toy_datasets):
    # with a prohibitive guard nothing merges, but the pseudocode's else branch
    # still hands the target the combined samples and Q
    qc_strict = proto(merge_guard_delta=1e9, literal_else=True)
    forest, trace = build_forest(toy_datasets[:3], tau_cap=3, q_config=qc_strict)
    assert not any(r.accepted for r in trace)
    assert all(len(r.members) == 1 for r in forest.roots)
    evaluated = [r for r in trace if r.candidate_id is not None]
    assert any(
        forest.root_for_member(next(iter(r.target_id.split("+")))).q.value == r.q_combined
        for r in evaluated
    )


def test_incompatible_arity_never_merges(toy_catalog):
    # MiniA/MiniB share a 4+4 topology; fabricate a mismatch by comparing
    # against the 3-cluster synthetic family
    from conftest import CATALOG_DIR
    from metadvfs import metadata

    syn = metadata.load_catalog(CATALOG_DIR / "synthetic12.json")
    d_syn = next(r for r in syn if r.kind == "device")
    a_syn = next(r for r in syn if r.kind == "application")
    spec, ds, _ = collect(d_syn, a_syn)
    toy = three_item_instance(toy_catalog)[:1]
    forest, _ = build_forest(toy + [(spec.combination, ds)], tau_cap=3, q_config=proto())
    assert all(len(r.members) == 1 for r in forest.roots)


def test_forest_serialization(tmp_path, toy_datasets):
    forest, _ = build_forest(toy_datasets[:3], tau_cap=3, q_config=proto())
    path = tmp_path / "forest.json"
    forest.save(path)
    import json

    doc = json.loads(path.read_text())
    assert set(doc) == {"tau_cap", "roots", "nodes"}
    assert sorted(doc["roots"]) == sorted(r.id for r in forest.roots)


def test_init_forest_validates():
    with pytest.raises(ValueError):
        init_forest([], proto())
