import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgnn.errors import ConfigError, ContractError, ExhaustionError
from kgnn.kgstore import DatasetSplit, Direction, build_graph
from kgnn.sampler import SamplerConfig, Slot, corrupt, corrupt_batch, sample_subgraph, worker_rng


def random_graph(seed, n=30, r=4, m=120):
    rng = np.random.default_rng(seed)
    t = np.unique(np.stack([rng.integers(0, n, m), rng.integers(0, r, m), rng.integers(0, n, m)], 1), axis=0)
    return build_graph(DatasetSplit(t), n_entities=n, n_relations=r)


def test_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(fanout_per_hop=())
    with pytest.raises(ConfigError):
        SamplerConfig(fanout_per_hop=(4, 0))
    with pytest.raises(ConfigError):
        SamplerConfig(negatives_per_positive=0)
    with pytest.raises(ConfigError):
        SamplerConfig.for_hops(0)


def test_for_hops_pads_and_truncates():
    assert SamplerConfig.for_hops(1).fanout_per_hop == (16,)
    assert SamplerConfig.for_hops(6, fanout=(5, 3)).fanout_per_hop == (5, 3, 3, 3, 3, 3)


def test_worker_streams_differ():
    a = worker_rng(1, 0).random(4)
    assert np.array_equal(a, worker_rng(1, 0).random(4))
    assert not np.array_equal(a, worker_rng(1, 1).random(4))


def test_corrupt_needs_two_entities():
    g = build_graph(DatasetSplit([[0, 0, 0]]), n_entities=1, n_relations=1)
    with pytest.raises(ExhaustionError):
        corrupt((0, 0, 0), g, SamplerConfig(), worker_rng(0))


def test_corrupt_single_triple_api():
    g = random_graph(0)
    out = corrupt(tuple(g.split.train[0]), g, SamplerConfig(negatives_per_positive=3), worker_rng(0))
    assert len(out) == 3
    assert all(isinstance(c.corrupted_slot, Slot) for c in out)


@given(st.integers(0, 2**31), st.integers(1, 4), st.booleans())
@settings(max_examples=50, deadline=None)
def test_corruption_changes_exactly_one_slot(seed, k, filtered):
    g = random_graph(seed % 7)
    pos = g.split.train[:20]
    neg, slots = corrupt_batch(pos, g, SamplerConfig(negatives_per_positive=k, filter_false_negatives=filtered),
                               worker_rng(seed))
    src = np.repeat(pos, k, axis=0)
    assert neg.shape == src.shape
    assert np.array_equal(neg[:, 1], src[:, 1])
    head = slots == Slot.HEAD
    assert np.array_equal(neg[head, 2], src[head, 2]) and np.all(neg[head, 0] != src[head, 0])
    assert np.array_equal(neg[~head, 0], src[~head, 0]) and np.all(neg[~head, 2] != src[~head, 2])
    if filtered:
        assert not g.contains(neg).any()


def test_corruption_is_roughly_uniform():
    g = build_graph(DatasetSplit([[0, 0, 1]]), n_entities=11, n_relations=1)
    neg, slots = corrupt_batch(np.array([[0, 0, 1]]), g, SamplerConfig(negatives_per_positive=20000), worker_rng(3))
    assert abs(np.mean(slots == Slot.HEAD) - 0.5) < 0.02
    heads = neg[slots == Slot.HEAD, 0]
    counts = np.bincount(heads, minlength=11)
    assert counts[0] == 0
    assert counts[1:].min() > 0.8 * counts[1:].mean()


def test_subgraph_rejects_bad_requests():
    g = random_graph(1)
    cfg = SamplerConfig.for_hops(2)
    with pytest.raises(ContractError):
        sample_subgraph([], g, cfg, worker_rng(0))
    with pytest.raises(ContractError):
        sample_subgraph([99], g, cfg, worker_rng(0))
    with pytest.raises(ContractError):
        sample_subgraph([0], g, cfg, worker_rng(0), hops=3)


@given(st.integers(0, 2**31), st.integers(1, 3), st.lists(st.integers(1, 5), min_size=3, max_size=3))
@settings(max_examples=60, deadline=None)
def test_subgraph_structure(seed, hops, fanout):
    g = random_graph(seed % 5)
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, g.n_entities, 5)
    sg = sample_subgraph(seeds, g, SamplerConfig(fanout_per_hop=fanout), worker_rng(seed), hops=hops)
    uniq = list(dict.fromkeys(seeds.tolist()))
    assert sg.nodes[:len(uniq)].tolist() == uniq
    assert len(set(sg.nodes.tolist())) == sg.num_nodes
    assert np.all(np.diff(sg.depth) >= 0) and sg.depth.max() <= hops
    listed = sg.nbr_index.shape[0]
    assert listed == int(np.sum(sg.depth <= hops - 1))
    for i in range(listed):
        e = int(sg.nodes[i])
        entries = g.neighbors(e)
        got = [(int(r), int(sg.nodes[j]), Direction(int(d)))
               for r, j, d in zip(sg.nbr_rel[i][sg.mask[i]], sg.nbr_index[i][sg.mask[i]], sg.nbr_dir[i][sg.mask[i]])]
        assert len(got) == min(len(entries), fanout[int(sg.depth[i])])
        for entry in got:
            assert entry in entries
        assert len(set(got)) == len(got)
    # every node past the seeds was discovered from an earlier layer
    for i in range(len(uniq), sg.num_nodes):
        owners = np.flatnonzero((sg.mask & (sg.nbr_index == i)).any(axis=1))
        assert len(owners) and sg.depth[owners].min() == sg.depth[i] - 1


def test_subgraph_determinism():
    g = random_graph(2)
    cfg = SamplerConfig(fanout_per_hop=(2, 2))
    a = sample_subgraph([0, 1, 2], g, cfg, worker_rng(5))
    b = sample_subgraph([0, 1, 2], g, cfg, worker_rng(5))
    assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.nbr_index, b.nbr_index)


def test_layer_view_and_active_counts():
    g = random_graph(3)
    sg = sample_subgraph([0, 5], g, SamplerConfig(fanout_per_hop=(3, 3)), worker_rng(1))
    first = sg.layer(1)
    assert set(first) == {0, 5}
    assert all(len(v) <= 3 for v in first.values())
    assert sg.active_count(0) == int(np.sum(sg.depth <= 1))
    assert sg.active_count(1) == int(np.sum(sg.depth == 0))
    with pytest.raises(ContractError):
        sg.layer(3)


def test_isolated_seed_has_empty_list():
    g = build_graph(DatasetSplit([[0, 0, 1]]), n_entities=3, n_relations=1)
    sg = sample_subgraph([2], g, SamplerConfig(fanout_per_hop=(4,)), worker_rng(0))
    assert sg.nodes.tolist() == [2] and not sg.mask.any()
