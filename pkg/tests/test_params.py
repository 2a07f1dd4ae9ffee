import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgnn.errors import ConfigError, DimensionError, VocabLookupError
from kgnn.params import (AdamConfig, DecoderKind, KeySpace, LocalAccess, ModelSpec, ParamKind, ParameterStore,
                         adam_apply, clip_rows, layout, renormalize_rows, shard_of)


def adam_reference(x, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam, one scalar at a time."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=8), st.floats(-1, 1))
@settings(max_examples=60, deadline=None)
def test_adam_matches_reference(grads, x0):
    vals, m, v, t = np.full((1, 1), x0), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1, np.int64)
    for g in grads:
        adam_apply(vals, m, v, t, np.array([0]), np.array([[g]]), AdamConfig(lr=0.01))
    assert vals[0, 0] == pytest.approx(adam_reference(x0, grads), abs=1e-12)


def test_adam_first_step_moves_by_lr():
    vals, m, v, t = np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(2, np.int64)
    adam_apply(vals, m, v, t, np.array([1]), np.array([[2.0, -5.0, 1e-3]]), AdamConfig(lr=0.1, eps=0.0))
    assert np.allclose(vals[1], [-0.1, 0.1, -0.1]) and np.all(vals[0] == 0)


def test_step_counter_is_per_row():
    spec = ModelSpec(4, 2, dim=2, encoder="lookup", decoder="DistMult")
    store = ParameterStore.initialize(spec, 0)
    hyper = AdamConfig()
    store.adam_update("entity", [0, 2], np.ones((2, 2)), hyper)
    store.adam_update("entity", [2], np.ones((1, 2)), hyper)
    assert store.t["entity"].tolist() == [1, 0, 2, 0]


def test_adam_rejects_duplicates_and_bad_shapes():
    store = ParameterStore.initialize(ModelSpec(4, 2, dim=2, encoder="lookup"), 0)
    with pytest.raises(DimensionError):
        store.adam_update("entity", [1, 1], np.ones((2, 2)), AdamConfig())
    with pytest.raises(DimensionError):
        store.adam_update("entity", [1], np.ones((1, 3)), AdamConfig())


@pytest.mark.parametrize("decoder", [k.value for k in DecoderKind])
@pytest.mark.parametrize("encoder", ["gnn", "lookup"])
def test_layout_shapes(decoder, encoder):
    spec = ModelSpec(7, 3, dim=4, encoder=encoder, decoder=decoder, attention_hidden=5)
    groups = {g.name: g for g in layout(spec)}
    assert groups["entity"].count == 7 and groups["relation"].shape == (4,)
    assert ("hyperplane" in groups) == (decoder == "TransH")
    assert ("proj" in groups) == (decoder == "TransR")
    if encoder == "gnn":
        assert groups["attn_W"].shape == (5, 12)
        assert groups["lstm_W"].shape == (16, 8)
        assert groups["attn_relation"].count == 6
    else:
        assert not {"attn_W", "lstm_W", "attn_relation"} & set(groups)


def test_initialization_is_seeded_and_constrained():
    spec = ModelSpec(10, 4, dim=6, decoder="TransH")
    a, b = ParameterStore.initialize(spec, 3), ParameterStore.initialize(spec, 3)
    c = ParameterStore.initialize(spec, 4)
    assert all(np.array_equal(a.values[n], b.values[n]) for n in a.values)
    assert not np.array_equal(a.values["entity"], c.values["entity"])
    assert np.allclose(np.linalg.norm(a.values["hyperplane"], axis=1), 1.0)
    assert np.all(a.values["lstm_b"] == 0)
    r = ParameterStore.initialize(ModelSpec(3, 2, dim=3, decoder="TransR"), 0)
    assert np.array_equal(r.values["proj"][1], np.eye(3))


def test_keyspace_resolution():
    spec = ModelSpec(5, 2, dim=3)
    ks = KeySpace(layout(spec))
    assert ks.resolve(ParamKind.ATTN_WEIGHT, 1) == ("attn_u", 0)
    assert ks.resolve(ParamKind.ENTITY_EMB, 4) == ("entity", 4)
    parts = ks.resolve_many(ParamKind.ATTN_WEIGHT, np.array([1, 0]))
    assert [(n, p.tolist(), r.tolist()) for n, p, r in parts] == [("attn_W", [1], [0]), ("attn_u", [0], [0])]
    with pytest.raises(VocabLookupError):
        ks.resolve(ParamKind.ENTITY_EMB, 5)
    with pytest.raises(VocabLookupError):
        ks.resolve_many(ParamKind.PROJ_MATRIX, np.array([0]))


@given(st.integers(1, 9), st.sampled_from(list(ParamKind)))
@settings(max_examples=40, deadline=None)
def test_shard_assignment_is_total_and_balanced(n, kind):
    ids = np.arange(5000)
    s = shard_of(int(kind), ids, n)
    assert s.min() >= 0 and s.max() < n
    assert np.array_equal(s, shard_of(int(kind), ids, n))
    counts = np.bincount(s, minlength=n)
    assert counts.min() >= 0.8 * counts.mean()


def test_renormalize_and_zero_row():
    vals = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]])
    renormalize_rows(vals, [0, 1])
    assert np.allclose(vals[0], [0.6, 0.8])
    assert np.isclose(np.linalg.norm(vals[1]), 1.0)
    first = vals[1].copy()
    vals[1] = 0.0
    renormalize_rows(vals, [1])
    assert np.array_equal(vals[1], first)  # reinit is deterministic per row


def test_clip_rows():
    vals = np.array([[3.0, 4.0], [0.3, 0.4]])
    clip_rows(vals)
    assert np.allclose(vals, [[0.6, 0.8], [0.3, 0.4]])


def test_lookup_entities_stay_in_unit_ball():
    spec = ModelSpec(4, 1, dim=3, encoder="lookup", decoder="TransE")
    store = ParameterStore.initialize(spec, 0)
    assert np.all(np.linalg.norm(store.values["entity"], axis=1) <= 1 + 1e-12)
    store.adam_update("entity", [0], -1e3 * np.ones((1, 3)), AdamConfig(lr=5.0))
    assert np.linalg.norm(store.values["entity"][0]) <= 1 + 1e-12


def test_local_access_roundtrip():
    spec = ModelSpec(4, 2, dim=2, encoder="lookup", decoder="DistMult")
    store = ParameterStore.initialize(spec, 0)
    access = LocalAccess(store, AdamConfig())
    got = access.pull({"entity": [3, 1]})
    assert got["entity"][0].tolist() == [3, 1]
    got["entity"][1][:] = 99.0
    assert not np.any(store.values["entity"] == 99.0)
    copy = store.copy()
    copy.values["entity"][0] = 5.0
    assert store.values["entity"][0, 0] != 5.0


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(3, 1, encoder="mlp")
    with pytest.raises(ConfigError):
        ModelSpec(3, 1, hops=0)
    with pytest.raises(ConfigError):
        ModelSpec(3, 1, decoder="RotatE")
    with pytest.raises(ConfigError):
        ModelSpec(3, 1, norm="L3")
    assert ModelSpec(3, 1, encoder="lookup", hops=0).hops == 0
    assert ModelSpec(3, 1).to_dict()["decoder"] == "TransH"
