import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgnn.config import SCHEMA, RunConfig, describe, parse_text
from kgnn.errors import ConfigError
from kgnn.synthetic import attribute_kg, tiny_family

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def field_of(text):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_text(text)
    return err.value.field


def test_parse_text_comments_and_errors():
    assert parse_text("# header\n a.b = 1 # note\n\nc.d=x=y\n") == {"a.b": "1", "c.d": "x=y"}
    with pytest.raises(ConfigError) as err:
        parse_text("a.b=1\nnonsense\n", "run.conf")
    assert err.value.field == "run.conf:2"


def test_defaults_and_types():
    cfg = RunConfig.from_text("data.synthetic = tiny\nsampler.fanout = 8,4\ntrain.decoder = transe\n")
    assert cfg["sampler.fanout"] == (8, 4) and cfg["train.decoder"] == "TransE"
    assert cfg["eval.ks"] == (1, 3, 10) and cfg["train.lr"] == 0.001
    assert cfg.sampler_config().fanout_per_hop == (8, 4)
    assert cfg.train_config().decoder == "TransE"
    assert cfg.shards == 1 and cfg.derive({"runtime.workers": 8}).shards == 4


@pytest.mark.parametrize("text,field", [
    ("data.synthetic=tiny\ntrain.bogus=1", "train.bogus"),
    ("data.synthetic=tiny\ntrain.lr=-1", "train.lr"),
    ("data.synthetic=tiny\ntrain.lr=fast", "train.lr"),
    ("data.synthetic=tiny\nencoder.hops=0", "encoder.hops"),
    ("data.synthetic=tiny\nencoder.hops=3\nsampler.fanout=4,4", "sampler.fanout"),
    ("data.synthetic=tiny\ntrain.decoder=RotatE", "train.decoder"),
    ("data.synthetic=tiny\neval.ks=0,10", "eval.ks"),
    ("data.synthetic=tiny\ndata.inverse_edges=maybe", "data.inverse_edges"),
    ("data.synthetic=tiny\nruntime.endpoints=nohost", "runtime.endpoints"),
    ("data.synthetic=tiny\ntrain.beta2=1.0", "train.beta2"),
    ("data.synthetic=tiny\ntrain.batch_size=0", "train.batch_size"),
    ("data.synthetic=tiny\ndata.dir=x", "data.dir"),
    ("train.lr=0.1", "data.dir"),
])
def test_invalid_values_name_their_field(text, field):
    assert field_of(text) == field


def test_overrides_win():
    cfg = RunConfig.from_text("data.synthetic=tiny\ntrain.seed=1\n", overrides={"train.seed": "7"})
    assert cfg["train.seed"] == 7


@given(st.integers(1, 4), st.floats(1e-5, 1.0), st.sampled_from(["TransE", "TransH", "TransR", "DistMult"]),
       st.booleans(), st.lists(st.integers(1, 30), min_size=1, max_size=4))
@settings(max_examples=50, deadline=None)
def test_text_roundtrip(hops, lr, decoder, inverse, ks):
    cfg = RunConfig({"data.synthetic": "tiny", "encoder.hops": hops, "train.lr": lr, "train.decoder": decoder,
                     "data.inverse_edges": inverse, "eval.ks": tuple(ks), "sampler.fanout": (5,) * hops})
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg


def test_save_load(tmp_path):
    cfg = RunConfig({"data.synthetic": "compositional", "output.dir": "runs/x"})
    cfg.save(str(tmp_path / "sub" / "c.conf"))
    assert RunConfig.load(str(tmp_path / "sub" / "c.conf")) == cfg
    with pytest.raises(ConfigError) as err:
        RunConfig.load(str(tmp_path / "missing.conf"))
    assert err.value.field == "--config"


def test_model_spec_from_graph():
    cfg = RunConfig({"data.synthetic": "tiny", "encoder.dim": 8, "train.norm": "L1"})
    spec = cfg.model_spec(tiny_family())
    assert (spec.n_entities, spec.dim, spec.norm) == (12, 8, "L1")
    with pytest.raises(ConfigError):
        cfg.derive({"encoder.use_attributes": True}).model_spec(tiny_family())
    g = attribute_kg(n_entities=50, n_triples=200)
    spec = cfg.derive({"encoder.use_attributes": True}).model_spec(g)
    assert spec.attributes_on and spec.attr_dim == 16


@pytest.mark.parametrize("name", ["tiny.conf", "compositional_hops.conf"])
def test_shipped_configs_load(name):
    cfg = RunConfig.load(os.path.join(CONFIGS, name))
    assert cfg["data.synthetic"]


def test_describe_lists_every_key():
    text = describe()
    assert all(k in text for k in SCHEMA)
