"""Run configuration: a flat ``section.key=value`` text file.

Every key has a type and a default. Parsing rejects unknown keys and
validates the whole file before any work starts; the effective config
(defaults filled in) can be written back out and reloaded unchanged.

Example::

    # comments start with '#'
    data.synthetic = tiny
    encoder.kind = lookup
    train.decoder = TransE
    train.lr = 0.01
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .errors import ConfigError
from .kgstore import KnowledgeGraph
from .params import DecoderKind, ModelSpec
from .sampler import SamplerConfig
from .trainer import TrainConfig

DECODERS = tuple(k.value for k in DecoderKind)
SYNTHETIC = ("tiny", "compositional", "context", "typed", "attribute")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple:
    text = text.strip()
    return tuple(int(x) for x in text.split(",")) if text else ()


def _strs(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _choice(*options):
    def parse(text):
        for o in options:
            if o.lower() == text.strip().lower():
                return o
        raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    "data.dir": Key(str, "", "directory with train/valid/test files"),
    "data.synthetic": Key(_choice("", *SYNTHETIC), "", "generate a built-in graph instead of reading data.dir"),
    "data.seed": Key(int, 0, "generator seed for data.synthetic"),
    "data.inverse_edges": Key(_bool, True, "let entities see incoming edges as neighbors"),
    "data.attributes": Key(_bool, True, "read attributes.tsv when present"),
    "encoder.kind": Key(_choice("gnn", "lookup"), "gnn", "gnn encoder or plain lookup table"),
    "encoder.hops": Key(int, 2, "number of propagation steps K"),
    "encoder.dim": Key(int, 64, "embedding size"),
    "encoder.attention_hidden": Key(int, 32, "attention hidden width"),
    "encoder.use_attributes": Key(_bool, False, "project entity attributes into the base embedding"),
    "encoder.leaky_slope": Key(float, 0.2, "negative slope inside the attention"),
    "encoder.share_relations": Key(_bool, False, "attention reuses the decoder relation table"),
    "encoder.strict": Key(_bool, False, "fail on entities with neither embedding nor attributes"),
    "sampler.fanout": Key(_ints, (), "neighbors kept per hop; empty means defaults"),
    "sampler.negatives": Key(int, 1, "corruptions per positive"),
    "sampler.filter": Key(_bool, True, "reject corruptions that are known triples"),
    "train.decoder": Key(_choice(*DECODERS), "TransH", "scoring function"),
    "train.norm": Key(_choice("L1", "L2"), "L2", "distance norm of translational decoders"),
    "train.lr": Key(float, 0.001, "Adam learning rate"),
    "train.beta1": Key(float, 0.9, "Adam beta1"),
    "train.beta2": Key(float, 0.999, "Adam beta2"),
    "train.eps": Key(float, 1e-8, "Adam epsilon"),
    "train.margin": Key(float, 1.0, "hinge margin"),
    "train.batch_size": Key(int, 256, "positives per batch"),
    "train.epochs": Key(int, 10, "passes over the training split"),
    "train.seed": Key(int, 0, "seed for initialization, shuffling and sampling"),
    "train.keep_checkpoints": Key(int, 2, "how many recent checkpoints to keep"),
    "train.patience": Key(int, 0, "early stopping patience in epochs; 0 disables"),
    "runtime.mode": Key(_choice("local", "distributed"), "local", "single process or parameter server"),
    "runtime.workers": Key(int, 1, "worker count in distributed mode"),
    "runtime.shards": Key(int, 0, "parameter shards; 0 picks max(1, workers // 2)"),
    "runtime.transport": Key(_choice("inproc", "tcp"), "inproc", "how workers reach the shards"),
    "runtime.endpoints": Key(_strs, (), "host:port of running shard servers, in shard order"),
    "runtime.host": Key(str, "127.0.0.1", "address spawned shard servers bind to"),
    "eval.mode": Key(_choice("raw", "filtered"), "filtered", "ranking protocol"),
    "eval.ks": Key(_ints, (1, 3, 10), "cutoffs for HR@k"),
    "eval.seed": Key(int, 0x5EED, "seed for evaluation-time sampling"),
    "output.dir": Key(str, "", "where checkpoints and CSVs go"),
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; later lines win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}", f"expected key=value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Validated, typed view of a config file."""

    def __init__(self, values: Optional[dict] = None):
        self.values = {k: key.default for k, key in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    # construction -----------------------------------------------------------

    def set(self, key: str, value):
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if isinstance(value, str):
            try:
                value = SCHEMA[key].parse(value)
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        self.values[key] = value

    @classmethod
    def from_text(cls, text: str, source: str = "<config>", overrides: Optional[dict] = None) -> "RunConfig":
        raw = parse_text(text, source)
        raw.update(overrides or {})
        return cls(raw)

    @classmethod
    def load(cls, path: str, overrides: Optional[dict] = None) -> "RunConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        return cls.from_text(text, path, overrides)

    def derive(self, changes: dict) -> "RunConfig":
        """Copy with some keys replaced, e.g. ``{"encoder.hops": 3}``."""
        return RunConfig({**self.values, **changes})

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    # validation -------------------------------------------------------------

    def validate(self):
        v = self.values
        if bool(v["data.dir"]) == bool(v["data.synthetic"]):
            raise ConfigError("data.dir", "set exactly one of data.dir and data.synthetic")
        for key in ("encoder.hops", "encoder.dim", "encoder.attention_hidden", "sampler.negatives",
                    "runtime.workers"):
            if v[key] < 1:
                raise ConfigError(key, "must be >= 1")
        for key in ("runtime.shards", "train.keep_checkpoints", "train.patience"):
            if v[key] < 0:
                raise ConfigError(key, "must be >= 0")
        if not 0.0 <= v["train.beta1"] < 1.0:
            raise ConfigError("train.beta1", "must lie in [0, 1)")
        if not 0.0 <= v["train.beta2"] < 1.0:
            raise ConfigError("train.beta2", "must lie in [0, 1)")
        if v["train.eps"] <= 0:
            raise ConfigError("train.eps", "must be positive")
        if v["sampler.fanout"] and v["encoder.kind"] == "gnn" and len(v["sampler.fanout"]) != v["encoder.hops"]:
            raise ConfigError("sampler.fanout", f"needs {v['encoder.hops']} entries, one per hop")
        if not v["eval.ks"] or any(k < 1 for k in v["eval.ks"]):
            raise ConfigError("eval.ks", "cutoffs must be >= 1")
        if v["runtime.endpoints"]:
            from .ps.client import parse_endpoint
            for e in v["runtime.endpoints"]:
                try:
                    parse_endpoint(e)
                except ValueError as exc:
                    raise ConfigError("runtime.endpoints", str(exc)) from None
        self.train_config()
        self.sampler_config()

    # typed views --------------------------------------------------------------

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(learning_rate=v["train.lr"], batch_size=v["train.batch_size"],
                           margin=v["train.margin"], epochs=v["train.epochs"], decoder=v["train.decoder"],
                           encoder=v["encoder.kind"], seed=v["train.seed"], beta1=v["train.beta1"],
                           beta2=v["train.beta2"], eps=v["train.eps"], norm=v["train.norm"],
                           keep_checkpoints=max(1, v["train.keep_checkpoints"]), patience=v["train.patience"])

    def sampler_config(self) -> SamplerConfig:
        v = self.values
        kw = dict(negatives_per_positive=v["sampler.negatives"], filter_false_negatives=v["sampler.filter"],
                  seed=v["train.seed"])
        return SamplerConfig.for_hops(v["encoder.hops"], fanout=v["sampler.fanout"] or None, **kw)

    def model_spec(self, g: KnowledgeGraph) -> ModelSpec:
        v = self.values
        if v["encoder.use_attributes"] and g.attributes is None:
            raise ConfigError("encoder.use_attributes", "the dataset has no attributes")
        return ModelSpec(g.n_entities, g.n_relations, dim=v["encoder.dim"], encoder=v["encoder.kind"],
                         decoder=v["train.decoder"], hops=v["encoder.hops"],
                         attention_hidden=v["encoder.attention_hidden"], use_attributes=v["encoder.use_attributes"],
                         attr_dim=g.attr_dim if v["encoder.use_attributes"] else 0,
                         inverse_edges=v["data.inverse_edges"], leaky_slope=v["encoder.leaky_slope"],
                         norm=v["train.norm"], share_relations=v["encoder.share_relations"],
                         strict=v["encoder.strict"])

    @property
    def shards(self) -> int:
        from .ps.coordinator import default_shards
        return self.values["runtime.shards"] or default_shards(self.values["runtime.workers"])

    # output ---------------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        section = None
        for k in SCHEMA:
            head = k.split(".", 1)[0]
            if head != section:
                if section is not None:
                    lines.append("")
                section = head
            lines.append(f"{k} = {_fmt(self.values[k])}")
        return "\n".join(lines) + "\n"

    def save(self, path: str):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_text())


def describe() -> str:
    """One line per key: name, default, help."""
    width = max(map(len, SCHEMA))
    return "\n".join(f"{k:<{width}}  {_fmt(key.default) or '-':<12} {key.help}"
                     for k, key in SCHEMA.items())
