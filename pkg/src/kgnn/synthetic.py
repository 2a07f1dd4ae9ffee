"""Synthetic knowledge graphs with known structure.

Each generator is deterministic in its seed and returns a
:class:`~kgnn.kgstore.KnowledgeGraph` whose vocabularies carry readable
names. :func:`write_dataset` materializes any of them as a data directory
that :func:`~kgnn.kgstore.load_dataset` reads back.
"""

from __future__ import annotations

import os

import numpy as np

from .kgstore import DatasetSplit, KnowledgeGraph, Vocab, build_graph, save_attributes, save_triples


def _graph(names, relations, train, valid=(), test=(), attributes=None) -> KnowledgeGraph:
    split = DatasetSplit(np.asarray(train, np.int64).reshape(-1, 3),
                         np.asarray(valid, np.int64).reshape(-1, 3),
                         np.asarray(test, np.int64).reshape(-1, 3))
    split.check_disjoint()
    return build_graph(split, Vocab(names), Vocab(relations), attributes=attributes)


# tiny family tree -------------------------------------------------------------

FAMILY_PEOPLE = ("ada", "ben", "cal", "dee", "eve", "fay", "gus", "hal", "ivy", "jon", "kit", "lou")
FAMILY_SPOUSES = (("ada", "ben"),)
FAMILY_PARENTS = (
    ("ada", "cal"), ("ada", "dee"), ("ada", "eve"),
    ("ben", "cal"), ("ben", "dee"), ("ben", "eve"),
    ("cal", "fay"), ("cal", "gus"), ("dee", "hal"), ("dee", "ivy"), ("eve", "jon"),
    ("fay", "kit"), ("hal", "lou"),
)
FAMILY_HELD_OUT = (
    ("ada", "grandparent", "hal"), ("ben", "grandparent", "gus"),
    ("ada", "grandparent", "jon"), ("cal", "grandparent", "kit"),
)


def family_triples() -> list[tuple[str, str, str]]:
    """All 40 facts: spouse (symmetric), parent, child_of and grandparent = parent o parent."""
    kids: dict[str, list[str]] = {}
    for p, c in FAMILY_PARENTS:
        kids.setdefault(p, []).append(c)
    grand = sorted({(p, g) for p, cs in kids.items() for c in cs for g in kids.get(c, ())})
    facts = [(a, "spouse", b) for a, b in FAMILY_SPOUSES] + [(b, "spouse", a) for a, b in FAMILY_SPOUSES]
    facts += [(p, "parent", c) for p, c in FAMILY_PARENTS]
    facts += [(c, "child_of", p) for p, c in FAMILY_PARENTS]
    facts += [(p, "grandparent", g) for p, g in grand]
    return facts


def tiny_family() -> KnowledgeGraph:
    """12 people, 40 triples; four grandparent facts are held out as the test split."""
    ents = Vocab(FAMILY_PEOPLE)
    rels = Vocab(["spouse", "parent", "child_of", "grandparent"])
    held = set(FAMILY_HELD_OUT)

    def ids(facts):
        return [(ents.id(h), rels.id(r), ents.id(t)) for h, r, t in facts]

    facts = family_triples()
    return _graph(ents.names, rels.names, ids([f for f in facts if f not in held]), test=ids(FAMILY_HELD_OUT))


# compositional chain ------------------------------------------------------------

def compositional_kg(seed: int = 0, heads: int = 300, tails: int = 60, test_frac: float = 0.3) -> KnowledgeGraph:
    """``r3 = r1 o r2``: every head reaches one tail through a private middle node.

    All ``r1`` and ``r2`` facts are observed; a ``test_frac`` share of the
    ``r3`` shortcuts is held out.
    """
    rng = np.random.default_rng(seed)
    X = np.arange(heads)
    A = heads + np.arange(heads)
    B = 2 * heads + np.arange(tails)
    b_of = B[rng.integers(0, tails, heads)]
    r1 = np.stack([X, np.zeros(heads, np.int64), A], 1)
    r2 = np.stack([A, np.ones(heads, np.int64), b_of], 1)
    r3 = np.stack([X, np.full(heads, 2), b_of], 1)
    perm = rng.permutation(heads)
    n_test = int(round(test_frac * heads))
    names = [f"head{i}" for i in range(heads)] + [f"mid{i}" for i in range(heads)] + [f"tail{i}" for i in range(tails)]
    return _graph(names, ["r1", "r2", "r3"], np.concatenate([r1, r2, r3[perm[n_test:]]]), test=r3[perm[:n_test]])


# two-hop context ----------------------------------------------------------------

def context_kg(seed: int = 0, n_types: int = 40, n_kinds: int = 220, items: int = 580,
               parts_per_item: int = 2, test_frac: float = 0.3) -> KnowledgeGraph:
    """Items whose category is visible only two hops away.

    Each item owns private parts (``has_part``); each part points to a kind
    (``of_kind``) drawn from the item's hidden type. The item's category
    (``category``) is held out for ``test_frac`` of the items. An item's
    own edges lead only to parts unique to it, so the category can be
    inferred only from the kinds behind those parts. Defaults give
    exactly 2,000 entities.
    """
    rng = np.random.default_rng(seed)
    cats = np.arange(n_types)
    kinds = n_types + np.arange(n_kinds)
    kind_type = np.arange(n_kinds) % n_types
    item0 = n_types + n_kinds
    item_ids = item0 + np.arange(items)
    item_type = rng.integers(0, n_types, items)
    part0 = item0 + items
    HAS_PART, OF_KIND, CATEGORY = 0, 1, 2
    parts = part0 + np.arange(items * parts_per_item)
    owner = np.repeat(np.arange(items), parts_per_item)
    has_part = np.stack([item_ids[owner], np.full(len(parts), HAS_PART), parts], 1)
    pick = np.empty(len(parts), np.int64)
    for i, t in enumerate(item_type[owner]):
        pool = kinds[kind_type == t]
        pick[i] = pool[rng.integers(len(pool))]
    of_kind = np.stack([parts, np.full(len(parts), OF_KIND), pick], 1)
    category = np.stack([item_ids, np.full(items, CATEGORY), cats[item_type]], 1)
    perm = rng.permutation(items)
    n_test = int(round(test_frac * items))
    names = ([f"cat{i}" for i in range(n_types)] + [f"kind{i}" for i in range(n_kinds)]
             + [f"item{i}" for i in range(items)] + [f"part{i}" for i in range(len(parts))])
    train = np.concatenate([has_part, of_kind, category[perm[n_test:]]])
    return _graph(names, ["has_part", "of_kind", "category"], train, test=category[perm[:n_test]])


# typed random graphs -------------------------------------------------------------

def _typed_edges(rng, n_entities, n_types, n_relations, n_triples, shifted=False):
    """Edges whose tail type is a function of (head type, relation).

    By default each relation permutes the types. With ``shifted`` it adds a
    fixed offset of 1 to 3 to the type index, a map a translation can express,
    and heads whose shifted type would leave the range are dropped.
    """
    etype = rng.integers(0, n_types, n_entities)
    members = [np.flatnonzero(etype == t) for t in range(n_types)]
    if shifted:
        offset = rng.integers(1, 4, n_relations)
        perms = np.stack([np.minimum(np.arange(n_types) + k, n_types) for k in offset])
        members.append(np.empty(0, np.int64))
    else:
        perms = np.stack([rng.permutation(n_types) for _ in range(n_relations)])
    draws = n_triples * (3 if shifted else 2)
    heads = rng.integers(0, n_entities, draws)
    rels = rng.integers(0, n_relations, draws)
    if shifted:
        keep = perms[rels, etype[heads]] < n_types
        heads, rels = heads[keep], rels[keep]
    tails = np.empty_like(heads)
    for i, (h, r) in enumerate(zip(heads.tolist(), rels.tolist())):
        pool = members[perms[r, etype[h]]]
        tails[i] = pool[rng.integers(len(pool))]
    t = np.unique(np.stack([heads, rels, tails], 1), axis=0)
    t = t[rng.permutation(len(t))[:n_triples]]
    return etype, t


def typed_kg(seed: int = 0, n_entities: int = 5000, n_types: int = 25, n_relations: int = 10,
             n_triples: int = 50000, test_frac: float = 0.01) -> KnowledgeGraph:
    """Random graph where each relation shifts a head's hidden type to a fixed tail type.

    The default size (50,000 triples) is the scaling benchmark.
    """
    rng = np.random.default_rng(seed)
    _, t = _typed_edges(rng, n_entities, n_types, n_relations, n_triples, shifted=True)
    n_test = int(round(test_frac * len(t)))
    names = [f"e{i}" for i in range(n_entities)]
    return _graph(names, [f"rel{r}" for r in range(n_relations)], t[n_test:], test=t[:n_test])


def attribute_kg(seed: int = 0, n_entities: int = 1000, n_types: int = 10, n_relations: int = 8,
                 n_triples: int = 8000, attr_dim: int = 16, noise: float = 0.3,
                 held_out_frac: float = 0.1) -> KnowledgeGraph:
    """Typed graph whose entities carry noisy type attributes; some entities are never trained on.

    A ``held_out_frac`` share of entities is removed from training
    altogether: every triple touching one of them lands in the test split,
    so at evaluation time they have no observed edges and only attributes.
    """
    rng = np.random.default_rng(seed)
    etype, t = _typed_edges(rng, n_entities, n_types, n_relations, n_triples)
    attrs = rng.normal(0.0, noise, size=(n_entities, attr_dim))
    attrs[np.arange(n_entities), etype % attr_dim] += 1.0
    unseen = np.zeros(n_entities, bool)
    unseen[rng.choice(n_entities, int(round(held_out_frac * n_entities)), replace=False)] = True
    touch = unseen[t[:, 0]] | unseen[t[:, 2]]
    names = [f"e{i}" for i in range(n_entities)]
    return _graph(names, [f"rel{r}" for r in range(n_relations)], t[~touch], test=t[touch], attributes=attrs)


def unseen_entities(g: KnowledgeGraph) -> np.ndarray:
    """Entities that occur in no training triple."""
    seen = np.zeros(g.n_entities, bool)
    seen[g.split.train[:, 0]] = True
    seen[g.split.train[:, 2]] = True
    return np.flatnonzero(~seen)


def inductive_split(g: KnowledgeGraph, seed: int = 0, support_frac: float = 0.5) -> KnowledgeGraph:
    """Inference graph for unseen entities: some of their test edges become observed context.

    A ``support_frac`` share of the test triples is added to the adjacency
    (never to training), the rest become the query split. The trained
    parameters are reused unchanged; only the neighborhoods seen by the
    encoder grow.
    """
    rng = np.random.default_rng(seed)
    test = g.split.test[rng.permutation(len(g.split.test))]
    cut = int(round(support_frac * len(test)))
    split = DatasetSplit(np.concatenate([g.split.train, test[:cut]]), g.split.valid, test[cut:])
    return build_graph(split, g.entity_vocab, g.relation_vocab, inverse_edges=g.inverse_edges,
                       attributes=g.attributes)


GENERATORS = {
    "tiny": lambda seed=0: tiny_family(),
    "compositional": compositional_kg,
    "context": context_kg,
    "typed": typed_kg,
    "attribute": attribute_kg,
}


def generate(name: str, seed: int = 0) -> KnowledgeGraph:
    try:
        return GENERATORS[name](seed=seed)
    except KeyError:
        raise ValueError(f"unknown synthetic dataset {name!r}; choose from {sorted(GENERATORS)}") from None


def write_dataset(g: KnowledgeGraph, directory: str, split_names=("train", "valid", "test")):
    """Write ``train/valid/test.txt`` plus vocabularies (and attributes, if any)."""
    os.makedirs(directory, exist_ok=True)
    for name in split_names:
        save_triples(os.path.join(directory, f"{name}.txt"), getattr(g.split, name),
                     g.entity_vocab, g.relation_vocab)
    g.entity_vocab.save(os.path.join(directory, "entity2id.txt"))
    g.relation_vocab.save(os.path.join(directory, "relation2id.txt"))
    if g.attributes is not None:
        save_attributes(os.path.join(directory, "attributes.tsv"), g.attributes, g.entity_vocab)
