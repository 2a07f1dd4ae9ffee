"""Brute-force references for the ranking and AUC metrics."""

import numpy as np

from kgnn.evaluation import Model
from kgnn.kgstore import DatasetSplit, build_graph
from kgnn.params import ModelSpec, ParameterStore
from kgnn.sampler import SamplerConfig

DECODERS = ("TransE", "TransH", "TransR", "DistMult")


def brute_rank(model, triple, side, filtered):
    """1 + number of (unfiltered) candidates with strictly lower energy."""
    h, r, t = (int(x) for x in triple)
    g = model.g
    known = set(map(tuple, np.concatenate([g.split.train, g.split.valid, g.split.test]).tolist()))
    cands = [(e, r, t) if side == "head" else (h, r, e) for e in range(g.n_entities)]
    energy = model.energy(np.array(cands))
    true = energy[h if side == "head" else t]
    rank = 1
    for cand, en in zip(cands, energy):
        if cand == (h, r, t):
            continue
        if filtered and cand in known:
            continue
        if en < true:
            rank += 1
    return rank


def pairwise_auc(pos, neg):
    """Fraction of (positive, negative) pairs ordered correctly; ties count 1/2."""
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p < n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def random_instance(seed):
    """A random graph of at most 200 entities with a random model over it."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 201))
    r = int(rng.integers(1, 6))
    m = int(rng.integers(n, 3 * n))
    t = np.unique(np.stack([rng.integers(0, n, m), rng.integers(0, r, m), rng.integers(0, n, m)], 1), axis=0)
    rng.shuffle(t)
    k = max(1, len(t) // 5)
    g = build_graph(DatasetSplit(t[k:], test=t[:k]), n_entities=n, n_relations=r)
    decoder = DECODERS[seed % 4]
    gnn = seed % 5 == 0
    spec = ModelSpec(n, r, dim=int(rng.integers(2, 9)), encoder="gnn" if gnn else "lookup", decoder=decoder,
                     hops=1, attention_hidden=3, norm="L1" if seed % 3 == 0 else "L2")
    store = ParameterStore.initialize(spec, seed)
    return Model(spec, store, g, SamplerConfig.for_hops(1, fanout=(3,)))
