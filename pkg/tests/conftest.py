from collections import defaultdict

import numpy as np
import pytest

from gpgnn.corpus import (
    NA_RELATION,
    EntityMention,
    RelationTriple,
    RelationVocab,
    Sentence,
    Vocabulary,
    normalize_sentence,
)
from gpgnn.model import GpGnn, ModelDims
from gpgnn.training import named_rngs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_sentence(sid, tokens, spans, triples, kb_prefix="q"):
    """Hand-build a sentence: spans are (start, end) pairs, triples are
    (subject_idx, object_idx, relation) tuples."""
    entities = [EntityMention(s, e, kb_id=f"{kb_prefix}{k}") for k, (s, e) in enumerate(spans)]
    return Sentence(
        sid,
        list(tokens),
        entities,
        [RelationTriple(s, o, r) for s, o, r in triples],
    )


TOY_RELATIONS = RelationVocab(
    ["NA", "likes", "liked_by", "sees"],
    inverse={"likes": "liked_by", "liked_by": "likes"},
)


def two_entity_sentence():
    s = make_sentence(
        "toy-2",
        ["anna", "likes", "bob", "today"],
        [(0, 1), (2, 3)],
        [(0, 1, "likes")],
    )
    return normalize_sentence(s, TOY_RELATIONS)


def three_entity_sentence():
    s = make_sentence(
        "toy-3",
        ["anna", "likes", "bob", "and", "sees", "carol"],
        [(0, 1), (2, 3), (5, 6)],
        [(0, 1, "likes"), (0, 2, "sees")],
    )
    return normalize_sentence(s, TOY_RELATIONS)


def tiny_dims(layers=2, d_n=4, activation="relu", tied=False, dropout=0.0):
    return ModelDims(
        d_n=d_n,
        layers=layers,
        hidden_size=6,
        activation=activation,
        dropout=dropout,
        tied=tied,
        word_dim=5,
        position_dim=2,
    )


def tiny_model(sentences, relations=TOY_RELATIONS, seed=5, **dims_kw):
    vocab = Vocabulary.build(sentences)
    return GpGnn(tiny_dims(**dims_kw), vocab, relations, named_rngs(seed)["init"])


RANDOM_RELATIONS = RelationVocab(
    ["NA", "r_a", "r_a_inv", "r_b", "r_b_inv", "r_c"],
    inverse={"r_a": "r_a_inv", "r_a_inv": "r_a", "r_b": "r_b_inv", "r_b_inv": "r_b"},
)


def random_raw_sentence(rng: np.random.Generator, sid: str) -> Sentence:
    """Unnormalized sentences with duplicate spans, occasional overlaps,
    self-loops, duplicate pair labels, and entity counts from 0 to 11."""
    n_tokens = int(rng.integers(4, 28))
    tokens = [f"w{int(rng.integers(0, 30))}" for _ in range(n_tokens)]
    m_raw = int(rng.integers(0, 12))
    starts = rng.permutation(n_tokens)[:m_raw]
    entities = []
    for k, start in enumerate(starts):
        if entities and rng.random() < 0.12:
            prev = entities[int(rng.integers(len(entities)))]
            entities.append(EntityMention(prev.start, prev.end, kb_id=f"dup{k}"))
        elif rng.random() < 0.06:
            start = int(rng.integers(0, n_tokens - 1))
            entities.append(EntityMention(start, start + 2, kb_id=f"wide{k}"))
        else:
            entities.append(EntityMention(int(start), int(start) + 1, kb_id=f"e{k}"))
    names = RANDOM_RELATIONS.names[1:]
    triples = []
    if entities:
        for _ in range(int(rng.integers(0, 8))):
            s = int(rng.integers(len(entities)))
            o = int(rng.integers(len(entities)))
            triples.append(RelationTriple(s, o, names[int(rng.integers(len(names)))]))
    return Sentence(sid, tokens, entities, triples)


def dense_oracle(s: Sentence) -> bool:
    """Independent undirected-cycle search: DFS flagging any non-parent
    revisit within a component."""
    if s.entity_count <= 2:
        return False
    adj = defaultdict(set)
    for t in s.triples:
        if t.relation != NA_RELATION:
            adj[t.subject_idx].add(t.object_idx)
            adj[t.object_idx].add(t.subject_idx)
    visited = set()
    for root in range(s.entity_count):
        if root in visited:
            continue
        stack = [(root, -1)]
        seen_here = {root}
        while stack:
            node, parent = stack.pop()
            visited.add(node)
            for nxt in adj[node]:
                if nxt == parent:
                    continue
                if nxt in seen_here:
                    return True
                seen_here.add(nxt)
                stack.append((nxt, node))
    return False
