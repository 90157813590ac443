"""The GP-GNN model: a fully-connected graph over a sentence's entities,
per-edge transition matrices generated from the marked token sequence, a
flag-initialized propagation stack, and a pairwise relation classifier.

Per-pair semantics are the contract: transition matrices are computed once
per sentence per layer and shared across target pairs, while propagation is
re-run per target pair because the layer-0 flag states depend on which pair
is queried.  Internally both the edge encoder and the propagation run as
batched row operations; tests pin them against naive per-message loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    activation_fn,
    bmm,
    concat,
    dropout,
    gather_rows,
    mul,
    no_grad,
    reduce_sum,
    reshape,
    softmax,
    softmax_cross_entropy_rows,
    tile_rows,
)
from .corpus import (
    NA_RELATION,
    CorpusError,
    MAX_ENTITIES,
    RelationVocab,
    Sentence,
    SkipSentence,
    Vocabulary,
)
from .layers import (
    EmbeddingTable,
    LstmParams,
    MlpParams,
    ParameterStore,
    bilstm_encode_batch,
    embedding_lookup,
    mlp_forward,
)

MARKER_NEITHER = 0
MARKER_FIRST = 1
MARKER_SECOND = 2


class ConfigError(ValueError):
    """A model hyperparameter violates its constraints."""


# ---------------------------------------------------------------------------
# graph over entities


@dataclass
class EntityGraph:
    sentence: Sentence
    m: int
    edges: list[tuple[int, int]]  # all ordered pairs (i, j), i != j, lexicographic

    def edge_row(self, i: int, j: int) -> int:
        # edges are grouped by target i, then source j ascending with i skipped
        return i * (self.m - 1) + (j if j < i else j - 1)


def build_entity_graph(sentence: Sentence) -> EntityGraph:
    """Enumerate all ordered non-self entity pairs in deterministic
    lexicographic order.  Fewer than 2 entities is a skip signal."""
    m = sentence.entity_count
    if m < 2:
        raise SkipSentence("too_few_entities")
    if m > MAX_ENTITIES:
        raise CorpusError(f"sentence {sentence.id}: {m} entities; normalization should have capped at {MAX_ENTITIES}")
    edges = [(i, j) for i in range(m) for j in range(m) if j != i]
    return EntityGraph(sentence, m, edges)


def edge_markers(sentence: Sentence, edge: tuple[int, int]) -> np.ndarray:
    """Token markers for one ordered pair: 1 inside the first entity's span,
    2 inside the second entity's span, 0 elsewhere."""
    i, j = edge
    marks = np.zeros(len(sentence.tokens), dtype=np.intp)
    for t in sentence.entities[i].span():
        marks[t] = MARKER_FIRST
    for t in sentence.entities[j].span():
        if marks[t] != MARKER_NEITHER:
            raise CorpusError(f"sentence {sentence.id}: entity spans overlap; normalize upstream")
        marks[t] = MARKER_SECOND
    return marks


def encode_edge_context(
    sentence: Sentence,
    edge: tuple[int, int],
    word_table: EmbeddingTable,
    pos_table: EmbeddingTable,
    vocab: Vocabulary,
) -> Tensor:
    """Per-token rows [word embedding ; marker embedding] for one edge."""
    if pos_table.rows != 3:
        raise ConfigError(f"marker table must have exactly 3 rows, got {pos_table.rows}")
    ids = vocab.encode(sentence.tokens)
    marks = edge_markers(sentence, edge)
    word = embedding_lookup(word_table, ids)
    pos = embedding_lookup(pos_table, marks)
    return concat([word, pos], axis=1)


# ---------------------------------------------------------------------------
# generated transition matrices


@dataclass
class EdgeEncoder:
    """One layer's text encoder: BiLSTM over the marked sequence, then an MLP
    whose output reshapes to a d_n x d_n matrix."""

    lstm_fwd: LstmParams
    lstm_bwd: LstmParams
    mlp: MlpParams

    @classmethod
    def create(
        cls, input_dim: int, hidden_size: int, d_n: int, activation: str, rng: np.random.Generator
    ) -> "EdgeEncoder":
        return cls(
            lstm_fwd=LstmParams.create(input_dim, hidden_size, rng),
            lstm_bwd=LstmParams.create(input_dim, hidden_size, rng),
            mlp=MlpParams.create([2 * hidden_size, hidden_size, d_n * d_n], activation, rng),
        )

    def named(self) -> Iterable[tuple[str, Tensor]]:
        for name, t in self.lstm_fwd.named():
            yield f"lstm_fwd.{name}", t
        for name, t in self.lstm_bwd.named():
            yield f"lstm_bwd.{name}", t
        for name, t in self.mlp.named():
            yield f"mlp.{name}", t


class TransitionMatrices:
    """Per-layer, per-ordered-edge d_n x d_n matrices, stored stacked as one
    (E, d_n, d_n) tensor per layer in edge order."""

    def __init__(self, graph: EntityGraph, stacks: list[Tensor], d_n: int):
        self.graph = graph
        self.stacks = stacks
        self.d_n = d_n

    @property
    def layers(self) -> int:
        return len(self.stacks)

    def layer(self, n: int) -> Tensor:
        return self.stacks[n]

    def matrix(self, n: int, i: int, j: int) -> Tensor:
        row = self.graph.edge_row(i, j)
        return reshape(gather_rows(self.stacks[n], [row]), (self.d_n, self.d_n))


def sentence_statics(sentence: Sentence, graph: EntityGraph, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Static per-sentence encoder inputs: token ids repeated per edge and
    the per-edge marker rows, both (E, l)."""
    ids = np.asarray(vocab.encode(sentence.tokens), dtype=np.intp)
    word_rows = np.tile(ids, (len(graph.edges), 1))
    marker_rows = np.stack([edge_markers(sentence, e) for e in graph.edges])
    return word_rows, marker_rows


def generate_transition_matrices(
    graph: EntityGraph,
    encoders: Sequence[EdgeEncoder],
    word_table: EmbeddingTable,
    pos_table: EmbeddingTable,
    vocab: Vocabulary,
    d_n: int,
    layers: int,
    tied: bool = False,
    drop_ratio: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> TransitionMatrices:
    """Encode every edge context once per layer.  With tied adjacency the
    single encoder runs once and every layer shares its matrices."""
    word_rows, marker_rows = sentence_statics(graph.sentence, graph, vocab)
    n_distinct = 1 if tied else layers
    if len(encoders) != n_distinct:
        raise ConfigError(f"expected {n_distinct} edge encoders, got {len(encoders)}")
    stacks: list[Tensor] = []
    for n in range(n_distinct):
        flat = encode_edge_rows(
            encoders[n], word_table, pos_table, word_rows, marker_rows, d_n,
            drop_ratio=drop_ratio, rng=rng, training=training,
        )
        stacks.append(reshape(flat, (len(graph.edges), d_n, d_n)))
    if tied:
        stacks = stacks * layers
    return TransitionMatrices(graph, stacks, d_n)


def encode_edge_rows(
    encoder: EdgeEncoder,
    word_table: EmbeddingTable,
    pos_table: EmbeddingTable,
    word_rows: np.ndarray,
    marker_rows: np.ndarray,
    d_n: int,
    drop_ratio: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Run a batch of equal-length contexts through one encoder.  Inputs are
    (N, l) arrays of token ids and marker ids; returns (N, d_n*d_n) rows in
    context order."""
    if pos_table.rows != 3:
        raise ConfigError(f"marker table must have exactly 3 rows, got {pos_table.rows}")
    if encoder.mlp.output_size != d_n * d_n:
        raise ConfigError(
            f"encoder MLP emits {encoder.mlp.output_size} values, need d_n^2 = {d_n * d_n}"
        )
    if word_rows.shape != marker_rows.shape or word_rows.ndim != 2:
        raise ShapeError(f"context id arrays disagree: {word_rows.shape} vs {marker_rows.shape}")
    n, length = word_rows.shape
    # time-major layout: row t*n + k is timestep t of context k
    word = embedding_lookup(word_table, word_rows.T.reshape(-1))
    pos = embedding_lookup(pos_table, marker_rows.T.reshape(-1))
    rows = concat([word, pos], axis=1)
    encoded = bilstm_encode_batch(encoder.lstm_fwd, encoder.lstm_bwd, rows, length=length, batch=n)
    encoded = dropout(encoded, drop_ratio, rng, training)
    return mlp_forward(encoder.mlp, encoded, drop_ratio=drop_ratio, rng=rng, training=training)


# ---------------------------------------------------------------------------
# propagation


@dataclass
class NodeStates:
    """Per-target-pair node representations, one (m, d_n) tensor per layer
    0..K.  Layer 0 carries the subject/object flag vectors."""

    layers: list[Tensor]
    target: tuple[int, int]

    def vec(self, n: int, i: int) -> Tensor:
        layer = self.layers[n]
        return reshape(gather_rows(layer, [i]), (layer.shape[1],))


def flag_vectors(d_n: int) -> tuple[np.ndarray, np.ndarray]:
    if d_n < 2 or d_n % 2 != 0:
        raise ConfigError(f"node-state width must be a positive even integer, got {d_n}")
    subject = np.concatenate([np.ones(d_n // 2), np.zeros(d_n // 2)])
    return subject, subject[::-1].copy()


def initialize_node_states(graph: EntityGraph, target: tuple[int, int], d_n: int) -> NodeStates:
    """Layer-0 states: ones-then-zeros for the subject, the mirror for the
    object, all-zero for every other node."""
    s, o = target
    if s == o:
        raise ConfigError(f"target pair must be two distinct entities, got {target}")
    subject, objekt = flag_vectors(d_n)
    h0 = np.zeros((graph.m, d_n))
    h0[s] = subject
    h0[o] = objekt
    return NodeStates(layers=[Tensor(h0)], target=target)


def propagate_layer(
    states: Tensor, matrices: Tensor, edges: Sequence[tuple[int, int]], activation: str
) -> Tensor:
    """One message-passing step: h'_i = sum over j != i of act(A[i,j] @ h_j),
    with the activation applied per message before summation."""
    m = states.shape[0]
    if matrices.ndim != 3 or matrices.shape[0] != len(edges):
        raise ShapeError(f"expected ({len(edges)}, d, d) matrices, got {matrices.shape}")
    return _propagate_grouped(states, matrices, edges, m=m, groups=1, activation=activation)


def _edge_sources(edges: Sequence[tuple[int, int]]) -> np.ndarray:
    return np.fromiter((j for _i, j in edges), dtype=np.intp, count=len(edges))


def _propagate_grouped(
    states: Tensor,
    matrices: Tensor,
    edges: Sequence[tuple[int, int]],
    m: int,
    groups: int,
    activation: str,
    src_base: np.ndarray | None = None,
) -> Tensor:
    """Propagate ``groups`` independent state blocks of m nodes each, stored
    stacked as (groups*m, d_n), against one shared (E, d_n, d_n) stack."""
    act = activation_fn(activation)
    d = states.shape[1]
    e = len(edges)
    if src_base is None:
        src_base = _edge_sources(edges)
    src = (np.arange(groups, dtype=np.intp)[:, None] * m + src_base[None, :]).reshape(-1)
    gathered = reshape(gather_rows(states, src), (groups * e, d, 1))
    stack = tile_rows(matrices, groups) if groups > 1 else matrices
    messages = act(bmm(stack, gathered))
    # edges are grouped by target node, m-1 consecutive rows per target
    grouped = reshape(messages, (groups * m, m - 1, d))
    return reduce_sum(grouped, axis=1)


def run_propagation(
    graph: EntityGraph,
    matrices: TransitionMatrices,
    target: tuple[int, int],
    d_n: int,
    layers: int,
    activation: str,
) -> NodeStates:
    states = initialize_node_states(graph, target, d_n)
    for n in range(layers):
        states.layers.append(
            propagate_layer(states.layers[n], matrices.layer(n), graph.edges, activation)
        )
    return states


# ---------------------------------------------------------------------------
# classification


def pair_representation(states: NodeStates, target: tuple[int, int], layers: int) -> Tensor:
    """Concatenation over layers 1..K of the subject/object elementwise
    product; the layer-0 flags never enter the representation."""
    if len(states.layers) < layers + 1:
        raise ShapeError(f"need states for layers 0..{layers}, have {len(states.layers)}")
    s, o = target
    blocks = [mul(states.vec(k, s), states.vec(k, o)) for k in range(1, layers + 1)]
    return concat(blocks, axis=0)


def classify_pair(rep: Tensor, head: MlpParams, relations: RelationVocab) -> Tensor:
    """Probability distribution over all relations (NA included)."""
    if head.output_size != len(relations):
        raise ShapeError(f"classifier emits {head.output_size} logits for {len(relations)} relations")
    return softmax(mlp_forward(head, rep))


# ---------------------------------------------------------------------------
# the assembled model


@dataclass(frozen=True)
class ModelDims:
    d_n: int
    layers: int
    hidden_size: int
    activation: str
    dropout: float
    tied: bool
    word_dim: int
    position_dim: int

    def validate(self) -> None:
        if self.d_n < 2 or self.d_n % 2 != 0:
            raise ConfigError(f"node-state width must be a positive even integer, got {self.d_n}")
        if self.layers < 1:
            raise ConfigError(f"need at least one propagation layer, got {self.layers}")
        activation_fn(self.activation)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


class GpGnn:
    """Word/marker tables, per-layer edge encoders (or one shared encoder in
    tied mode), and the classification head, all registered in a store."""

    def __init__(
        self,
        dims: ModelDims,
        vocab: Vocabulary,
        relations: RelationVocab,
        rng: np.random.Generator,
        word_table: EmbeddingTable | None = None,
    ):
        dims.validate()
        self.dims = dims
        self.vocab = vocab
        self.relations = relations
        if word_table is None:
            word_table = EmbeddingTable.create(len(vocab), dims.word_dim, rng)
        elif word_table.dim != dims.word_dim:
            raise ConfigError(f"word table width {word_table.dim} != configured {dims.word_dim}")
        self.word_table = word_table
        self.pos_table = EmbeddingTable.create(3, dims.position_dim, rng, reserved=False)
        input_dim = dims.word_dim + dims.position_dim
        n_encoders = 1 if dims.tied else dims.layers
        self.encoders = [
            EdgeEncoder.create(input_dim, dims.hidden_size, dims.d_n, dims.activation, rng)
            for _ in range(n_encoders)
        ]
        self.head = MlpParams.create(
            [dims.layers * dims.d_n, dims.hidden_size, len(relations)], dims.activation, rng
        )
        self.store = ParameterStore()
        if self.word_table.trainable:
            self.store.register("word_embedding.weights", self.word_table.weights)
        self.store.register("position_embedding.weights", self.pos_table.weights)
        for n, enc in enumerate(self.encoders):
            prefix = "encoder.shared" if dims.tied else f"encoder.layer{n}"
            self.store.register_all(prefix, enc.named())
        self.store.register_all("head", self.head.named())

    # -- forward paths ------------------------------------------------------

    def transition_matrices(
        self, graph: EntityGraph, training: bool = False, rng: np.random.Generator | None = None
    ) -> TransitionMatrices:
        return generate_transition_matrices(
            graph,
            self.encoders,
            self.word_table,
            self.pos_table,
            self.vocab,
            self.dims.d_n,
            self.dims.layers,
            tied=self.dims.tied,
            drop_ratio=self.dims.dropout,
            rng=rng,
            training=training,
        )

    def pair_logits(
        self,
        graph: EntityGraph,
        matrices: TransitionMatrices,
        pairs: Sequence[tuple[int, int]],
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Logits for a batch of target pairs of one sentence, sharing the
        sentence's transition matrices.  Row p corresponds to pairs[p]."""
        m, d, k_layers = graph.m, self.dims.d_n, self.dims.layers
        p = len(pairs)
        subject, objekt = flag_vectors(d)
        s_arr = np.fromiter((s for s, _o in pairs), dtype=np.intp, count=p)
        o_arr = np.fromiter((o for _s, o in pairs), dtype=np.intp, count=p)
        if np.any(s_arr == o_arr):
            raise ConfigError("target pair must be two distinct entities")
        base = np.arange(p, dtype=np.intp) * m
        subj_rows = base + s_arr
        obj_rows = base + o_arr
        h0 = np.zeros((p * m, d))
        h0[subj_rows] = subject
        h0[obj_rows] = objekt
        states = Tensor(h0)
        src_base = _edge_sources(graph.edges)
        per_layer: list[Tensor] = []
        for n in range(k_layers):
            states = _propagate_grouped(
                states, matrices.layer(n), graph.edges, m=m, groups=p,
                activation=self.dims.activation, src_base=src_base,
            )
            per_layer.append(states)
        blocks = [
            mul(gather_rows(layer, subj_rows), gather_rows(layer, obj_rows)) for layer in per_layer
        ]
        rep = concat(blocks, axis=1)
        return mlp_forward(self.head, rep, drop_ratio=self.dims.dropout, rng=rng, training=training)


def sentence_loss(
    model: GpGnn,
    sentence: Sentence,
    training: bool = False,
    rng: np.random.Generator | None = None,
    na_weight: float = 1.0,
) -> Tensor:
    """Sum of the per-pair cross entropies over all ordered entity pairs of
    one sentence.  Every pair needs a gold label (NA counts)."""
    graph = build_entity_graph(sentence)
    matrices = model.transition_matrices(graph, training=training, rng=rng)
    return _loss_from_matrices(model, graph, matrices, training=training, rng=rng, na_weight=na_weight)


def _loss_from_matrices(
    model: GpGnn,
    graph: EntityGraph,
    matrices: TransitionMatrices,
    training: bool,
    rng: np.random.Generator | None,
    na_weight: float,
    cache: SentenceCache | None = None,
) -> Tensor:
    if cache is not None:
        targets = cache.targets(model.relations, graph)
    else:
        targets = _gold_indices(model.relations, graph)
    logits = model.pair_logits(graph, matrices, graph.edges, training=training, rng=rng)
    losses = softmax_cross_entropy_rows(logits, targets)
    if na_weight != 1.0:
        if not 0.0 < na_weight <= 1.0:
            raise ConfigError(f"na_weight must be in (0, 1], got {na_weight}")
        weights = np.where(targets == 0, na_weight, 1.0)
        losses = mul(losses, Tensor(weights))
    return reduce_sum(losses)


def _gold_indices(relations: RelationVocab, graph: EntityGraph) -> np.ndarray:
    labels = graph.sentence.label_map()
    targets = np.empty(len(graph.edges), dtype=np.intp)
    for k, pair in enumerate(graph.edges):
        try:
            name = labels[pair]
        except KeyError:
            raise CorpusError(
                f"sentence {graph.sentence.id}: no gold label for pair {pair}; normalize first"
            ) from None
        targets[k] = relations.index(name)
    return targets


class SentenceCache:
    """Per-run cache of static per-sentence arrays (graphs, encoder input
    ids, gold class indices).  Keyed by sentence identity, so the caller must
    keep the sentences alive for the cache's lifetime; one training or
    evaluation run over a fixed dataset does."""

    def __init__(self) -> None:
        self._graphs: dict[int, EntityGraph] = {}
        self._inputs: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._targets: dict[int, np.ndarray] = {}

    def graph(self, sentence: Sentence) -> EntityGraph:
        got = self._graphs.get(id(sentence))
        if got is None:
            got = self._graphs[id(sentence)] = build_entity_graph(sentence)
        return got

    def encoder_inputs(self, sentence: Sentence, graph: EntityGraph, vocab: Vocabulary):
        got = self._inputs.get(id(sentence))
        if got is None:
            got = self._inputs[id(sentence)] = sentence_statics(sentence, graph, vocab)
        return got

    def targets(self, relations: RelationVocab, graph: EntityGraph) -> np.ndarray:
        got = self._targets.get(id(graph.sentence))
        if got is None:
            got = self._targets[id(graph.sentence)] = _gold_indices(relations, graph)
        return got


def _grouped_matrices(
    model: GpGnn,
    sentences: Sequence[Sentence],
    graphs: Sequence[EntityGraph],
    training: bool,
    rng: np.random.Generator | None,
    cache: SentenceCache,
) -> dict[int, TransitionMatrices]:
    """Transition matrices per sentence, with equal-token-length sentences
    sharing one encoder run per layer (an internal batching; the values match
    the per-sentence path)."""
    by_length: dict[int, list[int]] = {}
    for idx, s in enumerate(sentences):
        by_length.setdefault(len(s.tokens), []).append(idx)

    matrices: dict[int, TransitionMatrices] = {}
    d = model.dims.d_n
    for length in sorted(by_length):
        group = by_length[length]
        words, marks, offsets = [], [], []
        total = 0
        for idx in group:
            offsets.append(total)
            w, mk = cache.encoder_inputs(sentences[idx], graphs[idx], model.vocab)
            words.append(w)
            marks.append(mk)
            total += w.shape[0]
        word_rows = np.concatenate(words, axis=0)
        marker_rows = np.concatenate(marks, axis=0)
        n_distinct = 1 if model.dims.tied else model.dims.layers
        flat_layers = [
            encode_edge_rows(
                model.encoders[n], model.word_table, model.pos_table, word_rows, marker_rows, d,
                drop_ratio=model.dims.dropout, rng=rng, training=training,
            )
            for n in range(n_distinct)
        ]
        for idx, off in zip(group, offsets):
            n_edges = len(graphs[idx].edges)
            stacks = [
                reshape(gather_rows(flat, np.arange(off, off + n_edges)), (n_edges, d, d))
                for flat in flat_layers
            ]
            if model.dims.tied:
                stacks = stacks * model.dims.layers
            matrices[idx] = TransitionMatrices(graphs[idx], stacks, d)
    return matrices


def batch_losses(
    model: GpGnn,
    sentences: Sequence[Sentence],
    training: bool = False,
    rng: np.random.Generator | None = None,
    na_weight: float = 1.0,
    cache: SentenceCache | None = None,
) -> list[Tensor]:
    """Per-sentence loss scalars over a batch of sentences."""
    cache = cache if cache is not None else SentenceCache()
    graphs = [cache.graph(s) for s in sentences]
    matrices = _grouped_matrices(model, sentences, graphs, training, rng, cache)
    return [
        _loss_from_matrices(
            model, graphs[idx], matrices[idx], training=training, rng=rng,
            na_weight=na_weight, cache=cache,
        )
        for idx in range(len(sentences))
    ]


def predict_pairs(
    model: GpGnn, sentences: Sequence[Sentence], cache: SentenceCache | None = None
) -> list[dict]:
    """Evaluation-mode probabilities for every ordered pair of every
    sentence.  Returns one dict per pair with the sentence id, entity
    indices/kb ids, the probability vector, and the gold relation."""
    results: list[dict] = []
    cache = cache if cache is not None else SentenceCache()
    with no_grad():
        graphs = [cache.graph(s) for s in sentences]
        matrices = _grouped_matrices(model, sentences, graphs, training=False, rng=None, cache=cache)
        for idx, sentence in enumerate(sentences):
            graph = graphs[idx]
            logits = model.pair_logits(graph, matrices[idx], graph.edges)
            z = logits.data
            shifted = z - z.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            probs = e / e.sum(axis=1, keepdims=True)
            labels = sentence.label_map()
            for k, (s, o) in enumerate(graph.edges):
                results.append(
                    {
                        "sentence_id": sentence.id,
                        "subject_idx": s,
                        "object_idx": o,
                        "subject_kb": sentence.entities[s].kb_id,
                        "object_kb": sentence.entities[o].kb_id,
                        "probs": probs[k].copy(),
                        "gold": labels.get((s, o), NA_RELATION),
                    }
                )
    return results
