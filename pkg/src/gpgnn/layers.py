"""Parameterized layers on top of the tensor core: embedding tables, LSTM
cells, the bidirectional sequence encoder, multi-layer perceptrons, and a
named parameter store with a binary checkpoint format.

All weights initialize uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)], which
keeps activations in a range where the finite-difference oracle is sharp.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    activation_fn,
    add,
    add_bias,
    concat,
    dropout,
    gather_rows,
    lstm_cell,
    matmul,
    mul,
    reshape,
    sigmoid,
    slice_cols,
    tanh,
)

CHECKPOINT_VERSION = "gpgnn-ckpt-1"

PAD_ROW = 0
UNK_ROW = 1


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(float(fan_in))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingTable:
    """A (rows, dim) lookup table.

    Vocabulary tables reserve row 0 as padding (frozen zeros) and row 1 as the
    unknown token; marker tables (``reserved=False``) train all rows.
    """

    weights: Tensor
    trainable: bool = True
    reserved: bool = True

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def create(
        cls,
        rows: int,
        dim: int,
        rng: np.random.Generator,
        trainable: bool = True,
        reserved: bool = True,
    ) -> "EmbeddingTable":
        bound = 1.0 / np.sqrt(float(dim))
        w = rng.uniform(-bound, bound, size=(rows, dim))
        if reserved:
            w[PAD_ROW] = 0.0
        return cls(Tensor(w, requires_grad=trainable), trainable=trainable, reserved=reserved)


def embedding_lookup(table: EmbeddingTable, indices) -> Tensor:
    """Gather rows; the backward pass scatters gradient only into the rows
    that were looked up, and never into the frozen padding row."""
    frozen = (PAD_ROW,) if table.reserved else ()
    return gather_rows(table.weights, indices, frozen_rows=frozen)


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmParams:
    """Gate parameters for one LSTM direction.

    Each gate block holds an input-to-gate matrix (d, H), a hidden-to-gate
    matrix (H, H) and a bias (H,).  The forget bias initializes to 1.0 so
    fresh cells start out remembering.
    """

    w_i: Tensor
    u_i: Tensor
    b_i: Tensor
    w_f: Tensor
    u_f: Tensor
    b_f: Tensor
    w_o: Tensor
    u_o: Tensor
    b_o: Tensor
    w_c: Tensor
    u_c: Tensor
    b_c: Tensor

    @property
    def hidden_size(self) -> int:
        return self.b_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_i.shape[0]

    @classmethod
    def create(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "LstmParams":
        def w() -> Tensor:
            return uniform_init(rng, (input_size, hidden_size), input_size)

        def u() -> Tensor:
            return uniform_init(rng, (hidden_size, hidden_size), hidden_size)

        def b(value: float = 0.0) -> Tensor:
            return Tensor(np.full(hidden_size, value), requires_grad=True)

        return cls(
            w_i=w(), u_i=u(), b_i=b(),
            w_f=w(), u_f=u(), b_f=b(1.0),
            w_o=w(), u_o=u(), b_o=b(),
            w_c=w(), u_c=u(), b_c=b(),
        )

    def named(self) -> Iterable[tuple[str, Tensor]]:
        for gate in ("i", "f", "o", "c"):
            yield f"w_{gate}", getattr(self, f"w_{gate}")
            yield f"u_{gate}", getattr(self, f"u_{gate}")
            yield f"b_{gate}", getattr(self, f"b_{gate}")


def _gate(x: Tensor, h: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    z = add(matmul(x, w), matmul(h, u))
    if z.ndim == 1:
        return add(z, b)
    return add_bias(z, b)


def lstm_step(p: LstmParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step with sigmoid gates and tanh candidate/output squashing.

    Accepts a single input vector (d,) with states (H,), or a batch of rows
    (B,d) with states (B,H); all rows step together.
    """
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"lstm_step input width {x.shape} does not match params ({p.input_size})")
    if h.shape != c.shape or h.shape[-1] != p.hidden_size:
        raise ShapeError(f"lstm_step state shapes {h.shape}/{c.shape} do not match H={p.hidden_size}")
    i = sigmoid(_gate(x, h, p.w_i, p.u_i, p.b_i))
    f = sigmoid(_gate(x, h, p.w_f, p.u_f, p.b_f))
    o = sigmoid(_gate(x, h, p.w_o, p.u_o, p.b_o))
    g = tanh(_gate(x, h, p.w_c, p.u_c, p.b_c))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def bilstm_encode(fwd: LstmParams, bwd: LstmParams, seq: Tensor) -> Tensor:
    """Encode an (l, d) sequence into a (2H,) vector: the forward pass's
    final hidden state concatenated with the backward pass's state at
    position 0.  Both passes start from zero states."""
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"bilstm_encode needs a nonempty (l, d) sequence, got {seq.shape}")
    length = seq.shape[0]
    out = bilstm_encode_batch(fwd, bwd, seq, length=length, batch=1)
    return reshape(out, (out.shape[1],))


def bilstm_encode_batch(
    fwd: LstmParams, bwd: LstmParams, rows: Tensor, length: int, batch: int
) -> Tensor:
    """Batched encoder over ``batch`` equal-length sequences stored time-major:
    row t*batch + b is timestep t of sequence b.  Returns (batch, 2H)."""
    if rows.ndim != 2 or rows.shape[0] != length * batch:
        raise ShapeError(f"expected {length * batch} time-major rows, got {rows.shape}")
    h_f = _run_direction(fwd, rows, length, batch, reverse=False)
    h_b = _run_direction(bwd, rows, length, batch, reverse=True)
    return concat([h_f, h_b], axis=1)


def _run_direction(p: LstmParams, rows: Tensor, length: int, batch: int, reverse: bool) -> Tensor:
    # fuse the four gate blocks into one wide matmul per input and one cell
    # op per step; the concats are on the tape, so gradients land back in the
    # per-gate parameter tensors
    hd = p.hidden_size
    w_all = concat([p.w_i, p.w_f, p.w_o, p.w_c], axis=1)
    u_all = concat([p.u_i, p.u_f, p.u_o, p.u_c], axis=1)
    b_all = concat([p.b_i, p.b_f, p.b_o, p.b_c], axis=0)
    h = Tensor(np.zeros((batch, hd)))
    c = Tensor(np.zeros((batch, hd)))
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        x = gather_rows(rows, np.arange(t * batch, (t + 1) * batch))
        z = add_bias(add(matmul(x, w_all), matmul(h, u_all)), b_all)
        packed = lstm_cell(z, c)
        h = slice_cols(packed, 0, hd)
        c = slice_cols(packed, hd, 2 * hd)
    return h


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    """Affine layers with the configured activation between them; the final
    layer emits raw values (logits or generated parameters)."""

    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def create(cls, sizes: Sequence[int], activation: str, rng: np.random.Generator) -> "MlpParams":
        if len(sizes) < 2:
            raise ValueError(f"an MLP needs at least input and output widths, got {sizes}")
        ws, bs = [], []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            # biases share the weight init rule; an exactly-zero bias would
            # park relu pre-activations on the kink for all-zero inputs
            ws.append(uniform_init(rng, (d_in, d_out), d_in))
            bs.append(uniform_init(rng, (d_out,), d_in))
        return cls(ws, bs, activation)

    def named(self) -> Iterable[tuple[str, Tensor]]:
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layer{k}.w", w
            yield f"layer{k}.b", b


def mlp_forward(
    p: MlpParams,
    x: Tensor,
    drop_ratio: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Apply the MLP to a vector (d,) or a batch of rows (B,d).  Dropout, when
    active, hits hidden activations only, never the raw output layer."""
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"mlp_forward input width {x.shape} does not match params ({p.input_size})")
    act = activation_fn(p.activation)
    out = x
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = matmul(out, w)
        out = add(z, b) if z.ndim == 1 else add_bias(z, b)
        if k != last:
            out = act(out)
            out = dropout(out, drop_ratio, rng, training)
    return out


# ---------------------------------------------------------------------------
# parameter store and checkpoints


class ParameterStore:
    """Hierarchically named trainable tensors.  Names are unique, and
    serialization order is always name-sorted, which is what makes
    checkpoints byte-stable."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} does not require grad")
        self._params[name] = tensor
        return tensor

    def register_all(self, prefix: str, named: Iterable[tuple[str, Tensor]]) -> None:
        for name, tensor in named:
            self.register(f"{prefix}.{name}", tensor)

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def named(self) -> list[tuple[str, Tensor]]:
        return sorted(self._params.items())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def save(self, path) -> None:
        save_checkpoint(path, dict(self._params))

    def load(self, path) -> None:
        arrays = load_checkpoint(path)
        missing = sorted(set(self._params) - set(arrays))
        extra = sorted(set(arrays) - set(self._params))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={missing} extra={extra}")
        for name, tensor in self._params.items():
            arr = arrays[name]
            if arr.shape != tensor.shape:
                raise ValueError(f"checkpoint shape for {name!r}: {arr.shape} vs {tensor.shape}")
            tensor.data = arr
            tensor.zero_grad()


def save_checkpoint(path, tensors: dict[str, Tensor]) -> None:
    """Write a name-sorted flat binary of little-endian float64 values behind
    a length-prefixed JSON header mapping name -> shape and byte offset."""
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries[name] = {"shape": list(t.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CHECKPOINT_VERSION, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        data = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        flat = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        arrays[name] = flat.astype(np.float64).reshape(shape)
    return arrays
