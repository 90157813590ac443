"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation records its inputs and a backward
rule on its output tensor, so each forward pass lays down a fresh tape and no
state survives between passes.  ``backward`` linearizes the operations
reachable from a scalar loss into topological order and walks that tape in
reverse.  Gradients accumulate additively, so a tensor used n times receives
the sum of its n contributions.

Everything is float64 on purpose: the models built on top are desk-scale, and
exact arithmetic is what makes the central-difference oracle in ``grad_check``
decisive rather than suggestive.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "matmul",
    "bmm",
    "add",
    "add_bias",
    "mul",
    "scale",
    "relu",
    "tanh",
    "sigmoid",
    "concat",
    "reshape",
    "gather_rows",
    "tile_rows",
    "slice_cols",
    "reduce_sum",
    "dropout",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_rows",
    "elementwise",
    "activation_fn",
    "backward",
    "grad_check",
    "grad_check_params",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Op:
    """One tape record: input tensors and the rule mapping the output
    gradient to per-input gradients (None for inputs that take none)."""

    __slots__ = ("inputs", "rule")

    def __init__(self, inputs: tuple["Tensor", ...], rule: Callable):
        self.inputs = inputs
        self.rule = rule


class Tensor:
    """A dense float64 array plus the bookkeeping ``backward`` needs.

    ``grad`` starts as None and accumulates across backward calls; optimizer
    steps are expected to clear it.  Tensors and the graphs hanging off them
    are confined to a single worker; independent workers build independent
    graphs.
    """

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad: bool = False, op: Op | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    needs = _recording() and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=needs, op=Op(inputs, rule) if needs else None)


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  2-d x 2-d is the (m,k)x(k,n)->(m,n) contract; a 1-d
    operand is treated as a row (left) or column (right) vector and the unit
    axis is squeezed from the result."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul needs 1-d or 2-d operands, got {a.shape} x {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]
    out2 = a2 @ b2
    out_shape = _matmul_out_shape(a.shape, b.shape)

    def rule(g: np.ndarray):
        g2 = g.reshape(out2.shape)
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _result(out2.reshape(out_shape), (a, b), rule)


def _matmul_out_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    if len(sa) == 2 and len(sb) == 2:
        return (sa[0], sb[1])
    if len(sa) == 1 and len(sb) == 2:
        return (sb[1],)
    if len(sa) == 2 and len(sb) == 1:
        return (sa[0],)
    return ()


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (B,m,k) x (B,k,n) -> (B,m,n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g: np.ndarray):
        return g @ bd.swapaxes(1, 2), ad.swapaxes(1, 2) @ g

    return _result(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-C vector to every row of an (R,C) matrix."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_bias shapes disagree: {m.shape} + {v.shape}")
    return _result(m.data + v.data, (m, v), lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # exp of -|x| only, so no branch exponentiates a large positive number
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_values(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def activation_fn(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# shape manipulation


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    nd = parts[0].ndim
    if axis < 0 or axis >= nd:
        raise ShapeError(f"concat axis {axis} out of range for {nd}-d tensors")
    base = list(parts[0].shape)
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        other = list(p.shape)
        if other[:axis] + other[axis + 1 :] != base[:axis] + base[axis + 1 :]:
            raise ShapeError(f"concat shapes disagree off axis {axis}: {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def rule(g: np.ndarray):
        grads = []
        start = 0
        for n in sizes:
            sl = [slice(None)] * nd
            sl[axis] = slice(start, start + n)
            grads.append(g[tuple(sl)])
            start += n
        return tuple(grads)

    return _result(out, tuple(parts), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape {x.shape} ({x.size} elements) to {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def gather_rows(x: Tensor, indices, frozen_rows: Sequence[int] = ()) -> Tensor:
    """Select rows along axis 0.  The backward pass scatter-adds, so repeated
    indices accumulate; rows listed in ``frozen_rows`` get their gradient
    zeroed (used for padding rows that must never train)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows indices must be 1-d, got shape {idx.shape}")
    rows = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = int(idx[(idx < 0) | (idx >= rows)][0])
        raise IndexError(f"row index {bad} out of range for {rows} rows")
    frozen = tuple(frozen_rows)

    def rule(g: np.ndarray):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        for r in frozen:
            gx[r] = 0.0
        return (gx,)

    return _result(x.data[idx], (x,), rule)


def tile_rows(x: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of x along a new leading dimension, flattened
    into axis 0: (n, ...) -> (reps*n, ...)."""
    if reps < 1:
        raise ShapeError(f"tile_rows reps must be >= 1, got {reps}")
    out = np.tile(x.data, (reps,) + (1,) * (x.ndim - 1))

    def rule(g: np.ndarray):
        return (g.reshape((reps,) + x.shape).sum(axis=0),)

    return _result(out, (x,), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] on shape {x.shape}")

    def rule(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop].copy(), (x,), rule)


def lstm_cell(z: Tensor, c_prev: Tensor) -> Tensor:
    """One LSTM cell update from fused pre-activations.

    ``z`` is (B, 4H) laid out as the input, forget, output, and candidate
    gate blocks; returns (B, 2H) packed as [h' ; c'].  One tape record covers
    the whole gate arithmetic, with the standard hand-derived backward.
    """
    if z.ndim != 2 or z.shape[1] % 4 != 0:
        raise ShapeError(f"lstm_cell needs (B, 4H) pre-activations, got {z.shape}")
    hd = z.shape[1] // 4
    if c_prev.shape != (z.shape[0], hd):
        raise ShapeError(f"lstm_cell cell state {c_prev.shape} does not match H={hd}")
    zd = z.data
    i = _sigmoid_values(zd[:, :hd])
    f = _sigmoid_values(zd[:, hd : 2 * hd])
    o = _sigmoid_values(zd[:, 2 * hd : 3 * hd])
    g = np.tanh(zd[:, 3 * hd :])
    cp = c_prev.data
    c = f * cp + i * g
    tc = np.tanh(c)
    out = np.concatenate([o * tc, c], axis=1)

    def rule(gy: np.ndarray):
        gh = gy[:, :hd]
        gc = gy[:, hd:] + gh * o * (1.0 - tc * tc)
        gz = np.concatenate(
            [
                gc * g * i * (1.0 - i),
                gc * cp * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                gc * i * (1.0 - g * g),
            ],
            axis=1,
        )
        return gz, gc * f

    return _result(out, (z, c_prev), rule)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = x.data.sum()
        return _result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    if not (0 <= axis < x.ndim):
        raise ShapeError(f"reduce_sum axis {axis} out of range for shape {x.shape}")
    out = x.data.sum(axis=axis)

    def rule(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(out, (x,), rule)


def dropout(x: Tensor, ratio: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted-mask dropout: active only in training mode, identity otherwise."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not training or ratio == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= ratio) / (1.0 - ratio)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# softmax and losses


def _softmax_values(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_values(x.data, axis)

    def rule(g: np.ndarray):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (x,), rule)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-d logit vector, computed with
    max subtraction; backward is softmax(logits) - onehot(target)."""
    if logits.ndim != 1 or logits.size < 1:
        raise ShapeError(f"softmax_cross_entropy needs a 1-d logit vector, got {logits.shape}")
    c = logits.shape[0]
    target = int(target)
    if not 0 <= target < c:
        raise ValueError(f"target {target} out of range for {c} classes")
    z = logits.data
    m = z.max()
    shifted = z - m
    lse = m + np.log(np.exp(shifted).sum())
    loss = lse - z[target]
    probs = _softmax_values(z, axis=-1)

    def rule(g: np.ndarray):
        gz = probs.copy()
        gz[target] -= 1.0
        return (gz * g,)

    return _result(np.float64(loss), (logits,), rule)


def softmax_cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row cross entropy: (B,C) logits and B integer targets -> (B,) losses."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy_rows needs (B,C) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.intp)
    b, c = logits.shape
    if t.shape != (b,):
        raise ShapeError(f"targets shape {t.shape} does not match {b} rows")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"target out of range for {c} classes")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))).reshape(-1)
    losses = lse - z[np.arange(b), t]
    probs = _softmax_values(z, axis=1)

    def rule(g: np.ndarray):
        gz = probs.copy()
        gz[np.arange(b), t] -= 1.0
        return (gz * g[:, None],)

    return _result(losses, (logits,), rule)


_ELEMENTWISE = {"relu", "tanh", "sigmoid", "add", "mul", "concat", "reshape"}


def elementwise(op: str, *inputs: Tensor, axis: int = 0, shape: Sequence[int] | None = None) -> Tensor:
    """Name-dispatched entry point for the pointwise/shape operations."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    if op in ("relu", "tanh", "sigmoid"):
        (x,) = inputs
        return ACTIVATIONS[op](x)
    if op == "add":
        a, b = inputs
        return add(a, b)
    if op == "mul":
        a, b = inputs
        return mul(a, b)
    if op == "concat":
        return concat(inputs, axis=axis)
    (x,) = inputs
    if shape is None:
        raise ValueError("reshape needs a target shape")
    return reshape(x, shape)


# ---------------------------------------------------------------------------
# backward


def _trace(loss: Tensor) -> list[Tensor]:
    """Linearize the graph under ``loss`` so every tensor follows its inputs.
    This ordered list is the tape the reverse pass walks."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.op is not None:
            for parent in node.op.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from the
    scalar ``loss``, accumulating into any gradient already present."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _trace(loss)
    # A tensor consumed once never has its slot accumulated into, so its
    # incoming gradient can be stored by reference; multi-consumer slots own
    # a private copy because later contributions add in place.
    consumers: dict[int, int] = {}
    for node in order:
        if node.op is not None:
            for parent in node.op.inputs:
                consumers[id(parent)] = consumers.get(id(parent), 0) + 1
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.get(id(node))
        if g is None or node.op is None:
            continue
        grads = node.op.rule(g)
        for parent, gp in zip(node.op.inputs, grads):
            if gp is None or not parent.requires_grad:
                continue
            pid = id(parent)
            slot = flowing.get(pid)
            if slot is None:
                if consumers.get(pid, 0) > 1:
                    flowing[pid] = np.array(gp, dtype=np.float64, copy=True)
                else:
                    flowing[pid] = gp
            else:
                slot += gp
    for node in order:
        if node.requires_grad:
            g = flowing.get(id(node))
            if g is None:
                continue
            if node.grad is None:
                # leaves (parameters) own their gradient outright so that
                # in-place optimizer math can never alias another buffer
                node.grad = np.array(g, dtype=np.float64, copy=True) if node.op is None else g
            else:
                node.grad = node.grad + g


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    worst_index: tuple[int, ...] | None
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    # the additive floor keeps near-zero gradients from dividing noise by noise
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-4)


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Check the analytic gradient of scalar-valued ``f`` at ``point`` against
    central finite differences, coordinate by coordinate.

    ``f`` is re-run under ``no_grad`` at the probe points, so it must rebuild
    its graph per call (define-by-run style).  Raises on non-finite values at
    any probe point.
    """
    point.requires_grad = True
    point.zero_grad()
    loss = f(point)
    backward(loss)
    if point.grad is None:
        raise ValueError("f does not depend on the checked point")
    analytic = point.grad.copy()
    numeric = _central_differences(f, point, step)
    rel = _relative_errors(analytic, numeric)
    return _report(rel, tol)


def _central_differences(f: Callable[[Tensor], Tensor], point: Tensor, step: float) -> np.ndarray:
    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi = f(point).item()
            flat[k] = orig - step
            lo = f(point).item()
            flat[k] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite value at finite-difference probe {k}")
            num_flat[k] = (hi - lo) / (2.0 * step)
    return numeric


def _report(rel: np.ndarray, tol: float) -> GradCheckReport:
    if rel.size == 0:
        return GradCheckReport(0.0, None, 0, tol)
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_error=float(rel.reshape(-1)[worst]),
        worst_index=tuple(int(i) for i in np.unravel_index(worst, rel.shape)),
        n_checked=int(rel.size),
        tol=tol,
    )


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> dict[str, GradCheckReport]:
    """Run the finite-difference oracle for every named parameter of a model.

    ``loss_fn`` takes no arguments and must be deterministic (evaluation-mode
    dropout) so repeated calls probe the same function.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    reports: dict[str, GradCheckReport] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = _central_differences(lambda _t: loss_fn(), p, step)
        rel = _relative_errors(analytic, numeric)
        reports[name] = _report(rel, tol)
    return reports
