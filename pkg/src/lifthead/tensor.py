"""Dense tensor arithmetic with reverse-mode differentiation.

Values are row-major numpy arrays, float32 by default with float64 available
for gradient oracles. Differentiation uses a dynamic tape: primitives executed
while a Tape is active append one entry each, in execution order, so the tape
is already topologically sorted. backward() walks it once in reverse and
accumulates gradients into leaf tensors (parameters and inputs flagged
requires_grad).
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonScalarLossError(ValueError):
    """Raised when backward() is seeded from a tensor with more than one element."""


class Tensor:
    """A dense n-dimensional array with an optional gradient accumulator.

    ``data`` is immutable by convention after construction; only ``grad`` is
    mutated (by backward passes) and ``data`` by optimizer updates between
    steps. ``grad``, when present, always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _TapeEntry:
    __slots__ = ("out_id", "inputs", "backward_fn")

    def __init__(self, out_id, inputs, backward_fn):
        self.out_id = out_id
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Entries are appended in execution order, so every op's inputs precede it
    and a single reverse sweep visits each op exactly once.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self._ids = itertools.count()

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self

    def record(self, out: Tensor, inputs: Sequence[Tensor],
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        out._tape = self
        out._node_id = next(self._ids)
        self.entries.append(_TapeEntry(out._node_id, tuple(inputs), backward_fn))


_tape_stack: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _maybe_record(out, inputs, backward_fn):
    tape = active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf tensor.

    Repeated calls without zeroing add up: two identical passes leave exactly
    twice the gradient of one.
    """
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    adjoint: dict[int, np.ndarray] = {}
    if loss._tape is tape and loss._node_id is not None:
        adjoint[loss._node_id] = np.ones_like(loss.data)
    elif loss.requires_grad:
        # loss is itself a leaf; nothing upstream to differentiate
        loss.accumulate_grad(np.ones_like(loss.data))
        return
    for entry in reversed(tape.entries):
        g = adjoint.pop(entry.out_id, None)
        if g is None:
            continue  # not on a path from the loss
        grads = entry.backward_fn(g)
        for inp, gi in zip(entry.inputs, grads):
            if gi is None:
                continue
            if inp._tape is tape and inp._node_id is not None:
                nid = inp._node_id
                if nid in adjoint:
                    adjoint[nid] = adjoint[nid] + gi
                else:
                    adjoint[nid] = gi
            elif inp.requires_grad:
                inp.accumulate_grad(gi)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _maybe_record(out, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _maybe_record(out, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. Also accepts a (n,) row vector b against an (m, n) a,
    broadcast over rows (the bias case); no other broadcasting."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def bwd(g):
            return g, g

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.data + b.data)

        def bwd(g):
            return g, g.sum(axis=0)

    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    return _maybe_record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} - {b.shape}")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return g, -g

    return _maybe_record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return _maybe_record(out, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def bwd(g):
        return (g * c,)

    return _maybe_record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0))

    def bwd(g):
        return (g * mask,)

    return _maybe_record(out, (x,), bwd)


def abs_(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)

    def bwd(g):
        return (g * sign,)

    return _maybe_record(out, (x,), bwd)


def sum_(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bwd(g):
        return (np.full_like(x.data, g),)

    return _maybe_record(out, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))

    def bwd(g):
        return (np.full_like(x.data, g / n),)

    return _maybe_record(out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with row-max subtraction for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _maybe_record(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean and unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got shape {x.shape}")
    n = x.shape[1]
    if n < 2:
        raise ShapeError(f"layer_norm needs at least 2 features per row, got {n}")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({n},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(g):
        gxhat = g * gamma.data
        dx = inv_std * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _maybe_record(out, (x, gamma, beta), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: zero each element with probability p and scale the
    survivors by 1/(1-p) in training mode; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        out = Tensor(x.data.copy())

        def bwd(g):
            return (g,)

        return _maybe_record(out, (x,), bwd)
    keep = rng.random(x.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.dtype)
    out = Tensor(x.data * factor)

    def bwd(g):
        return (g * factor,)

    return _maybe_record(out, (x,), bwd)


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_last_dim needs at least one tensor")
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ShapeError(
                f"concat_last_dim: row counts differ, {[t.shape for t in tensors]}"
            )
    widths = [t.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return _maybe_record(out, tuple(tensors), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {x.shape}")
    out = Tensor(x.data[start:stop].copy())

    def bwd(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _maybe_record(out, (x,), bwd)


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows by index (repeats allowed). Backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows expects a matrix and 1-d indices, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = Tensor(x.data[idx])

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _maybe_record(out, (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape).copy())

    def bwd(g):
        return (g.reshape(x.shape),)

    return _maybe_record(out, (x,), bwd)


def normalize_rows(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm <= eps divide by eps
    instead, which keeps the map differentiable near zero."""
    if x.data.ndim != 2:
        raise ShapeError(f"normalize_rows expects a matrix, got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x.data / denom
    out = Tensor(y)
    small = norms <= eps

    def bwd(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        dx_regular = (g - y * proj) / denom
        dx_small = g / eps
        return (np.where(small, dx_small, dx_regular),)

    return _maybe_record(out, (x,), bwd)
