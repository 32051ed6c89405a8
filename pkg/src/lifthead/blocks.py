"""Neural primitives: scaled dot-product attention, multi-head attention,
the 3-layer feed-forward network, and parameter initialization.

Attention divides the score matrix by sqrt(scale_dim) where scale_dim is the
model-wide width d, not the per-head width d/h. That is deliberate and
config-visible; callers that prefer per-head scaling can pass d // h.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LinearParams:
    """An affine map x -> x @ weight + bias."""
    weight: Tensor  # (d_in, d_out)
    bias: Tensor    # (d_out,)

    def named(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class MHAParams:
    """Per-head q/k/v projections plus the output projection.

    heads[i] is a (q, k, v) triple of LinearParams mapping d -> d/h; out maps
    the concatenated heads d -> d. scale_dim is the attention divisor.
    """
    heads: list[tuple[LinearParams, LinearParams, LinearParams]]
    out: LinearParams
    scale_dim: int

    def __post_init__(self):
        d = self.out.weight.shape[0]
        if d % len(self.heads) != 0:
            raise ShapeError(f"width {d} not divisible by {len(self.heads)} heads")

    def named(self, prefix: str):
        for i, (q, k, v) in enumerate(self.heads):
            yield from q.named(f"{prefix}.heads.{i}.q")
            yield from k.named(f"{prefix}.heads.{i}.k")
            yield from v.named(f"{prefix}.heads.{i}.v")
        yield from self.out.named(f"{prefix}.out")


@dataclass
class FFNParams:
    """Three affine layers, all of width d."""
    layers: list[LinearParams] = field(default_factory=list)

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ShapeError(f"feed-forward network has 3 layers, got {len(self.layers)}")
        widths = {p.weight.shape for p in self.layers}
        if len(widths) != 1 or any(s[0] != s[1] for s in widths):
            raise ShapeError(f"feed-forward layers must share a square width, got {widths}")

    def named(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layers.{i}")


def init_params(rng: np.random.Generator, fan_in: int, fan_out: int,
                dtype=np.float32) -> LinearParams:
    """Xavier-uniform weights, zero bias."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fan_in and fan_out must be positive, got {fan_in}, {fan_out}")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform(-a, a, size=(fan_in, fan_out))
    return LinearParams(
        weight=Tensor(weight.astype(dtype), requires_grad=True),
        bias=Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True),
    )


def init_mha(rng: np.random.Generator, d: int, h: int, scale_dim: int | None = None,
             dtype=np.float32) -> MHAParams:
    if d % h != 0:
        raise ShapeError(f"width {d} not divisible by {h} heads")
    dk = d // h
    heads = [
        (init_params(rng, d, dk, dtype), init_params(rng, d, dk, dtype),
         init_params(rng, d, dk, dtype))
        for _ in range(h)
    ]
    return MHAParams(heads=heads, out=init_params(rng, d, d, dtype),
                     scale_dim=scale_dim if scale_dim is not None else d)


def init_ffn(rng: np.random.Generator, d: int, dtype=np.float32) -> FFNParams:
    return FFNParams(layers=[init_params(rng, d, d, dtype) for _ in range(3)])


def linear(p: LinearParams, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, p.weight), p.bias)


def attention(q: Tensor, k: Tensor, v: Tensor, scale_dim: int) -> Tensor:
    """softmax(q k^T / sqrt(scale_dim)) v, softmax over key positions."""
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"attention: query width {q.shape} vs key width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: key count {k.shape} vs value count {v.shape}")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(scale_dim))
    return T.matmul(T.softmax_rows(scores), v)


def multi_head_attention(p: MHAParams, q: Tensor, k: Tensor, v: Tensor, *,
                         dropout_p: float = 0.0,
                         rng: np.random.Generator | None = None,
                         training: bool = False) -> Tensor:
    """Project per head, attend, concatenate, project back to width d.

    Dropout, when enabled, applies to the output projection result.
    """
    head_outs = []
    for wq, wk, wv in p.heads:
        head_outs.append(
            attention(linear(wq, q), linear(wk, k), linear(wv, v), p.scale_dim))
    out = linear(p.out, T.concat_last_dim(head_outs))
    if dropout_p > 0.0:
        out = T.dropout(out, dropout_p, rng, training)
    return out


def feed_forward(p: FFNParams, x: Tensor, *,
                 dropout_p: float = 0.0,
                 rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
    """linear -> relu -> linear -> relu -> linear; no activation after the last
    layer. Dropout, when enabled, applies to the hidden activations."""
    h = T.relu(linear(p.layers[0], x))
    if dropout_p > 0.0:
        h = T.dropout(h, dropout_p, rng, training)
    h = T.relu(linear(p.layers[1], h))
    if dropout_p > 0.0:
        h = T.dropout(h, dropout_p, rng, training)
    return linear(p.layers[2], h)
