"""Parameter containers and attention primitives built on :mod:`.ops`."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor


class Module:
    """Base class; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            p.assign(state[name])


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(uniform_init(rng, d_in, (d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Two-layer GELU MLP."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class StackedFeedForward(Module):
    """One GELU MLP per group, applied to ``x`` of shape ``[..., groups, rows, dim]``."""

    def __init__(self, groups: int, dim: int, hidden: int, rng: np.random.Generator):
        self.w1 = Parameter(uniform_init(rng, dim, (groups, dim, hidden)))
        self.b1 = Parameter(uniform_init(rng, dim, (groups, 1, hidden)))
        self.w2 = Parameter(uniform_init(rng, hidden, (groups, hidden, dim)))
        self.b2 = Parameter(uniform_init(rng, hidden, (groups, 1, dim)))

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.gelu(ops.matmul(x, self.w1) + self.b1)
        return ops.matmul(h, self.w2) + self.b2


@dataclass
class AttentionWeights:
    """Learned projections for one attention block (weights are [in, out])."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def identity(cls, dim: int) -> "AttentionWeights":
        eye, zero = Tensor(np.eye(dim)), Tensor(np.zeros(dim))
        return cls(eye, zero, eye, zero, eye, zero, eye, zero)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    return ops.swapaxes(x.reshape(*lead, length, heads, dim // heads), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = ops.swapaxes(x, -2, -3)
    *lead, length, heads, dh = x.shape
    return x.reshape(*lead, length, heads * dh)


def attention(
    queries: Tensor,
    memory: Tensor,
    w: AttentionWeights,
    heads: int = 1,
    values_equal_keys: bool = False,
) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention of ``queries`` over ``memory``.

    Shapes are ``[..., Tq, D]`` and ``[..., Tm, D]`` with broadcastable leading
    axes. Returns the projected output and the attention weights
    ``[..., heads, Tq, Tm]`` as a plain array. With ``values_equal_keys`` the
    key projection is reused as the value projection.
    """
    d = queries.shape[-1]
    if memory.shape[-1] != d:
        raise ShapeError(f"attention: query dim {d} != memory dim {memory.shape[-1]}")
    if heads < 1 or d % heads:
        raise ShapeError(f"model dim {d} is not divisible by {heads} heads")
    q = _split_heads(ops.matmul(queries, w.wq) + w.bq, heads)
    k = _split_heads(ops.matmul(memory, w.wk) + w.bk, heads)
    v = k if values_equal_keys else _split_heads(ops.matmul(memory, w.wv) + w.bv, heads)
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // heads))
    probs = ops.softmax(scores, axis=-1)
    out = _merge_heads(ops.matmul(probs, v))
    return ops.matmul(out, w.wo) + w.bo, probs.data


def multi_head_self_attention(x: Tensor, w: AttentionWeights, heads: int = 1, **kw):
    return attention(x, x, w, heads, **kw)


def cross_attention(queries: Tensor, memory: Tensor, w: AttentionWeights, heads: int = 1, **kw):
    return attention(queries, memory, w, heads, **kw)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, values_equal_keys: bool = False):
        if heads < 1 or dim % heads:
            raise ShapeError(f"model dim {dim} is not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.heads = heads
        self.values_equal_keys = values_equal_keys

    @property
    def weights(self) -> AttentionWeights:
        return AttentionWeights(self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                                self.v.weight, self.v.bias, self.o.weight, self.o.bias)

    def __call__(self, queries: Tensor, memory: Tensor) -> tuple[Tensor, np.ndarray]:
        return attention(queries, memory, self.weights, self.heads, self.values_equal_keys)
