"""Small module system plus the transformer building blocks shared by all towers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .optim import Parameter
from .tensor import Tensor

NEG_INF = -1e30


class Module:
    """Parameters and submodules are discovered from instance attributes in
    definition order; lists of modules are walked element-wise."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name


def _param(rng: np.random.Generator, shape, std: float) -> Parameter:
    return Parameter("", Tensor(rng.normal(0.0, std, size=shape)))


def _const(shape, value: float) -> Parameter:
    return Parameter("", Tensor(np.full(shape, value)))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        self.d_in, self.d_out = d_in, d_out
        self.weight = _param(rng, (d_in, d_out), std if std is not None else 1.0 / math.sqrt(d_in))
        self.bias = _const((d_out,), 0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects last dim {self.d_in}, got input {x.shape}")
        y = x @ self.weight.tensor
        return y + self.bias.tensor if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = _const((d,), 1.0)
        self.beta = _const((d,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma.tensor, self.beta.tensor, self.eps)


class MLP(Module):
    """Linear -> GELU -> Linear, applied per token."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int, bias: bool = True):
        self.fc1 = Linear(rng, d_in, d_hidden, bias)
        self.fc2 = Linear(rng, d_hidden, d_out, bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, D = x.shape
    return x.reshape(B, L, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, blocked: np.ndarray | None) -> Tensor:
    """q [B,H,Tq,dh], k/v [B,H,Tk,dh]; ``blocked`` broadcasts to [B,H,Tq,Tk]."""
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(q.shape[-1]))
    if blocked is not None:
        scores = T.masked_fill(scores, blocked, NEG_INF)
    return T.softmax(scores, axis=-1) @ v


class Attention(Module):
    """Multi-head attention with optional grouped key/value heads.

    ``n_kv_heads < n_heads`` gives grouped-query attention: each KV head is
    shared by ``n_heads // n_kv_heads`` consecutive query heads. ``d_ctx``
    differs from ``d_model`` for cross-attention.
    """

    def __init__(self, rng, d_model: int, n_heads: int, n_kv_heads: int | None = None,
                 d_ctx: int | None = None, bias: bool = True):
        n_kv_heads = n_kv_heads or n_heads
        if d_model % n_heads or n_heads % n_kv_heads:
            raise ShapeError(f"bad head layout d={d_model} heads={n_heads} kv={n_kv_heads}")
        d_ctx = d_ctx or d_model
        self.n_heads, self.n_kv_heads = n_heads, n_kv_heads
        self.head_dim = d_model // n_heads
        kv_dim = n_kv_heads * self.head_dim
        self.wq = Linear(rng, d_model, d_model, bias)
        self.wk = Linear(rng, d_ctx, kv_dim, bias)
        self.wv = Linear(rng, d_ctx, kv_dim, bias)
        self.wo = Linear(rng, d_model, d_model, bias)

    def __call__(self, x: Tensor, ctx: Tensor | None = None, blocked: np.ndarray | None = None) -> Tensor:
        ctx = x if ctx is None else ctx
        q = split_heads(self.wq(x), self.n_heads)
        k = split_heads(self.wk(ctx), self.n_kv_heads)
        v = split_heads(self.wv(ctx), self.n_kv_heads)
        if self.n_kv_heads != self.n_heads:
            k = T.repeat_axis(k, self.n_heads // self.n_kv_heads, axis=1)
            v = T.repeat_axis(v, self.n_heads // self.n_kv_heads, axis=1)
        return self.wo(merge_heads(scaled_dot_attention(q, k, v, blocked)))


class EncoderBlock(Module):
    """Pre-norm bidirectional self-attention + MLP."""

    def __init__(self, rng, d: int, n_heads: int, mlp_ratio: int):
        self.ln1 = LayerNorm(d)
        self.attn = Attention(rng, d, n_heads)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, d * mlp_ratio, d)

    def __call__(self, x: Tensor, blocked: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), blocked=blocked)
        return x + self.mlp(self.ln2(x))
