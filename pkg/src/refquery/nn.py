"""Parameter containers and transformer building blocks on top of :mod:`refquery.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .data import ConfigError  # noqa: F401  (re-exported)
from .tensor import Tensor


class Module:
    """Holds parameters and submodules as attributes; names follow attribute paths."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{key}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameter tensors: {', '.join(missing[:5])}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


ShapeError = T.ShapeError


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.weight = uniform_init(rng, (n_in, n_out), n_in)
        self.bias = uniform_init(rng, (n_out,), n_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return self(x.reshape(1, -1)).reshape(-1)
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def zero_(self):
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, C) -> (..., heads, n, C/heads)
    *lead, n, c = x.shape
    x = x.reshape(*lead, n, heads, c // heads)
    return T.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -2, -3)
    *lead, n, h, d = x.shape
    return x.reshape(*lead, n, h * d)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, params: "MultiHeadAttention",
                         return_weights: bool = False):
    """Scaled dot-product attention per head, concatenated and projected.

    ``q`` is (..., n_q, C); ``k`` and ``v`` are (..., n_k, C) and broadcast
    against ``q``'s leading dimensions.
    """
    c = q.shape[-1]
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} disagree on length")
    qh = split_heads(params.q_proj(q), heads)
    kh = split_heads(params.k_proj(k), heads)
    vh = split_heads(params.v_proj(v), heads)
    scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(c // heads))
    weights = T.softmax(scores, axis=-1)
    out = params.out_proj(merge_heads(T.matmul(weights, vh)))
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)

    def __call__(self, q, k, v, return_weights=False):
        return multi_head_attention(q, k, v, self.heads, self, return_weights)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    @property
    def out_proj(self):
        return self.fc2


class CrossAttentionBlock(Module):
    """Pre-norm residual attention sublayer: ``x + attn(norm(x), memory, memory)``."""

    def __init__(self, rng, dim, heads):
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)

    def __call__(self, x: Tensor, memory: Tensor | None = None, key_pos: Tensor | None = None,
                 query_pos: Tensor | None = None) -> Tensor:
        h = self.norm(x)
        mem = h if memory is None else memory
        q = h if query_pos is None else h + query_pos
        k = mem if key_pos is None else mem + key_pos
        return x + self.attn(q, k, mem)


class FFNBlock(Module):
    def __init__(self, rng, dim, hidden):
        self.norm = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.ffn(self.norm(x))


def zero_output_projections(module: Module):
    """Zero every sublayer's output projection so residual paths become identities."""
    out = getattr(module, "out_proj", None)
    if isinstance(out, Linear):
        out.zero_()
    for value in vars(module).values():
        if isinstance(value, Module):
            zero_output_projections(value)
        elif isinstance(value, (list, tuple)):
            for item in value:
                if isinstance(item, Module):
                    zero_output_projections(item)
