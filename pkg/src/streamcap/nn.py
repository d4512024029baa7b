"""Small module system and transformer layers on top of :mod:`streamcap.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tt
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor; ``name`` is its dotted path inside the owning model."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(tt.get_default_dtype())


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out, dtype=tt.get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = tt.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d, dtype=tt.get_default_dtype()))
        self.bias = Parameter(np.zeros(d, dtype=tt.get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return tt.layernorm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(trunc_normal(rng, (n, d)))

    def forward(self, ids) -> Tensor:
        return tt.embedding(self.weight, ids)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return tt.dropout(x, self.p, self.rng, self.training)


class MultiHeadAttention(Module):
    """Multi-head attention over the last two axes of ``[..., seq, d]`` inputs.

    Leading axes are independent batches, which is how block-diagonal masks
    are executed without touching the masked-out blocks.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout: float = 0.0, scope: str = "attn"):
        if d % heads:
            raise ValueError(f"d_model {d} not divisible by heads {heads}")
        self.heads = heads
        self.d_head = d // heads
        self.scope = scope
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.drop = Dropout(dropout, rng)

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        x = tt.reshape(x, lead + (self.heads, self.d_head))
        return tt.swapaxes(x, -2, -3)  # [..., h, seq, dh]

    def forward(self, x: Tensor, kv: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        kv = x if kv is None else kv
        q = self._split(self.q(x) * (1.0 / math.sqrt(self.d_head)))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        with tt.count_scope(self.scope):
            scores = tt.matmul(q, tt.swapaxes(k, -1, -2))
            probs = self.drop(tt.masked_softmax(scores, mask))
            ctx = tt.matmul(probs, v)
        ctx = tt.swapaxes(ctx, -2, -3)
        ctx = tt.reshape(ctx, ctx.shape[:-2] + (self.heads * self.d_head,))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator, dropout: float = 0.0):
        self.fc1 = Linear(d, d * mult, rng)
        self.fc2 = Linear(d * mult, d, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.drop(self.fc2(tt.gelu(self.fc1(x))))


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d: int, heads: int, mult: int, rng: np.random.Generator, dropout: float = 0.0):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng, dropout, scope="self_attn")
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, mult, rng, dropout)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.drop(self.attn(self.ln1(x), mask=mask))
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    """Pre-norm block: masked self-attention, then cross-attention, then MLP."""

    def __init__(self, d: int, heads: int, mult: int, rng: np.random.Generator, dropout: float = 0.0):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng, dropout, scope="self_attn")
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng, dropout, scope="cross_attn")
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(d, mult, rng, dropout)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor, memory: Tensor, self_mask=None, cross_mask=None) -> Tensor:
        x = x + self.drop(self.self_attn(self.ln1(x), mask=self_mask))
        x = x + self.drop(self.cross_attn(self.ln2(x), kv=memory, mask=cross_mask))
        return x + self.ff(self.ln3(x))
