"""Model layers built from the autodiff primitives.

Initialization follows the usual transformer recipe: truncated normal
(sigma 0.02) for weight matrices, zeros for biases, ones for normalization
gains.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

__all__ = [
    "ParamRegistry",
    "trunc_normal",
    "Linear",
    "LayerNorm",
    "FeedForward",
    "MultiHeadSelfAttention",
    "EncoderLayer",
    "GRUCell",
]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within two sigma."""
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


class ParamRegistry:
    """Flat name -> Parameter table; names must be unique."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def make(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def all(self) -> list[Parameter]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)


class Linear:
    def __init__(self, reg: ParamRegistry, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = reg.make(f"{name}.weight", trunc_normal(rng, (d_out, d_in)))
        self.bias = reg.make(f"{name}.bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, reg: ParamRegistry, name: str, d: int, eps: float = 1e-12):
        self.gain = reg.make(f"{name}.gain", np.ones(d))
        self.bias = reg.make(f"{name}.bias", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward:
    """Position-wise two-layer block with a relu in between."""

    def __init__(self, reg: ParamRegistry, name: str, d: int, d_hidden: int,
                 rng: np.random.Generator):
        self.up = Linear(reg, f"{name}.up", d, d_hidden, rng)
        self.down = Linear(reg, f"{name}.down", d_hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.relu(self.up(x)))


class MultiHeadSelfAttention:
    def __init__(self, reg: ParamRegistry, name: str, d: int, n_heads: int,
                 rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.q = Linear(reg, f"{name}.q", d, d, rng)
        self.k = Linear(reg, f"{name}.k", d, d, rng)
        self.v = Linear(reg, f"{name}.v", d, d, rng)
        self.out = Linear(reg, f"{name}.out", d, d, rng)

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        x = ad.reshape(x, (batch, length, self.n_heads, self.d_head))
        return ad.transpose(x, (0, 2, 1, 3))  # (B, h, T, d_head)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None, *,
                 dropout: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
        batch, length, _ = x.shape
        q = self._split(self.q(x), batch, length)
        k = self._split(self.k(x), batch, length)
        v = self._split(self.v(x), batch, length)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = scores + ad.constant(mask, dtype=x.data.dtype)
        probs = ad.softmax(scores, axis=-1)
        if dropout > 0.0 and rng is not None:
            probs = ad.dropout(probs, dropout, rng)
        mixed = ad.matmul(probs, v)  # (B, h, T, d_head)
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (batch, length, self.d))
        return self.out(mixed)


class EncoderLayer:
    """Transformer block: attention and feed-forward with residuals.

    `pre_norm=True` normalizes sublayer inputs (the reliable choice when
    training from scratch); otherwise normalization follows each residual
    sum.
    """

    def __init__(self, reg: ParamRegistry, name: str, d: int, n_heads: int,
                 d_ffn: int, rng: np.random.Generator, pre_norm: bool = False):
        self.attn = MultiHeadSelfAttention(reg, f"{name}.attn", d, n_heads, rng)
        self.ln_attn = LayerNorm(reg, f"{name}.ln_attn", d)
        self.ffn = FeedForward(reg, f"{name}.ffn", d, d_ffn, rng)
        self.ln_ffn = LayerNorm(reg, f"{name}.ln_ffn", d)
        self.pre_norm = pre_norm

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None, *,
                 dropout: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
        def drop(t):
            if dropout > 0.0 and rng is not None:
                return ad.dropout(t, dropout, rng)
            return t

        if self.pre_norm:
            x = x + drop(self.attn(self.ln_attn(x), mask, dropout=dropout, rng=rng))
            return x + drop(self.ffn(self.ln_ffn(x)))
        x = self.ln_attn(x + drop(self.attn(x, mask, dropout=dropout, rng=rng)))
        return self.ln_ffn(x + drop(self.ffn(x)))


class GRUCell:
    """Gated recurrent cell; an update gate of one keeps the hidden state."""

    def __init__(self, reg: ParamRegistry, name: str, d: int, rng: np.random.Generator):
        self.d = d
        self.w_input = reg.make(f"{name}.w_input", trunc_normal(rng, (3 * d, d)))
        self.w_hidden = reg.make(f"{name}.w_hidden", trunc_normal(rng, (3 * d, d)))
        self.b_input = reg.make(f"{name}.b_input", np.zeros(3 * d))
        self.b_hidden = reg.make(f"{name}.b_hidden", np.zeros(3 * d))

    def step(self, hidden: Tensor, inputs: Tensor) -> Tensor:
        d = self.d
        gi = ad.linear(inputs, self.w_input, self.b_input)
        gh = ad.linear(hidden, self.w_hidden, self.b_hidden)
        reset = ad.sigmoid(ad.narrow(gi, 0, d) + ad.narrow(gh, 0, d))
        update = ad.sigmoid(ad.narrow(gi, d, d) + ad.narrow(gh, d, d))
        fresh = ad.tanh(ad.narrow(gi, 2 * d, d) + reset * ad.narrow(gh, 2 * d, d))
        return update * hidden + (1.0 - update) * fresh
