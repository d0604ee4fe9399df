"""Normalisation, convolution blocks and multi-head self-attention.

Each layer is a small :class:`Module` that owns its parameters; the matching
functional form (``group_norm(x, params)`` and friends) takes the module as
its parameter record, so tests can drive either spelling.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

NORM_EPS = 1e-5


class Module:
    """Parameter container with deterministic, name-addressable traversal.

    Parameters are attributes holding a ``Tensor`` with ``requires_grad``;
    children are ``Module`` attributes or lists of modules.  Traversal
    follows attribute assignment order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform_fan_in(rng: Rng, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` initialisation."""
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, shape, dtype))


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: Rng, padding: int = 0,
                 dilation: int = 1, bias: bool = True, dtype=np.float32):
        fan_in = cin * kernel * kernel
        self.weight = uniform_fan_in(rng, (cout, cin, kernel, kernel), fan_in, dtype)
        self.bias = uniform_fan_in(rng, (cout,), fan_in, dtype) if bias else None
        self.padding = padding
        self.dilation = dilation

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias, 1, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng: Rng, dtype=np.float32):
        fan_in = cin * kernel * kernel
        self.weight = uniform_fan_in(rng, (cin, cout, kernel, kernel), fan_in, dtype)
        self.bias = uniform_fan_in(rng, (cout,), fan_in, dtype)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return nx.conv_transpose2d(x, self.weight, self.bias, self.stride)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

class GroupNorm(Module):
    def __init__(self, num_groups: int, channels: int, eps: float = NORM_EPS, dtype=np.float32):
        if num_groups < 1 or channels % num_groups:
            raise ValueError(f"{channels} channels not divisible into {num_groups} groups")
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.num_groups = num_groups
        self.eps = eps
        self.gamma_scale = param(np.ones(channels, dtype=dtype))
        self.beta_shift = param(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self)


def group_norm(x: Tensor, params: GroupNorm) -> Tensor:
    """Per-sample, per-group standardisation followed by a per-channel affine map."""
    b, c, h, w = x.shape
    g = params.num_groups
    if c % g:
        raise nx.ShapeError(f"{c} channels not divisible into {g} groups")
    if params.gamma_scale.shape != (c,):
        raise nx.ShapeError(f"norm expects {params.gamma_scale.shape[0]} channels, got {c}")
    z = nx.standardize(x.reshape(b, g, (c // g) * h * w), -1, params.eps).reshape(b, c, h, w)
    return z * params.gamma_scale.reshape(1, c, 1, 1) + params.beta_shift.reshape(1, c, 1, 1)


class SequenceNorm(Module):
    """Per-sample normalisation over the joint ``T x C x H x W`` extent."""

    def __init__(self, extent: tuple[int, int, int, int], eps: float = NORM_EPS, dtype=np.float32):
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.gamma_scale = param(np.ones(extent, dtype=dtype))
        self.beta_shift = param(np.zeros(extent, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return sequence_norm(x, self)


def sequence_norm(x: Tensor, params: SequenceNorm) -> Tensor:
    if x.ndim != 5 or x.shape[1:] != params.gamma_scale.shape:
        raise nx.ShapeError(f"input {x.shape} does not match sequence extent {params.gamma_scale.shape}")
    z = nx.standardize(x, (1, 2, 3, 4), params.eps)
    return z * params.gamma_scale + params.beta_shift


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class ConvNormReLU(Module):
    """3x3 convolution, group norm and ReLU, in that order."""

    def __init__(self, cin: int, cout: int, rng: Rng, groups: int = 4, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, rng, padding=1, dtype=dtype)
        self.norm = GroupNorm(groups, cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv_norm_relu(x, self)


def conv_norm_relu(x: Tensor, params: ConvNormReLU) -> Tensor:
    return nx.relu(group_norm(params.conv(x), params.norm))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, din: int, dout: int, rng: Rng, dtype=np.float32):
        self.weight = uniform_fan_in(rng, (din, dout), din, dtype)
        self.bias = uniform_fan_in(rng, (dout,), din, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return nx.matmul(x, self.weight) + self.bias


class MultiHeadSelfAttention(Module):
    def __init__(self, embed_dim: int, num_heads: int, rng: Rng, dtype=np.float32):
        if num_heads < 1 or embed_dim % num_heads:
            raise ValueError(f"embed_dim {embed_dim} not divisible by {num_heads} heads")
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.query = Linear(embed_dim, embed_dim, rng, dtype)
        self.key = Linear(embed_dim, embed_dim, rng, dtype)
        self.value = Linear(embed_dim, embed_dim, rng, dtype)
        self.output = Linear(embed_dim, embed_dim, rng, dtype)

    def forward(self, tokens: Tensor) -> Tensor:
        return multi_head_self_attention(tokens, self)


def multi_head_self_attention(tokens: Tensor, params: MultiHeadSelfAttention) -> Tensor:
    """Scaled dot-product self-attention over ``[B, N, D]`` tokens."""
    b, n, d = tokens.shape
    if d != params.embed_dim:
        raise nx.ShapeError(f"token dim {d} != embed_dim {params.embed_dim}")
    h = params.num_heads
    hd = d // h

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, n, h, hd).transpose(0, 2, 1, 3)

    # scaling q is cheaper than scaling the n x n score matrix
    q = nx.scale(heads(params.query(tokens)), 1.0 / math.sqrt(hd))
    k = heads(params.key(tokens))
    v = heads(params.value(tokens))
    attn = nx.softmax(nx.matmul(q, k.transpose(0, 1, 3, 2)), axis=-1)
    ctx = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return params.output(ctx)
