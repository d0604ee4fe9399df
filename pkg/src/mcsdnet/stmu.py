"""Spatiotemporal mix units: shape-preserving maps over ``[B, T, C, h, w]``.

Five interchangeable kinds are provided.  ``Dsta`` (dual spatiotemporal
attention) normalises the whole sequence, runs temporal attention with the
``T*C`` feature maps as tokens and spatial attention with the ``h*w``
positions as tokens, fuses both per frame with a 1x1 convolution and adds the
result back to its input.  No positional encoding is used anywhere, so the
attention branches are equivariant to frame permutations.
"""
from __future__ import annotations

import enum

import numpy as np

from . import numerics as nx
from .layers import Conv2d, Module, MultiHeadSelfAttention, SequenceNorm
from .numerics import Rng, Tensor


class StmuKind(str, enum.Enum):
    IDENTITY = "identity"
    CONV3D = "conv3d"
    CONVLSTM = "convlstm"
    TFORMER = "tformer"
    DSTA = "dsta"

    @classmethod
    def parse(cls, token) -> "StmuKind":
        if isinstance(token, cls):
            return token
        try:
            return cls(str(token).lower())
        except ValueError:
            names = " | ".join(k.value for k in cls)
            raise ValueError(f"unknown STMU kind {token!r}; expected one of {names}") from None


def _frames(x: Tensor) -> Tensor:
    b, t, c, h, w = x.shape
    return x.reshape(b * t, c, h, w)


def _check_seq(seq: Tensor, extent) -> None:
    if seq.ndim != 5 or tuple(seq.shape[1:]) != tuple(extent):
        raise nx.ShapeError(f"sequence {seq.shape} does not match unit extent {tuple(extent)}")


class Identity(Module):
    kind = StmuKind.IDENTITY

    def forward(self, seq: Tensor) -> Tensor:
        return seq


# ---------------------------------------------------------------------------
# dual spatiotemporal attention
# ---------------------------------------------------------------------------

class Dsta(Module):
    kind = StmuKind.DSTA

    def __init__(self, extent: tuple[int, int, int, int], heads: int, rng: Rng,
                 temporal: bool = True, spatial: bool = True, dtype=np.float32):
        if not (temporal or spatial):
            raise ValueError("DSTA needs at least one attention branch")
        t, c, h, w = extent
        self.extent = tuple(extent)
        self.norm = SequenceNorm(self.extent, dtype=dtype)
        self.t_msa = MultiHeadSelfAttention(h * w, heads, rng, dtype) if temporal else None
        self.s_msa = MultiHeadSelfAttention(t * c, heads, rng, dtype) if spatial else None
        branches = int(temporal) + int(spatial)
        self.fuse = Conv2d(branches * c, c, 1, rng, dtype=dtype)

    def forward(self, seq: Tensor) -> Tensor:
        return dsta_forward(seq, self)


def t_msa(normed: Tensor, attn: MultiHeadSelfAttention) -> Tensor:
    """Attention with the ``T*C`` feature maps as tokens, each of dim ``h*w``."""
    b, t, c, h, w = normed.shape
    return attn(normed.reshape(b, t * c, h * w)).reshape(b, t, c, h, w)


def s_msa(normed: Tensor, attn: MultiHeadSelfAttention) -> Tensor:
    """Attention with the ``h*w`` positions as tokens, each of dim ``T*C``."""
    b, t, c, h, w = normed.shape
    tokens = normed.reshape(b, t * c, h * w).transpose(0, 2, 1)
    out = attn(tokens)
    return out.transpose(0, 2, 1).reshape(b, t, c, h, w)


def dsta_forward(seq: Tensor, params: Dsta) -> Tensor:
    _check_seq(seq, params.extent)
    b, t, c, h, w = seq.shape
    n = params.norm(seq)
    parts = []
    if params.t_msa is not None:
        parts.append(t_msa(n, params.t_msa))
    if params.s_msa is not None:
        parts.append(s_msa(n, params.s_msa))
    mixed = parts[0] if len(parts) == 1 else nx.concat(parts, axis=2)
    fused = params.fuse(_frames(mixed)).reshape(b, t, c, h, w)
    return seq + fused


class TemporalTransformer(Module):
    """Sequence norm and temporal attention with a direct residual."""

    kind = StmuKind.TFORMER

    def __init__(self, extent: tuple[int, int, int, int], heads: int, rng: Rng, dtype=np.float32):
        t, c, h, w = extent
        self.extent = tuple(extent)
        self.norm = SequenceNorm(self.extent, dtype=dtype)
        self.t_msa = MultiHeadSelfAttention(h * w, heads, rng, dtype)

    def forward(self, seq: Tensor) -> Tensor:
        return temporal_transformer_forward(seq, self)


def temporal_transformer_forward(seq: Tensor, params: TemporalTransformer) -> Tensor:
    _check_seq(seq, params.extent)
    return seq + t_msa(params.norm(seq), params.t_msa)


# ---------------------------------------------------------------------------
# convolutional baselines
# ---------------------------------------------------------------------------

class Conv3d(Module):
    """3x3x3 convolution over (T, h, w), zero padded by one on each axis."""

    kind = StmuKind.CONV3D

    def __init__(self, channels: int, rng: Rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(channels * 27)
        self.weight = nx.Tensor(rng.uniform(-bound, bound, (channels, channels, 3, 3, 3), dtype), requires_grad=True)
        self.bias = nx.Tensor(rng.uniform(-bound, bound, (channels,), dtype), requires_grad=True)

    def forward(self, seq: Tensor) -> Tensor:
        return conv3d_forward(seq, self)


def conv3d_forward(seq: Tensor, params: Conv3d) -> Tensor:
    b, t, c, h, w = seq.shape
    if params.weight.shape[:2] != (c, c):
        raise nx.ShapeError(f"conv3d weight {params.weight.shape} does not match {c} channels")
    padded = nx.pad_axis(seq, 1, 1, 1)
    out = None
    for dt in range(3):
        window = _frames(padded[:, dt:dt + t])
        term = nx.conv2d(window, params.weight[:, :, dt], None, 1, 1, 1)
        out = term if out is None else out + term
    out = out + params.bias.reshape(1, c, 1, 1)
    return out.reshape(b, t, c, h, w)


class ConvLstm(Module):
    """Unidirectional convolutional LSTM with 3x3 gates and zero initial state.

    Gate order in the stacked convolution output is input, forget, output,
    candidate.
    """

    kind = StmuKind.CONVLSTM

    def __init__(self, channels: int, rng: Rng, dtype=np.float32):
        self.channels = channels
        self.gates = Conv2d(2 * channels, 4 * channels, 3, rng, padding=1, dtype=dtype)

    def forward(self, seq: Tensor) -> Tensor:
        return convlstm_forward(seq, self)


def convlstm_forward(seq: Tensor, params: ConvLstm) -> Tensor:
    b, t, c, h, w = seq.shape
    if c != params.channels:
        raise nx.ShapeError(f"ConvLSTM built for {params.channels} channels, got {c}")
    hidden = Tensor(np.zeros((b, c, h, w), dtype=seq.dtype))
    cell = hidden
    outs = []
    for step in range(t):
        z = params.gates(nx.concat([seq[:, step], hidden], axis=1))
        i = nx.sigmoid(z[:, :c])
        f = nx.sigmoid(z[:, c:2 * c])
        o = nx.sigmoid(z[:, 2 * c:3 * c])
        g = nx.tanh(z[:, 3 * c:])
        cell = f * cell + i * g
        hidden = o * nx.tanh(cell)
        outs.append(hidden.reshape(b, 1, c, h, w))
    return nx.concat(outs, axis=1)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_FORWARDS = {
    StmuKind.IDENTITY: (Identity, lambda s, p: s),
    StmuKind.CONV3D: (Conv3d, conv3d_forward),
    StmuKind.CONVLSTM: (ConvLstm, convlstm_forward),
    StmuKind.TFORMER: (TemporalTransformer, temporal_transformer_forward),
    StmuKind.DSTA: (Dsta, dsta_forward),
}


def stmu_apply(seq: Tensor, kind, params: Module) -> Tensor:
    kind = StmuKind.parse(kind)
    cls, fn = _FORWARDS[kind]
    if not isinstance(params, cls):
        raise TypeError(f"STMU kind {kind.value} needs {cls.__name__} parameters, got {type(params).__name__}")
    out = fn(seq, params)
    if out.shape != seq.shape:
        raise nx.ShapeError(f"STMU {kind.value} changed shape {seq.shape} -> {out.shape}")
    return out


def build_stmu(kind, extent: tuple[int, int, int, int], heads: int, rng: Rng,
               temporal: bool = True, spatial: bool = True, dtype=np.float32) -> Module:
    kind = StmuKind.parse(kind)
    c = extent[1]
    if kind is StmuKind.IDENTITY:
        return Identity()
    if kind is StmuKind.CONV3D:
        return Conv3d(c, rng, dtype)
    if kind is StmuKind.CONVLSTM:
        return ConvLstm(c, rng, dtype)
    if kind is StmuKind.TFORMER:
        return TemporalTransformer(extent, heads, rng, dtype)
    return Dsta(extent, heads, rng, temporal=temporal, spatial=spatial, dtype=dtype)
