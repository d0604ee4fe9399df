"""Encoder, multi-scale fusion, STMU stack and skip-connected decoder.

Data flow for an input ``[B, T, Cin, H, W]``::

    frames [B*T, Cin, H, W]
      -> encode            e_1 .. e_L, halving resolution from level 2 on
      -> msst_fuse         pool every level to e_L's size, 1x1 to C_L,
                           concat, 1x1, atrous pyramid pooling
      -> STMU x depth      on [B, T, C_L, h, w]
      -> decode            up-conv, concat skip e_i, ConvNormReLU, ...
      -> 1x1 head, sigmoid [B, T, 1, H, W]
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .layers import Conv2d, ConvNormReLU, ConvTranspose2d, Module
from .numerics import Rng, Tensor
from .stmu import StmuKind, build_stmu, stmu_apply


@dataclass
class ModelConfig:
    levels: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)
    input_channels: int = 1
    stmu_kind: StmuKind = StmuKind.DSTA
    stmu_depth: int = 2
    atrous_rates: tuple[int, ...] = (1, 2, 4)
    heads: int = 4
    threshold: float = 0.5
    # attention embeddings depend on the sequence extent, so it is fixed at build time
    seq_len: int = 6
    image_size: tuple[int, int] = (64, 64)
    groups: int = 4
    multiscale: bool = True
    temporal_attention: bool = True
    spatial_attention: bool = True
    decoder: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.atrous_rates = tuple(int(r) for r in self.atrous_rates)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.stmu_kind = StmuKind.parse(self.stmu_kind)
        self.validate()

    @property
    def bottleneck_size(self) -> tuple[int, int]:
        f = 2 ** (self.levels - 1)
        return self.image_size[0] // f, self.image_size[1] // f

    @property
    def stmu_extent(self) -> tuple[int, int, int, int]:
        h, w = self.bottleneck_size
        return (self.seq_len, self.channels[-1], h, w)

    def validate(self) -> None:
        if self.levels < 1 or len(self.channels) != self.levels:
            raise ValueError(f"channels {self.channels} must list one width per level ({self.levels})")
        if any(c % self.groups for c in self.channels):
            raise ValueError(f"every channel width must be divisible by {self.groups} norm groups")
        f = 2 ** (self.levels - 1)
        if any(s % f for s in self.image_size):
            raise ValueError(f"image size {self.image_size} not divisible by {f}")
        if not self.atrous_rates or any(b <= a for a, b in zip(self.atrous_rates, self.atrous_rates[1:])):
            raise ValueError(f"atrous rates {self.atrous_rates} must be nonempty and strictly increasing")
        h, w = self.bottleneck_size
        if self.multiscale and (self.atrous_rates[0] < 1 or 2 * self.atrous_rates[-1] > min(h, w)):
            raise ValueError(f"atrous rate {self.atrous_rates[-1]} too large for a {h}x{w} bottleneck")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 1 <= self.stmu_depth <= 8:
            raise ValueError("stmu_depth must be in 1..8")
        if self.seq_len < 1:
            raise ValueError("seq_len must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stmu_kind"] = self.stmu_kind.value
        d["channels"] = list(self.channels)
        d["atrous_rates"] = list(self.atrous_rates)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class FeaturePyramid(list):
    """Per-frame encoder outputs ``e_1 .. e_L`` (finest first)."""


class PyramidPooling(Module):
    """Parallel atrous 3x3 branches plus an image-level branch, projected by 1x1."""

    def __init__(self, channels: int, rates, rng: Rng, dtype=np.float32):
        self.rates = tuple(rates)
        self.branches = [Conv2d(channels, channels, 3, rng, padding=r, dilation=r, dtype=dtype) for r in self.rates]
        self.image_pool = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.project = Conv2d((len(self.rates) + 1) * channels, channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return pyramid_pool(x, self)


def pyramid_pool(feature: Tensor, params: PyramidPooling) -> Tensor:
    n, c, h, w = feature.shape
    for r in params.rates:
        if 2 * r > min(h, w):
            raise nx.ShapeError(f"atrous rate {r} too large for {h}x{w} features")
    outs = [branch(feature) for branch in params.branches]
    g = params.image_pool(nx.adaptive_avg_pool2d(feature, 1, 1))
    outs.append(nx.broadcast_spatial(g, h, w))
    return params.project(nx.concat(outs, axis=1))


class MultiScaleFusion(Module):
    def __init__(self, channels, rates, rng: Rng, dtype=np.float32):
        top = channels[-1]
        self.lateral = [Conv2d(c, top, 1, rng, dtype=dtype) for c in channels[:-1]]
        self.fuse = Conv2d(len(channels) * top, top, 1, rng, dtype=dtype)
        self.pyramid = PyramidPooling(top, rates, rng, dtype)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        return msst_fuse(pyramid, self)


def msst_fuse(pyramid: FeaturePyramid, params: MultiScaleFusion) -> Tensor:
    last = pyramid[-1]
    h, w = last.shape[2:]
    maps = [lat(nx.adaptive_avg_pool2d(e, h, w)) for lat, e in zip(params.lateral, pyramid[:-1])]
    maps.append(last)
    fused = params.fuse(nx.concat(maps, axis=1))
    return params.pyramid(fused)


class DecoderStage(Module):
    def __init__(self, cin: int, cout: int, rng: Rng, groups: int, dtype=np.float32):
        self.up = ConvTranspose2d(cin, cout, 2, 2, rng, dtype)
        self.block = ConvNormReLU(2 * cout, cout, rng, groups, dtype)

    def forward(self, z: Tensor, skip: Tensor) -> Tensor:
        up = self.up(z)
        if up.shape != skip.shape:
            raise nx.ShapeError(f"upsampled {up.shape} does not match skip {skip.shape}")
        return self.block(nx.concat([skip, up], axis=1))


class McsdNet(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = Rng(seed)
        ch = cfg.channels
        self.encoder = [ConvNormReLU(cfg.input_channels if i == 0 else ch[i - 1], ch[i], rng, cfg.groups, dtype)
                        for i in range(cfg.levels)]
        self.fusion = MultiScaleFusion(ch, cfg.atrous_rates, rng, dtype) if cfg.multiscale else None
        self.stmu = [build_stmu(cfg.stmu_kind, cfg.stmu_extent, cfg.heads, rng,
                                cfg.temporal_attention, cfg.spatial_attention, dtype)
                     for _ in range(cfg.stmu_depth)]
        if cfg.decoder:
            self.decoder = [DecoderStage(ch[i + 1], ch[i], rng, cfg.groups, dtype)
                            for i in reversed(range(cfg.levels - 1))]
            self.head = Conv2d(ch[0], 1, 1, rng, dtype=dtype)
        else:
            self.decoder = []
            self.head = Conv2d(ch[-1], 1, 1, rng, dtype=dtype)
        self.dtype = np.dtype(dtype)

    def named_parameters(self, prefix: str = ""):
        seen = set()
        for name, p in super().named_parameters(prefix):
            if id(p) in seen:
                raise RuntimeError(f"parameter {name} registered twice")
            seen.add(id(p))
            yield name, p

    # -- stages -----------------------------------------------------------------
    def encode(self, frames: Tensor) -> FeaturePyramid:
        return encode(frames, self)

    def bottleneck(self, pyramid: FeaturePyramid) -> Tensor:
        return pyramid[-1] if self.fusion is None else self.fusion(pyramid)

    def mix(self, seq: Tensor) -> Tensor:
        for unit in self.stmu:
            seq = stmu_apply(seq, unit.kind, unit)
        return seq

    def decode(self, bottleneck: Tensor, pyramid: FeaturePyramid) -> Tensor:
        return decode(bottleneck, pyramid, self)

    def logits(self, x: Tensor) -> Tensor:
        if x.ndim != 5:
            raise nx.ShapeError(f"expected [B, T, C, H, W], got {x.shape}")
        b, t, cin, h, w = x.shape
        pyr = self.encode(x.reshape(b * t, cin, h, w))
        z = self.bottleneck(pyr)
        c, hh, ww = z.shape[1:]
        z = self.mix(z.reshape(b, t, c, hh, ww)).reshape(b * t, c, hh, ww)
        return self.decode(z, pyr).reshape(b, t, 1, h, w)

    def forward(self, x: Tensor) -> Tensor:
        return nx.sigmoid(self.logits(x))


def encode(frames: Tensor, model: McsdNet) -> FeaturePyramid:
    cfg = model.config
    f = 2 ** (cfg.levels - 1)
    if frames.shape[2] % f or frames.shape[3] % f:
        raise nx.ShapeError(f"frame size {frames.shape[2:]} not divisible by {f}")
    pyr = FeaturePyramid()
    z = frames
    for i, block in enumerate(model.encoder):
        if i > 0:
            z = nx.maxpool2d(z, 2)
        z = block(z)
        pyr.append(z)
    return pyr


def decode(bottleneck: Tensor, pyramid: FeaturePyramid, model: McsdNet) -> Tensor:
    """Logits ``[N, 1, H, W]`` from the bottleneck and the encoder skips."""
    z = bottleneck
    if not model.decoder:
        f = 2 ** (model.config.levels - 1)
        return nx.upsample_nearest(model.head(z), f)
    for stage, skip in zip(model.decoder, reversed(pyramid[:-1])):
        z = stage(z, skip)
    return model.head(z)


def forward(x: Tensor, model: McsdNet) -> Tensor:
    return model(x)


def predict_mask(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Binary uint8 mask: 1 where ``p >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    return (p >= threshold).astype(np.uint8)
