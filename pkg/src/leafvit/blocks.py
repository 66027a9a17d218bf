"""Composite blocks: the inverted-residual bottleneck and the MobileViTV2 block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import TransformerLayer, fold_patches, unfold_patches
from .errors import ConfigError, DimensionError
from .layers import Conv2d, ConvBNAct, GroupNorm, Module, Sequential
from .tensor import Tensor, make_rng


@dataclass(frozen=True)
class BottleneckBlockCfg:
    in_ch: int
    out_ch: int
    stride: int = 1
    expand_ratio: float = 2.0

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.expand_ratio <= 0:
            raise ConfigError("expand_ratio must be positive")

    @property
    def mid_ch(self) -> int:
        # expansion is taken from the input width
        return max(1, int(round(self.in_ch * self.expand_ratio)))

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


@dataclass(frozen=True)
class MobileViTV2BlockCfg:
    channels: int
    attn_dim: int
    depth: int
    patch: tuple[int, int] = (2, 2)
    ffn_mult: float = 2.0

    def __post_init__(self):
        if self.attn_dim < 1 or self.depth < 1:
            raise ConfigError("attn_dim and depth must be >= 1")


class BottleneckBlock(Module):
    """1x1 expand -> 3x3 depthwise (strided) -> 1x1 project, plus identity skip when shapes allow."""

    def __init__(self, cfg: BottleneckBlockCfg, rng=None):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        self.cfg = cfg
        mid = cfg.mid_ch
        self.expand = ConvBNAct(rng, cfg.in_ch, mid, 1)
        self.dw = ConvBNAct(rng, mid, mid, 3, stride=cfg.stride, groups=mid)
        self.project = ConvBNAct(rng, mid, cfg.out_ch, 1, act=None)

    def branch(self, x: Tensor) -> Tensor:
        return self.project(self.dw(self.expand(x)))

    def forward(self, x, **_):
        if x.shape[1] != self.cfg.in_ch:
            raise DimensionError(f"bottleneck expects {self.cfg.in_ch} channels, got {x.shape[1]}")
        out = self.branch(x)
        return ops.add(out, x) if self.cfg.has_skip else out


class MobileViTV2Block(Module):
    """Local depthwise/pointwise representation, patch-token transformer, projection back."""

    def __init__(self, cfg: MobileViTV2BlockCfg, rng=None):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        self.cfg = cfg
        ch, d = cfg.channels, cfg.attn_dim
        self.local_dw = ConvBNAct(rng, ch, ch, 3, groups=ch)
        self.local_pw = Conv2d(rng, ch, d, 1)
        self.transformer = Sequential(*[TransformerLayer(rng, d, cfg.ffn_mult) for _ in range(cfg.depth)])
        self.norm = GroupNorm(d, 1, channels_last=True)
        self.project = ConvBNAct(rng, d, ch, 1, act=None)

    def forward(self, x, rng=None, **_):
        if x.shape[1] != self.cfg.channels:
            raise DimensionError(f"MobileViTV2 block expects {self.cfg.channels} channels, got {x.shape[1]}")
        h, w = x.shape[2:]
        ph, pw = self.cfg.patch
        y = self.local_pw(self.local_dw(x))
        hp, wp = math.ceil(h / ph) * ph, math.ceil(w / pw) * pw
        if (hp, wp) != (h, w):
            y = ops.pad2d(y, 0, hp - h, 0, wp - w)
        tokens = unfold_patches(y, ph, pw)
        tokens = self.transformer(tokens, rng=rng)
        tokens = self.norm(tokens)
        y = fold_patches(tokens, ph, pw, hp, wp)
        if (hp, wp) != (h, w):
            y = ops.crop2d(y, h, w)
        return self.project(y)


def _with_weights(block: Module, weights: dict[str, np.ndarray] | None, mode: str) -> Module:
    if weights is not None:
        block.load_arrays(weights)
    ops._check_mode(mode)
    return block.train(mode == "train")


def bottleneck_forward(x: Tensor, cfg: BottleneckBlockCfg, weights: dict[str, np.ndarray] | None = None,
                       mode: str = "eval") -> Tensor:
    """Functional entry point: build the block, load ``weights`` by name, run it."""
    return _with_weights(BottleneckBlock(cfg), weights, mode)(x)


def mobilevitv2_block_forward(x: Tensor, cfg: MobileViTV2BlockCfg, weights: dict[str, np.ndarray] | None = None,
                              mode: str = "eval", rng=None) -> Tensor:
    return _with_weights(MobileViTV2Block(cfg), weights, mode)(x, rng=rng)
