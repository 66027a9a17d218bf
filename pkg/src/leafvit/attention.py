"""Token mixing: separable self-attention, kernel linear attention, FFN, patch unfold/fold.

Token matrices are laid out ``[..., k, d]``: any leading batch axes, then
``k`` tokens of width ``d``. Softmax over context scores runs along the
token axis of each sequence independently.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .errors import DimensionError
from .layers import GroupNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor

KERNEL_DENOM_FLOOR = 1e-6


@dataclass
class SeparableAttentionWeights:
    w_I: Tensor  # [d, 1] token -> context score logit
    w_K: Tensor  # [d, d]
    w_V: Tensor  # [d, d]
    w_O: Tensor  # [d, d]
    b_I: Tensor | None = None
    b_K: Tensor | None = None
    b_V: Tensor | None = None
    b_O: Tensor | None = None

    @property
    def dim(self) -> int:
        return self.w_K.shape[0]

    def validate(self) -> None:
        d = self.dim
        expected = {"w_I": (d, 1), "w_K": (d, d), "w_V": (d, d), "w_O": (d, d),
                    "b_I": (1,), "b_K": (d,), "b_V": (d,), "b_O": (d,)}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None and value.shape != expected[f.name]:
                raise DimensionError(f"{f.name} has shape {value.shape}, expected {expected[f.name]}")


def _project(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    return ops.linear(x, w, b)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ops.transpose(x, axes)


def context_scores(x: Tensor, w: SeparableAttentionWeights) -> Tensor:
    """Softmax over tokens of the latent-node projection, shape ``[..., k, 1]``."""
    return ops.softmax(_project(x, w.w_I, w.b_I), axis=-2)


def separable_self_attention(x: Tensor, w: SeparableAttentionWeights) -> Tensor:
    """Linear-cost attention through a single latent node.

    Context scores weight the key projections into one context vector, which
    gates the ReLU'd value projection of every token before the output
    transform.
    """
    if x.ndim < 2 or x.shape[-1] != w.dim:
        raise DimensionError(f"tokens {x.shape} do not match attention width {w.dim}")
    w.validate()
    cs = context_scores(x, w)
    keys = _project(x, w.w_K, w.b_K)
    cv = ops.matmul(_swap_last(cs), keys)  # [..., 1, d]
    gated = ops.mul(ops.relu(_project(x, w.w_V, w.b_V)), cv)
    return _project(gated, w.w_O, w.b_O)


def kernel_linear_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``phi(Q) (phi(K)^T V)`` normalized per query row, with ``phi = relu``.

    ``phi(K)^T V`` is formed first so the cost stays linear in token count.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"q {q.shape}, k {k.shape}, v {v.shape} are not aligned")
    fq, fk = ops.relu(q), ops.relu(k)
    fk_t = _swap_last(fk)
    kv = ops.matmul(fk_t, v)  # [..., d, dv]
    ksum = ops.sum(fk, axis=-2, keepdims=True)  # [..., 1, d]
    numerator = ops.matmul(fq, kv)
    denominator = ops.matmul(fq, _swap_last(ksum))  # [..., n, 1]
    return ops.div(numerator, ops.clamp_min(denominator, KERNEL_DENOM_FLOOR))


def feed_forward(
    x: Tensor,
    w1: Tensor,
    w2: Tensor,
    b1: Tensor | None = None,
    b2: Tensor | None = None,
    drop_p: float = 0.0,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    activation: str = "silu",
    residual: bool = True,
) -> Tensor:
    """Two-layer position-wise MLP; returns ``x + branch(x)`` unless ``residual`` is off."""
    if w1.shape[0] != x.shape[-1] or w2.shape != (w1.shape[1], x.shape[-1]):
        raise DimensionError(f"FFN weights {w1.shape}, {w2.shape} do not fit tokens {x.shape}")
    hidden = ops.linear(x, w1, b1)
    hidden = ops.silu(hidden) if activation == "silu" else ops.relu(hidden)
    branch = ops.dropout(ops.linear(hidden, w2, b2), drop_p, mode, rng)
    return ops.add(x, branch) if residual else branch


def unfold_patches(x: Tensor, ph: int, pw: int) -> Tensor:
    """``[B, d, H, W] -> [B, ph*pw, (H/ph)*(W/pw), d]``.

    Pixels sharing a within-patch offset form one token sequence.
    """
    b, d, h, w = x.shape
    if h % ph or w % pw:
        raise DimensionError(f"spatial {h}x{w} not divisible by patch {ph}x{pw}")
    nh, nw = h // ph, w // pw
    t = ops.reshape(x, (b, d, nh, ph, nw, pw))
    t = ops.transpose(t, (0, 3, 5, 2, 4, 1))
    return ops.reshape(t, (b, ph * pw, nh * nw, d))


def fold_patches(tokens: Tensor, ph: int, pw: int, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`unfold_patches`."""
    b, p, n, d = tokens.shape
    nh, nw = h // ph, w // pw
    if p != ph * pw or n != nh * nw:
        raise DimensionError(f"tokens {tokens.shape} do not fold to {h}x{w} with patch {ph}x{pw}")
    t = ops.reshape(tokens, (b, ph, pw, nh, nw, d))
    t = ops.transpose(t, (0, 5, 3, 1, 4, 2))
    return ops.reshape(t, (b, d, h, w))


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------
class SeparableSelfAttention(Module):
    def __init__(self, rng, dim: int, bias: bool = True):
        super().__init__()
        self.w_I = Parameter(trunc_normal(rng, (dim, 1)))
        self.b_I = Parameter(np.zeros(1, np.float32)) if bias else None
        self.w_K = Parameter(trunc_normal(rng, (dim, dim)))
        self.b_K = Parameter(np.zeros(dim, np.float32)) if bias else None
        self.w_V = Parameter(trunc_normal(rng, (dim, dim)))
        self.b_V = Parameter(np.zeros(dim, np.float32)) if bias else None
        self.w_O = Parameter(trunc_normal(rng, (dim, dim)))
        self.b_O = Parameter(np.zeros(dim, np.float32)) if bias else None

    @property
    def weights(self) -> SeparableAttentionWeights:
        return SeparableAttentionWeights(self.w_I, self.w_K, self.w_V, self.w_O,
                                         self.b_I, self.b_K, self.b_V, self.b_O)

    def forward(self, x, **_):
        return separable_self_attention(x, self.weights)


class FeedForward(Module):
    def __init__(self, rng, dim: int, mult: float = 2.0, drop_p: float = 0.0, activation: str = "silu"):
        super().__init__()
        hidden = int(dim * mult)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)
        self.drop_p = drop_p
        self.activation = activation

    def forward(self, x, rng=None, residual: bool = True, **_):
        return feed_forward(x, self.fc1.weight, self.fc2.weight, self.fc1.bias, self.fc2.bias,
                            self.drop_p, self.mode, rng, self.activation, residual)


class TransformerLayer(Module):
    """Pre-norm layer: ``x + attn(norm(x))`` then ``x + ffn(norm(x))``."""

    def __init__(self, rng, dim: int, ffn_mult: float = 2.0, drop_p: float = 0.0):
        super().__init__()
        self.norm1 = GroupNorm(dim, 1, channels_last=True)
        self.attn = SeparableSelfAttention(rng, dim)
        self.norm2 = GroupNorm(dim, 1, channels_last=True)
        self.ffn = FeedForward(rng, dim, ffn_mult, drop_p)

    def forward(self, x, rng=None, **_):
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.ffn(self.norm2(x), rng=rng, residual=False))
