"""Transformer and discriminator building blocks over explicit weight dicts.

Every block is a pure function ``f(x, ..., weights)``; matching ``init_*``
functions create the weight dicts. Weights are plain ``dict[str, Tensor]``
so they flatten directly into checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

Weights = dict[str, Tensor]


# -- initialisation -----------------------------------------------------------

def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# -- staircase mask -----------------------------------------------------------

@dataclass(frozen=True)
class StaircaseMask:
    """Token i may attend to token k iff floor(k/n) <= floor(i/n)."""

    n_per_block: int
    num_blocks: int
    allowed: np.ndarray

    @property
    def size(self) -> int:
        return self.n_per_block * self.num_blocks

    def additive(self, dtype=np.float64) -> np.ndarray:
        return np.where(self.allowed, 0.0, -np.inf).astype(dtype)

    def truncated(self, blocks: int) -> "StaircaseMask":
        return build_staircase_mask(self.n_per_block, blocks)


def build_staircase_mask(n_per_block: int, num_blocks: int) -> StaircaseMask:
    if n_per_block < 1 or num_blocks < 1:
        raise ValueError(f"staircase mask needs n_per_block >= 1 and num_blocks >= 1, got {n_per_block}, {num_blocks}")
    block = np.arange(n_per_block * num_blocks) // n_per_block
    allowed = block[None, :] <= block[:, None]
    allowed.setflags(write=False)
    return StaircaseMask(n_per_block, num_blocks, allowed)


# -- rotary embedding -----------------------------------------------------------

@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.head_dim % 2:
            raise ValueError(f"head_dim {self.head_dim} must be even for rotary pairing")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@lru_cache(maxsize=64)
def _pair_swap(head_dim: int) -> np.ndarray:
    # x @ R maps (x0, x1) -> (-x1, x0) within each consecutive pair
    r = np.zeros((head_dim, head_dim))
    for j in range(0, head_dim, 2):
        r[j + 1, j] = -1.0
        r[j, j + 1] = 1.0
    return r


def rope_angles(positions: Sequence[int], head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Angles (seq, head_dim // 2): pos * base^(-2j/head_dim)."""
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rope_apply(x: Tensor, positions: Sequence[int], base: float = 10000.0) -> Tensor:
    """Rotate consecutive coordinate pairs of x (seq, heads, head_dim) by position."""
    if x.ndim != 3:
        raise ShapeError(f"rope: expected (seq, heads, head_dim), got {x.shape}")
    seq, _, head_dim = x.shape
    if head_dim % 2:
        raise ShapeError(f"rope: head_dim must be even, got {head_dim}")
    if len(positions) != seq:
        raise ShapeError(f"rope: {len(positions)} positions for sequence length {seq}")
    angles = np.repeat(rope_angles(positions, head_dim, base), 2, axis=1)[:, None, :]
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    swapped = ad.matmul(x, _pair_swap(head_dim).astype(x.dtype))
    return x * cos + swapped * sin


# -- normalisation ----------------------------------------------------------------

def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm: gain shape {gain.shape} does not match last axis of {x.shape}")
    ms = ad.mean(x * x, axis=-1, keepdims=True)
    return x / ad.sqrt(ms + eps) * gain


# -- attention ----------------------------------------------------------------------

def init_attention(config: AttentionConfig, rng: np.random.Generator, dtype=np.float32) -> Weights:
    e = config.embed_dim
    return {
        "wq": uniform_fan_in(rng, (e, e), e, dtype),
        "wk": uniform_fan_in(rng, (e, e), e, dtype),
        "wv": uniform_fan_in(rng, (e, e), e, dtype),
        "wo": zeros((e, e), dtype),
    }


def mmhsa(
    x: Tensor,
    mask: StaircaseMask | None,
    config: AttentionConfig,
    weights: Weights,
    positions: Sequence[int] | None = None,
    return_weights: bool = False,
):
    """Masked multi-head self-attention with rotary queries/keys.

    x is (K, embed_dim). Disallowed positions get -inf before the softmax, so
    their attention weight is exactly zero and every row sums to one.
    """
    if x.ndim != 2 or x.shape[1] != config.embed_dim:
        raise ShapeError(f"mmhsa: expected (K, {config.embed_dim}), got {x.shape}")
    k_len = x.shape[0]
    if mask is not None and mask.size != k_len:
        raise ShapeError(f"mmhsa: mask of size {mask.size} for sequence length {k_len}")
    h, d = config.num_heads, config.head_dim
    if positions is None:
        positions = range(k_len)
    positions = list(positions)

    q = rope_apply((x @ weights["wq"]).reshape(k_len, h, d), positions, config.rope_base)
    k = rope_apply((x @ weights["wk"]).reshape(k_len, h, d), positions, config.rope_base)
    v = (x @ weights["wv"]).reshape(k_len, h, d)

    q = q.transpose(1, 0, 2)
    k = k.transpose(1, 2, 0)
    v = v.transpose(1, 0, 2)
    scores = (q @ k) * (1.0 / np.sqrt(d))
    additive = mask.additive(x.dtype) if mask is not None else None
    attn = ad.softmax_masked(scores, additive)
    z = (attn @ v).transpose(1, 0, 2).reshape(k_len, config.embed_dim)
    out = z @ weights["wo"]
    if return_weights:
        return out, attn
    return out


def attention_logits(x: Tensor, config: AttentionConfig, weights: Weights, positions: Sequence[int]) -> np.ndarray:
    """Pre-mask, pre-softmax scores (heads, K, K) for the given positions."""
    k_len = x.shape[0]
    h, d = config.num_heads, config.head_dim
    q = rope_apply((x @ weights["wq"]).reshape(k_len, h, d), positions, config.rope_base)
    k = rope_apply((x @ weights["wk"]).reshape(k_len, h, d), positions, config.rope_base)
    return np.einsum("qhd,khd->hqk", q.data, k.data) / np.sqrt(d)


# -- LLaMA-style block ------------------------------------------------------------------

def mlp_hidden_dim(embed_dim: int) -> int:
    hidden = int(np.ceil(8 * embed_dim / 3))
    return 8 * ((hidden + 7) // 8)


def init_llama_block(config: AttentionConfig, rng: np.random.Generator, dtype=np.float32) -> Weights:
    e = config.embed_dim
    hidden = mlp_hidden_dim(e)
    w = {f"attn.{k}": v for k, v in init_attention(config, rng, dtype).items()}
    w.update(
        {
            "norm1": ones((e,), dtype),
            "norm2": ones((e,), dtype),
            "mlp.w1": uniform_fan_in(rng, (e, hidden), e, dtype),
            "mlp.w3": uniform_fan_in(rng, (e, hidden), e, dtype),
            "mlp.w2": zeros((hidden, e), dtype),
        }
    )
    return w


def llama_block(
    x: Tensor,
    mask: StaircaseMask | None,
    config: AttentionConfig,
    weights: Weights,
    positions: Sequence[int] | None = None,
    eps: float = 1e-6,
) -> Tensor:
    attn_w = {k[5:]: v for k, v in weights.items() if k.startswith("attn.")}
    h = x + mmhsa(rmsnorm(x, weights["norm1"], eps), mask, config, attn_w, positions)
    n = rmsnorm(h, weights["norm2"], eps)
    gated = ad.silu(n @ weights["mlp.w1"]) * (n @ weights["mlp.w3"])
    return h + gated @ weights["mlp.w2"]


# -- patch discriminator -----------------------------------------------------------------

DISC_STAGES = 4


def init_patch_discriminator(in_channels: int, width: int, rng: np.random.Generator, dtype=np.float32) -> Weights:
    chans = [in_channels, width, 2 * width, 4 * width, 1]
    w: Weights = {}
    for i in range(DISC_STAGES):
        fan_in = chans[i] * 16
        w[f"conv{i}.w"] = uniform_fan_in(rng, (chans[i + 1], chans[i], 4, 4), fan_in, dtype)
        w[f"conv{i}.b"] = zeros((chans[i + 1],), dtype)
    return w


def patch_discriminator(image: Tensor, weights: Weights, slope: float = 0.2) -> Tensor:
    """Four stride-2 4x4 convolutions; returns a (N, 1, H/16, W/16) logit map.

    A 3-D (C, H, W) input yields a (1, H/16, W/16) map.
    """
    squeeze = image.ndim == 3
    x = image.reshape((1,) + image.shape) if squeeze else image
    if x.ndim != 4:
        raise ShapeError(f"discriminator: expected (C,H,W) or (N,C,H,W), got {image.shape}")
    if x.shape[2] < 16 or x.shape[3] < 16:
        raise ShapeError(f"discriminator: input {image.shape} smaller than 16x16")
    for i in range(DISC_STAGES):
        x = ad.conv2d(x, weights[f"conv{i}.w"], weights[f"conv{i}.b"], stride=2, padding=1)
        if i < DISC_STAGES - 1:
            x = ad.leaky_relu(x, slope)
    return x.reshape(x.shape[1:]) if squeeze else x
