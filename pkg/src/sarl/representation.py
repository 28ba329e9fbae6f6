"""Patch features, global pooling, label embeddings, and semantic fusion.

One image becomes a grid of patch features F (P x d_v) through a small
strided conv encoder, or arrives as a precomputed P x d_v grid. Global
spatial pooling compresses F into a single vector F_G, and fusing F_G
with a learnable label-embedding table gives one semantic-related
feature row per class, F_S (C x d_v). F, F_G and F_S are everything the
transport stage downstream needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ConfigError",
    "EncoderConfig",
    "EncoderParams",
    "FeatureMap",
    "LabelEmbeddings",
    "SelfAttentionParams",
    "FusionParams",
    "xavier_uniform",
    "init_encoder",
    "init_label_embeddings",
    "init_self_attention",
    "init_fusion",
    "encode",
    "self_attention",
    "global_spatial_pool",
    "fuse_semantic",
]


class ConfigError(ValueError):
    """Inputs or parameter shapes disagree with the configuration."""


@dataclass
class EncoderConfig:
    """Settings for the tiny conv encoder (or the passthrough mode).

    Each conv block is a 3x3 stride-2 convolution, so ``conv_blocks``
    halves the input resolution that many times; the result must land
    exactly on the ``grid_h`` x ``grid_w`` patch grid.
    """

    in_channels: int
    grid_h: int
    grid_w: int
    feature_dim: int
    conv_blocks: int = 2
    mode: str = "tiny-conv"

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"patch grid {self.grid_h}x{self.grid_w} must be >= 1x1")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim {self.feature_dim} must be >= 1")
        if self.mode not in ("tiny-conv", "precomputed"):
            raise ConfigError(f"unknown encoder mode {self.mode!r}")

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class EncoderParams:
    """Conv kernels and biases, one pair per block.

    Kernel i is stored flattened as (9 * c_in, feature_dim) to match
    :func:`sarl.tensor.conv2d`.
    """

    kernels: list
    biases: list


@dataclass
class FeatureMap:
    """Patch features F (P x d_v) plus the grid shape they came from."""

    f: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.f.shape[0] != self.h * self.w:
            raise ConfigError(
                f"{self.f.shape[0]} patch rows cannot tile a {self.h}x{self.w} grid")


@dataclass
class LabelEmbeddings:
    """One learnable d_t-dimensional row per class."""

    l: Tensor
    learnable: bool = True


@dataclass
class SelfAttentionParams:
    """Query/key/value projections, each d_v x d_v, sliced into heads."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    n_heads: int = 8

    def __post_init__(self):
        d_v = self.w_q.shape[0]
        if d_v % self.n_heads != 0:
            raise ConfigError(f"d_v={d_v} not divisible by {self.n_heads} heads")


@dataclass
class FusionParams:
    """Affine map from concat(F_G, label row) down to d_v."""

    weight: Tensor
    bias: Tensor


def xavier_uniform(rng, n_in, n_out, dtype=np.float64):
    limit = math.sqrt(6.0 / (n_in + n_out))
    return Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype))


def init_encoder(rng, cfg: EncoderConfig, dtype=np.float64) -> EncoderParams:
    kernels, biases = [], []
    c_in = cfg.in_channels
    for _ in range(cfg.conv_blocks):
        kernels.append(xavier_uniform(rng, 9 * c_in, cfg.feature_dim, dtype))
        biases.append(Tensor(np.zeros(cfg.feature_dim, dtype=dtype)))
        c_in = cfg.feature_dim
    return EncoderParams(kernels, biases)


def init_label_embeddings(rng, num_classes, label_dim, sigma=0.02,
                          dtype=np.float64) -> LabelEmbeddings:
    table = rng.normal(0.0, sigma, size=(num_classes, label_dim)).astype(dtype)
    return LabelEmbeddings(Tensor(table))


def init_self_attention(rng, d_v, n_heads=8, dtype=np.float64) -> SelfAttentionParams:
    return SelfAttentionParams(
        xavier_uniform(rng, d_v, d_v, dtype),
        xavier_uniform(rng, d_v, d_v, dtype),
        xavier_uniform(rng, d_v, d_v, dtype),
        n_heads=n_heads,
    )


def init_fusion(rng, d_v, label_dim, dtype=np.float64) -> FusionParams:
    return FusionParams(
        xavier_uniform(rng, d_v + label_dim, d_v, dtype),
        Tensor(np.zeros(d_v, dtype=dtype)),
    )


def encode(x, cfg: EncoderConfig, params: EncoderParams = None) -> FeatureMap:
    """Turn an (H, W, C) image, or a precomputed P x d_v grid, into patch features."""
    if cfg.mode == "precomputed":
        f = x if isinstance(x, Tensor) else Tensor(x)
        want = (cfg.num_patches, cfg.feature_dim)
        if f.shape != want:
            raise ConfigError(f"precomputed features {f.shape}, expected {want}")
        return FeatureMap(f, cfg.grid_h, cfg.grid_w)

    if params is None:
        raise ConfigError("tiny-conv mode needs encoder params")
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[-1] != cfg.in_channels:
        raise ConfigError(
            f"image has {h.shape[-1]} channels, config says {cfg.in_channels}")
    last = cfg.conv_blocks - 1
    for i, (kern, bias) in enumerate(zip(params.kernels, params.biases)):
        h = T.conv2d(h, kern, bias)
        if i != last:
            h = T.relu(h)
    if h.shape[:2] != (cfg.grid_h, cfg.grid_w):
        raise ConfigError(
            f"encoder produced a {h.shape[0]}x{h.shape[1]} grid, "
            f"config says {cfg.grid_h}x{cfg.grid_w}")
    f = T.reshape(h, (cfg.num_patches, cfg.feature_dim))
    return FeatureMap(f, cfg.grid_h, cfg.grid_w)


def self_attention(fm: FeatureMap, p: SelfAttentionParams) -> FeatureMap:
    """Scaled dot-product self-attention over patches, heads concatenated.

    Per head: softmax(Q Kt / sqrt(d)) V with d = d_v / n_heads. There is
    no output projection, residual, or layer norm; head outputs are
    concatenated back to width d_v.
    """
    f = fm.f
    d_v = f.shape[1]
    if p.w_q.shape != (d_v, d_v):
        raise ConfigError(f"attention weights {p.w_q.shape} vs d_v={d_v}")
    d = d_v // p.n_heads
    q = T.matmul(f, p.w_q)
    k = T.matmul(f, p.w_k)
    v = T.matmul(f, p.w_v)
    heads = []
    for i in range(p.n_heads):
        lo, hi = i * d, (i + 1) * d
        qh = T.slice_axis(q, 1, lo, hi)
        kh = T.slice_axis(k, 1, lo, hi)
        vh = T.slice_axis(v, 1, lo, hi)
        logits = T.div(T.matmul(qh, T.transpose(kh)), math.sqrt(d))
        attn = T.softmax(logits, axis=1)
        heads.append(T.matmul(attn, vh))
    out = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    return FeatureMap(out, fm.h, fm.w)


def global_spatial_pool(fm: FeatureMap, mode="avg") -> Tensor:
    """Columnwise mean (or max) over patches: F (P x d_v) -> F_G (d_v)."""
    if mode == "avg":
        return T.mean(fm.f, axis=0)
    if mode == "max":
        return T.max_reduce(fm.f, axis=0)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def fuse_semantic(f_g: Tensor, emb, p: FusionParams) -> Tensor:
    """Per-class affine fusion: row c = Linear(concat(F_G, l_c)).

    F_G acts as a shared prompt prepended to every label row; the output
    is the semantic-related feature table F_S (C x d_v).
    """
    table = emb.l if isinstance(emb, LabelEmbeddings) else emb
    num_classes = table.shape[0]
    stacked = T.concat([T.tile_rows(f_g, num_classes), table], axis=1)
    return T.add(T.matmul(stacked, p.weight), p.bias)
