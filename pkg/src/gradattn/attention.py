"""Multi-head self-attention over the tap-token sequence and the encoder stack.

Tokens are ``Tensor[B, T, d]``; in GradAttn ``T`` is the number of backbone
taps (five). Three positional variants are supported: none, a learnable
additive table applied once at the encoder input, and rotary embeddings
applied to queries and keys inside every attention layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .layers import LinearParams, NormParams, layernorm, linear
from .tensor import Tensor, record

PE_VARIANTS = ("nope", "learnable", "rope")
ROPE_BASE = 10000.0

TokenSequence = Tensor  # [B, T, d]


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 3
    heads: int = 8
    dim: int = 256
    ffn_dim: int = 512
    pe_variant: str = "nope"
    num_tokens: int = 5

    def __post_init__(self):
        if self.depth < 1:
            raise ContractError(f"encoder depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.dim % self.heads:
            raise ContractError(f"embed dim {self.dim} not divisible by {self.heads} heads")
        if self.pe_variant not in PE_VARIANTS:
            raise ContractError(f"pe_variant must be one of {PE_VARIANTS}, got {self.pe_variant!r}")
        if self.pe_variant == "rope" and self.head_dim % 2:
            raise ContractError(f"RoPE needs an even head dim, got {self.head_dim}")
        if self.ffn_dim < 1 or self.num_tokens < 1:
            raise ContractError("ffn_dim and num_tokens must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class AttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams

    @classmethod
    def init(cls, rng, dim, name="attn"):
        return cls(*(LinearParams.init(rng, dim, dim, name=f"{name}.{p}") for p in "qkvo"))


@dataclass
class EncoderBlockParams:
    ln1: NormParams
    attn: AttentionParams
    ln2: NormParams
    ffn1: LinearParams
    ffn2: LinearParams


@dataclass
class EncoderParams:
    blocks: list[EncoderBlockParams]
    pe_table: Tensor | None = field(default=None)


def init_encoder(rng: np.random.Generator, cfg: EncoderConfig, name: str = "encoder") -> EncoderParams:
    blocks = []
    for i in range(cfg.depth):
        pre = f"{name}.block{i}"
        blocks.append(EncoderBlockParams(
            ln1=NormParams.init(cfg.dim, batch_norm=False, name=f"{pre}.ln1"),
            attn=AttentionParams.init(rng, cfg.dim, name=f"{pre}.attn"),
            ln2=NormParams.init(cfg.dim, batch_norm=False, name=f"{pre}.ln2"),
            ffn1=LinearParams.init(rng, cfg.dim, cfg.ffn_dim, name=f"{pre}.ffn1", relu_facing=True),
            ffn2=LinearParams.init(rng, cfg.ffn_dim, cfg.dim, name=f"{pre}.ffn2"),
        ))
    table = None
    if cfg.pe_variant == "learnable":
        # small random start so positions are distinguishable from step 0
        table = Tensor(rng.normal(0.0, 0.02, size=(cfg.num_tokens, cfg.dim)), requires_grad=True,
                       name=f"{name}.pe.table")
    return EncoderParams(blocks, table)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / sqrt(d_h)) v per head. Returns (output, attention weights)."""
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.mul(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), scale)
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def rope_angles(num_positions: int, head_dim: int, base: float = ROPE_BASE, positions=None) -> np.ndarray:
    """Angle table ``[T, head_dim/2]`` with entry (pos, j) = pos * base^(-2j/head_dim)."""
    pos = np.arange(num_positions, dtype=np.float64) if positions is None else np.asarray(positions, np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.outer(pos, inv_freq)


def apply_rope(x: Tensor, positions=None, base: float = ROPE_BASE) -> Tensor:
    """Rotate each (even, odd) coordinate pair of ``x[..., T, d_h]`` by its position angle."""
    d_h = x.shape[-1]
    if d_h % 2:
        raise ContractError(f"RoPE needs an even head dim, got {d_h}")
    ang = rope_angles(x.shape[-2], d_h, base, positions)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bwd(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return record("rope", out, (x,), bwd)


def apply_learnable_pe(z: TokenSequence, table: Tensor) -> TokenSequence:
    if table.shape != z.shape[1:]:
        raise DimensionError(f"PE table {table.shape} does not match tokens {z.shape[1:]}")
    return T.add(z, table)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def multi_head_attention(z: TokenSequence, p: AttentionParams, heads: int, rope: bool = False,
                         return_weights: bool = False):
    d = z.shape[-1]
    if d % heads:
        raise ContractError(f"embed dim {d} not divisible by {heads} heads")
    q = _split_heads(linear(z, p.q.weight, p.q.bias), heads)
    k = _split_heads(linear(z, p.k.weight, p.k.bias), heads)
    v = _split_heads(linear(z, p.v.weight, p.v.bias), heads)
    if rope:
        q, k = apply_rope(q), apply_rope(k)
    ctx, weights = scaled_dot_attention(q, k, v)
    out = linear(_merge_heads(ctx), p.o.weight, p.o.bias)
    return (out, weights) if return_weights else out


def encoder_block(z: TokenSequence, p: EncoderBlockParams, cfg: EncoderConfig) -> TokenSequence:
    h = layernorm(z, p.ln1.gamma, p.ln1.beta, p.ln1.eps)
    z = T.add(z, multi_head_attention(h, p.attn, cfg.heads, rope=cfg.pe_variant == "rope"))
    h = layernorm(z, p.ln2.gamma, p.ln2.beta, p.ln2.eps)
    h = linear(T.relu(linear(h, p.ffn1.weight, p.ffn1.bias)), p.ffn2.weight, p.ffn2.bias)
    return T.add(z, h)


def encoder_forward(z: TokenSequence, cfg: EncoderConfig, params: EncoderParams) -> TokenSequence:
    """Pre-norm encoder: {LN, MHA, add; LN, FFN, add} repeated ``cfg.depth`` times."""
    if z.ndim != 3 or z.shape[-1] != cfg.dim:
        raise DimensionError(f"encoder expects [B, T, {cfg.dim}], got {z.shape}")
    if cfg.pe_variant == "learnable":
        z = apply_learnable_pe(z, params.pe_table)
    for block in params.blocks:
        z = encoder_block(z, block, cfg)
    return z
