"""CNN and dense building blocks with hand-written backward passes.

All layers are functions of ``(input, params, mode)``. Batch norm in train mode
is the one exception that mutates state: it updates the running statistics
held in :class:`NormParams`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, get_default_dtype, record

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- parameter containers and init ----------------------------------------------

def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(get_default_dtype())


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(get_default_dtype())


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ContractError(f"conv weight must be 4-D, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh < 1 or kw < 1 or self.stride < 1 or self.padding < 0:
            raise ContractError(f"invalid conv geometry k={kh}x{kw} stride={self.stride} pad={self.padding}")

    @classmethod
    def init(cls, rng, in_ch, out_ch, k, stride=1, padding=0, bias=False, name=""):
        w = Tensor(he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k), requires_grad=True,
                   name=f"{name}.weight")
        b = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias") if bias else None
        return cls(w, b, stride, padding)


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor | None = None
    running_var: Tensor | None = None
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, ch: int, batch_norm: bool = True, name: str = "", eps: float | None = None):
        gamma = Tensor(np.ones(ch), requires_grad=True, name=f"{name}.gamma")
        beta = Tensor(np.zeros(ch), requires_grad=True, name=f"{name}.beta")
        if not batch_norm:
            return cls(gamma, beta, eps=LN_EPS if eps is None else eps)
        return cls(
            gamma, beta,
            running_mean=Tensor(np.zeros(ch), name=f"{name}.running_mean"),
            running_var=Tensor(np.ones(ch), name=f"{name}.running_var"),
            eps=BN_EPS if eps is None else eps,
        )


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor | None = field(default=None)

    @classmethod
    def init(cls, rng, in_dim, out_dim, name="", relu_facing=False):
        if relu_facing:
            w = he_normal(rng, (out_dim, in_dim), in_dim)
        else:
            w = xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim)
        return cls(
            Tensor(w, requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.bias"),
        )


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


# -- conv2d ---------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    b, c = xp.shape[:2]
    # (B, C, Ho, Wo, kh, kw) -> (B*Ho*Wo, C*kh*kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _conv2d_backward(g, cols, w, x_shape, stride, padding, need_x):
    """Input, weight and bias gradients of a zero-padded cross-correlation."""
    b, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    g_mat = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g_mat.T @ cols).reshape(w.shape)
    gb = g_mat.sum(axis=0)
    gx = None
    if need_x:
        # (B, C*kh*kw, Ho*Wo): spatial axes stay innermost for the scatter below
        dcols = (w.reshape(o, -1).T @ g.reshape(b, o, ho * wo)).reshape(b, c, kh, kw, ho, wo)
        dxp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                    dcols[:, :, i, j]
                )
        gx = dxp[:, :, padding : padding + h, padding : padding + wd]
    return gx, gw, gb


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    x = as_tensor(x)
    w = p.weight
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W], got {x.shape}")
    b, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci} ({x.shape} vs {w.shape})")
    s, pad = p.stride, p.padding
    ho, wo = conv_output_size(h, kh, s, pad), conv_output_size(wd, kw, s, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: non-positive output {ho}x{wo} for input {x.shape}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, s, ho, wo)
    out = (cols @ w.data.reshape(o, -1).T).reshape(b, ho, wo, o)
    if p.bias is not None:
        out = out + p.bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    inputs = (x, w) if p.bias is None else (x, w, p.bias)

    def bwd(g):
        gx, gw, gb = _conv2d_backward(g, cols, w.data, x.shape, s, pad, x.requires_grad)
        return (gx, gw) if p.bias is None else (gx, gw, gb)

    return record("conv2d", out, inputs, bwd)


# -- pooling --------------------------------------------------------------------

def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> tuple[Tensor, np.ndarray]:
    """Windowed max. Returns the output and the flat in-window argmax per output cell.

    Ties go to the first window element in row-major order.
    """
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    b, c, h, wd = x.shape
    if kernel > h + 2 * padding or kernel > wd + 2 * padding:
        raise ContractError(f"maxpool kernel {kernel} larger than padded input {h}x{wd} (pad {padding})")
    ho, wo = conv_output_size(h, kernel, stride, padding), conv_output_size(wd, kernel, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    win = win.reshape(b, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += np.where(
                arg == idx, g, 0
            )
        return (dxp[:, :, padding : padding + h, padding : padding + wd],)

    return record("maxpool2d", np.ascontiguousarray(out), (x,), bwd), arg


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_avg_pool expects [B,C,H,W] with H,W >= 1, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).astype(g.dtype),)

    return record("global_avg_pool", out, (x,), bwd)


# -- dense --------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1] or (bias is not None and bias.shape != (weight.shape[0],)):
        raise DimensionError(
            f"linear: input {x.shape} vs weight {weight.shape}"
            + ("" if bias is None else f" and bias {bias.shape}")
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    n_out, n_in = weight.shape

    def bwd(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, n_in)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, bwd)


# -- normalization ----------------------------------------------------------------

def batchnorm2d(x: Tensor, p: NormParams, training: bool) -> Tensor:
    """Per-channel batch norm over (B, H, W).

    Train mode normalizes with batch statistics and updates the running stats
    (unbiased variance) with ``p.momentum``; eval mode uses running stats only.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)

    if training:
        if x.shape[0] < 2:
            raise ContractError("batchnorm2d in train mode needs a batch of at least 2")
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + p.eps)
        xhat = (x.data - mu) * inv_std
        if p.running_mean is not None:
            m = p.momentum
            unbiased = var.reshape(c) * (n / max(n - 1, 1))
            p.running_mean.data = ((1 - m) * p.running_mean.data + m * mu.reshape(c)).astype(p.running_mean.dtype)
            p.running_var.data = ((1 - m) * p.running_var.data + m * unbiased).astype(p.running_var.dtype)

        def bwd(g):
            gxhat = g * gamma
            gx = None
            if x.requires_grad:
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std / n * (n * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        rm = p.running_mean.data.reshape(1, c, 1, 1)
        inv_std = 1.0 / np.sqrt(p.running_var.data.reshape(1, c, 1, 1) + p.eps)
        xhat = (x.data - rm) * inv_std

        def bwd(g):
            return g * gamma * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (gamma * xhat + beta).astype(x.dtype)
    return record("batchnorm2d", out, (x, p.gamma, p.beta), bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = inv_std / d * (
            d * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layernorm", out, (x, gamma, beta), bwd)


# -- loss -------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    b, k = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ContractError(f"cross_entropy: targets must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def bwd(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / b),)

    return record("cross_entropy", loss, (logits,), bwd)
