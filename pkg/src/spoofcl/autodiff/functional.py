"""Fused layer primitives with hand-written backward passes."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_result


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, parents, backward, "linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    out = _softmax(x.data)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes (leading axes batch)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scale = np.asarray(1.0 / math.sqrt(q.shape[-1]), dtype=q.dtype)
    qs = q.data * scale
    kt = np.swapaxes(k.data, -1, -2)
    probs = _softmax(np.matmul(qs, kt))
    out = np.matmul(probs, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(probs, -1, -2), g) if v.requires_grad else None
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
        gq = np.matmul(gs, k.data) * scale if q.requires_grad else None
        gk = np.matmul(np.swapaxes(gs, -1, -2), qs) if k.requires_grad else None
        return gq, gk, gv

    return make_result(out, (q, k, v), backward, "attention")


def batch_norm_1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over axis 0 of a (batch, features) tensor.

    In training mode the running buffers are updated in place (unbiased
    variance, as in the usual convention).
    """
    if x.ndim != 2:
        raise ValueError(f"batch_norm_1d expects (batch, features), got {x.shape}")
    n = x.shape[0]
    if training:
        if n < 2:
            raise ValueError("batch_norm_1d in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu = running_mean
        xc = x.data - mu
        var = running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gb = g.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            if training:
                gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
            else:
                gx = gh * inv
        return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def cosine_similarity(a: Tensor, b, eps: float = 1e-8) -> Tensor:
    """``a.b / max(|a||b|, eps)`` along the last axis."""
    b = as_tensor(b, a)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"cosine_similarity: lengths {a.shape[-1]} and {b.shape[-1]} differ")
    if eps <= 0:
        raise ValueError("cosine_similarity eps must be positive")
    dot = (a.data * b.data).sum(axis=-1)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    prod = na * nb
    guarded = prod <= eps
    denom = np.where(guarded, eps, prod).astype(a.dtype)
    out = (dot / denom).astype(a.dtype)

    def backward(g):
        g = g[..., None]
        den = denom[..., None]
        cos = out[..., None]
        free = ~guarded[..., None]
        ga = gb = None
        if a.requires_grad:
            na2 = np.where(free, na[..., None] ** 2, 1.0)
            ga = g * (b.data / den - np.where(free, cos * a.data / na2, 0.0))
            ga = ga.astype(a.dtype, copy=False)
        if b.requires_grad:
            nb2 = np.where(free, nb[..., None] ** 2, 1.0)
            gb = g * (a.data / den - np.where(free, cos * b.data / nb2, 0.0))
            gb = gb.astype(b.dtype, copy=False)
        return ga, gb

    return make_result(out, (a, b), backward, "cosine_similarity")
