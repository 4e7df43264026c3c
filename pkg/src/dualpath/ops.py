"""Neural-network primitives over :class:`dualpath.tensor.Tensor`.

Each fused primitive carries its own backward rule; composite operations
(attention) are assembled from tracked primitives so their gradients come
for free. Convolutions use zero same-padding and stride 1, which is what
shape-preserving residual insertion requires.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import ConfigError, ShapeError, Tensor, matmul

__all__ = [
    "linear",
    "gelu",
    "relu",
    "layer_norm",
    "softmax",
    "cross_entropy",
    "multi_head_attention",
    "conv2d",
    "depthwise_conv3d",
]

_INV_SQRT2 = np.float32(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = np.float32(1.0 / np.sqrt(2.0 * np.pi))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias broadcast over leading dimensions."""
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact error-function GeLU, ``x * Phi(x)`` (not the tanh fit)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return Tensor._from_op((xd * cdf).astype(np.float32), "gelu", (x,), bwd)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(
        np.maximum(xd, 0.0), "relu", (x,),
        lambda g: (g * (xd > 0.0),),
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match feature width {d}"
        )
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    gd = gamma.data

    def bwd(g):
        gx = g * gd
        # d/dx of (x - mu) / sqrt(var + eps), all axes fused.
        t1 = gx
        t2 = gx.mean(axis=-1, keepdims=True)
        t3 = (gx * xhat).mean(axis=-1, keepdims=True) * xhat
        dx = inv * (t1 - t2 - t3)
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return (dx.astype(np.float32), dgamma, dbeta)

    out = (xhat * gd + beta.data).astype(np.float32)
    return Tensor._from_op(out, "layer_norm", (x, gamma, beta), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._from_op(y, "softmax", (x,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood in stabilized log-sum-exp form.

    ``logits`` is ``[n_class]`` with an int label, or ``[batch, n_class]``
    with a sequence of labels.
    """
    squeeze = logits.ndim == 1
    ld = logits.data[None, :] if squeeze else logits.data
    if logits.ndim not in (1, 2):
        raise ShapeError(f"cross_entropy expects 1-D or 2-D logits, got {logits.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = ld.shape
    if lab.shape != (n,):
        raise ShapeError(f"labels shape {lab.shape} does not match batch {n}")
    if lab.min() < 0 or lab.max() >= c:
        raise ConfigError(
            f"label out of range: got {int(lab.min())}..{int(lab.max())} "
            f"for {c} classes"
        )
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    lse = np.log(e.sum(axis=1)) + m[:, 0]
    nll = lse - ld[np.arange(n), lab]
    loss = np.asarray(nll.mean(), dtype=np.float32)

    def bwd(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), lab] -= 1.0
        dl = (float(g) / n) * p
        return (dl[0] if squeeze else dl,)

    return Tensor._from_op(loss, "cross_entropy", (logits,), bwd)


def multi_head_attention(
    x: Tensor,
    w_q: Tensor, b_q: Tensor,
    w_k: Tensor, b_k: Tensor,
    w_v: Tensor, b_v: Tensor,
    w_o: Tensor, b_o: Tensor,
    heads: int,
):
    """Scaled dot-product attention over the token axis.

    ``x`` is ``[n, d]`` or ``[batch, n, d]``. Returns ``(out, attn)`` where
    ``attn`` holds the post-softmax attention probabilities with shape
    ``[..., heads, n, n]``; every attention row sums to one.
    """
    d = x.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    batched = x.ndim == 3
    if not batched:
        x = x.reshape((1,) + x.shape)
    bsz, n, _ = x.shape

    def split(t):
        # [B, n, d] -> [B, heads, n, dh]
        return t.reshape((bsz, n, heads, dh)).transpose((0, 2, 1, 3))

    q = split(linear(x, w_q, b_q))
    k = split(linear(x, w_k, b_k))
    v = split(linear(x, w_v, b_v))

    scores = matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # [B, heads, n, dh]
    merged = ctx.transpose((0, 2, 1, 3)).reshape((bsz, n, d))
    out = linear(merged, w_o, b_o)
    if not batched:
        out = out.reshape((n, d))
        attn = attn.reshape((heads, n, n))
    return out, attn


def _check_odd(extents, op):
    if any(e % 2 == 0 for e in extents):
        raise ShapeError(f"{op}: kernel extents must be odd, got {extents}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution with zero same-padding.

    A 4-D kernel ``[kh, kw, c_in, c_out]`` mixes channels (1x1 kernels are
    per-pixel linear maps); a 3-D kernel ``[kh, kw, c]`` runs depth-wise.
    ``x`` is ``[h, w, c]`` or ``[batch, h, w, c]``.
    """
    if stride != 1 or padding != "same":
        raise ConfigError("conv2d supports stride=1 with same padding only")
    depthwise = kernel.ndim == 3
    if kernel.ndim not in (3, 4):
        raise ShapeError(f"conv2d kernel must be 3-D or 4-D, got {kernel.shape}")
    kh, kw = kernel.shape[0], kernel.shape[1]
    _check_odd((kh, kw), "conv2d")
    c_in = kernel.shape[2]
    if x.shape[-1] != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    ph, pw = kh // 2, kw // 2
    xd = x.data if batched else x.data[None]
    bsz = xd.shape[0]
    xpad = np.zeros((bsz, h + 2 * ph, w + 2 * pw, c_in), dtype=np.float32)
    xpad[:, ph:ph + h, pw:pw + w, :] = xd
    kd = kernel.data

    c_out = c_in if depthwise else kernel.shape[3]
    out = np.zeros((bsz, h, w, c_out), dtype=np.float32)
    for dy in range(kh):
        for dx in range(kw):
            sl = xpad[:, dy:dy + h, dx:dx + w, :]
            if depthwise:
                out += sl * kd[dy, dx]
            else:
                out += sl @ kd[dy, dx]

    need_x, need_k = x.requires_grad, kernel.requires_grad

    def bwd(g):
        if not batched:
            g = g[None]
        gx = gk = None
        if need_k:
            gk = np.zeros_like(kd)
        if need_x:
            gxp = np.zeros_like(xpad)
        for dy in range(kh):
            for dx in range(kw):
                sl = xpad[:, dy:dy + h, dx:dx + w, :]
                if depthwise:
                    if need_k:
                        gk[dy, dx] = (sl * g).sum(axis=(0, 1, 2))
                    if need_x:
                        gxp[:, dy:dy + h, dx:dx + w, :] += g * kd[dy, dx]
                else:
                    if need_k:
                        gk[dy, dx] = np.tensordot(sl, g, axes=([0, 1, 2], [0, 1, 2]))
                    if need_x:
                        gxp[:, dy:dy + h, dx:dx + w, :] += g @ kd[dy, dx].T
        if need_x:
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
            if not batched:
                gx = gx[0]
        return (gx, gk)

    if not batched:
        out = out[0]
    result = Tensor._from_op(out, "conv2d", (x, kernel), bwd)
    if bias is not None:
        result = result + bias
    return result


def depthwise_conv3d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 3-D convolution over ``(t, h, w)`` with zero same-padding.

    ``x`` is ``[t, h, w, c]`` or ``[batch, t, h, w, c]``; the kernel is
    ``[kt, kh, kw, c]`` with odd extents and matching channel count.
    """
    if kernel.ndim != 4:
        raise ShapeError(f"depthwise_conv3d kernel must be 4-D, got {kernel.shape}")
    kt, kh, kw, c = kernel.shape
    _check_odd((kt, kh, kw), "depthwise_conv3d")
    if x.shape[-1] != c:
        raise ShapeError(
            f"depthwise_conv3d channel mismatch: input {x.shape} "
            f"vs kernel {kernel.shape}"
        )
    batched = x.ndim == 5
    if x.ndim not in (4, 5):
        raise ShapeError(f"depthwise_conv3d input must be 4-D or 5-D, got {x.shape}")
    t, h, w = x.shape[-4], x.shape[-3], x.shape[-2]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xd = x.data if batched else x.data[None]
    bsz = xd.shape[0]
    xpad = np.zeros((bsz, t + 2 * pt, h + 2 * ph, w + 2 * pw, c), dtype=np.float32)
    xpad[:, pt:pt + t, ph:ph + h, pw:pw + w, :] = xd
    kd = kernel.data

    out = np.zeros((bsz, t, h, w, c), dtype=np.float32)
    for dt in range(kt):
        for dy in range(kh):
            for dx in range(kw):
                out += xpad[:, dt:dt + t, dy:dy + h, dx:dx + w, :] * kd[dt, dy, dx]

    need_x, need_k = x.requires_grad, kernel.requires_grad

    def bwd(g):
        if not batched:
            g = g[None]
        gx = gk = None
        if need_k:
            gk = np.zeros_like(kd)
        if need_x:
            gxp = np.zeros_like(xpad)
        for dt in range(kt):
            for dy in range(kh):
                for dx in range(kw):
                    sl = xpad[:, dt:dt + t, dy:dy + h, dx:dx + w, :]
                    if need_k:
                        gk[dt, dy, dx] = (sl * g).sum(axis=(0, 1, 2, 3))
                    if need_x:
                        gxp[:, dt:dt + t, dy:dy + h, dx:dx + w, :] += g * kd[dt, dy, dx]
        if need_x:
            gx = gxp[:, pt:pt + t, ph:ph + h, pw:pw + w, :]
            if not batched:
                gx = gx[0]
        return (gx, gk)

    if not batched:
        out = out[0]
    return Tensor._from_op(out, "depthwise_conv3d", (x, kernel), bwd)
