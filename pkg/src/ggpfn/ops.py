"""The differentiable operator set used by the network.

Layout is channel-first without a batch axis: ``[C, H, W]`` for 2D maps and
``[C, D, H, W]`` for 3D maps. Convolutions are im2col followed by a single
``[K, C*taps] @ [C*taps, N]`` product.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import DepthError, ShapeError
from .tensor import Tensor, make_result

BCE_EPS = 1e-7


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def _reduce(g, shape):
        return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)

    return make_result(out, (a, b), lambda g: (_reduce(g, a.shape), _reduce(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = np.asarray(ga.sum()).reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.asarray(gb.sum()).reshape(b.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),), "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- convolution

def _tap_slices(taps, out_shape, stride):
    return (slice(None),) + tuple(
        slice(t, t + s * (o - 1) + 1, s) for t, o, s in zip(taps, out_shape, stride)
    )


def _zero_pad(x, pads):
    """Zero padding of the trailing axes; ``pads`` gives one width per padded axis."""
    lead = x.ndim - len(pads)
    out = np.zeros(x.shape[:lead] + tuple(n + 2 * p for n, p in zip(x.shape[lead:], pads)), dtype=x.dtype)
    out[(slice(None),) * lead + tuple(slice(p, p + n) for n, p in zip(x.shape[lead:], pads))] = x
    return out


def _im2col(xp, kshape, out_shape, stride):
    """``[C * prod(kshape), prod(out_shape)]`` matrix of input windows."""
    st = xp.strides
    shape = (xp.shape[0],) + tuple(kshape) + tuple(out_shape)
    strides = (st[0],) + st[1:] + tuple(a * s for a, s in zip(st[1:], stride))
    win = np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)
    return win.reshape(xp.shape[0] * int(np.prod(kshape)), -1)


def _conv_forward(xp, w, out_shape, stride):
    cols = _im2col(xp, w.shape[2:], out_shape, stride)
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape((w.shape[0],) + tuple(out_shape)), cols


def _conv_backward(g, cols, xp_shape, w, out_shape, stride):
    K, C = w.shape[:2]
    kshape = w.shape[2:]
    g2 = g.reshape(K, -1)
    dw = (g2 @ cols.T).reshape(w.shape)
    dcols = (w.reshape(K, -1).T @ g2).reshape((C,) + tuple(kshape) + tuple(out_shape))
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    for taps in itertools.product(*(range(k) for k in kshape)):
        dxp[_tap_slices(taps, out_shape, stride)] += dcols[(slice(None),) + taps]
    return dxp, dw


def _bias_term(bias, K, ndim, dtype):
    if bias is None:
        return 0
    if bias.shape != (K,):
        raise ShapeError(f"bias shape {bias.shape} does not match {K} output channels")
    return bias.data.reshape((K,) + (1,) * ndim)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2D convolution with zero same-padding (odd square kernels).

    With ``stride=2`` the output has extents ``ceil(H/2), ceil(W/2)``.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [K,C,k,k], got {x.shape}, {kernel.shape}")
    K, C, kh, kw = kernel.shape
    if C != x.shape[0]:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernel expects {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel extents must be odd")
    ph, pw = kh // 2, kw // 2
    H, W = x.shape[1:]
    out_shape = (-(-H // stride), -(-W // stride))
    xp = _zero_pad(x.data, (ph, pw))
    out, cols = _conv_forward(xp, kernel.data, out_shape, (stride, stride))
    out = out + _bias_term(bias, K, 2, out.dtype)

    def backward(g):
        dxp, dw = _conv_backward(g, cols, xp.shape, kernel.data, out_shape, (stride, stride))
        dx = dxp[:, ph:ph + H, pw:pw + W]
        db = g.sum(axis=(1, 2)) if bias is not None else None
        return dx, dw, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv2d")


def conv3d_dvalid(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """3D convolution, valid along depth (D -> D-2) and same-padded in H/W."""
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d_dvalid expects [C,D,H,W] and [K,C,3,3,3], got {x.shape}, {kernel.shape}")
    K, C, kd, kh, kw = kernel.shape
    if (kd, kh, kw) != (3, 3, 3):
        raise ShapeError("conv3d_dvalid: kernel must be 3x3x3")
    if C != x.shape[0]:
        raise ShapeError(f"conv3d_dvalid: input has {x.shape[0]} channels, kernel expects {C}")
    D, H, W = x.shape[1:]
    if D < 3:
        raise DepthError(f"conv3d_dvalid needs depth >= 3, got {D}")
    out_shape = (D - 2, H, W)
    xp = _zero_pad(x.data, (0, 1, 1))
    out, cols = _conv_forward(xp, kernel.data, out_shape, (1, 1, 1))
    out = out + _bias_term(bias, K, 3, out.dtype)

    def backward(g):
        dxp, dw = _conv_backward(g, cols, xp.shape, kernel.data, out_shape, (1, 1, 1))
        db = g.sum(axis=(1, 2, 3)) if bias is not None else None
        return dxp[:, :, 1:1 + H, 1:1 + W], dw, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv3d_dvalid")


def pointwise_conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 (or 1x1x1) convolution: channel mixing with kernel ``[K, C]``."""
    K, C = kernel.shape
    if C != x.shape[0]:
        raise ShapeError(f"pointwise_conv: input has {x.shape[0]} channels, kernel expects {C}")
    spatial = x.shape[1:]
    x2 = x.data.reshape(C, -1)
    out = (kernel.data @ x2).reshape((K,) + spatial)
    out = out + _bias_term(bias, K, len(spatial), out.dtype)

    def backward(g):
        g2 = g.reshape(K, -1)
        dx = (kernel.data.T @ g2).reshape(x.shape)
        dw = g2 @ x2.T
        db = g2.sum(axis=1) if bias is not None else None
        return dx, dw, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "pointwise_conv")


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel ``[C_in, K, 2, 2]``.

    ``out[k, 2i+a, 2j+b] = sum_c x[c, i, j] * kernel[c, k, a, b]``; windows
    never overlap, so each output pixel sees exactly one input pixel.
    """
    if stride != 2 or kernel.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise ShapeError("transposed_conv2d supports only 2x2 kernels with stride 2")
    C, K = kernel.shape[:2]
    if x.ndim != 3 or x.shape[0] != C:
        raise ShapeError(f"transposed_conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    _, H, W = x.shape
    x2 = x.data.reshape(C, H * W)
    w2 = kernel.data.reshape(C, K * 4)
    y = (w2.T @ x2).reshape(K, 2, 2, H, W)
    out = y.transpose(0, 3, 1, 4, 2).reshape(K, 2 * H, 2 * W)
    out = out + _bias_term(bias, K, 2, out.dtype)

    def backward(g):
        g5 = g.reshape(K, H, 2, W, 2).transpose(0, 2, 4, 1, 3).reshape(K * 4, H * W)
        dx = (w2 @ g5).reshape(C, H, W)
        dw = (x2 @ g5.T).reshape(C, K, 2, 2)
        db = g.sum(axis=(1, 2)) if bias is not None else None
        return dx, dw, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "transposed_conv2d")


# ---------------------------------------------------------------- shape ops

def max_pool(x: Tensor, window: Sequence[int]) -> Tensor:
    """Non-overlapping max pooling over the non-channel axes.

    Gradient goes to the first maximal element of each window.
    """
    window = tuple(int(k) for k in window)
    spatial = x.shape[1:]
    if len(window) != len(spatial):
        raise ShapeError(f"max_pool: window {window} does not match spatial rank of {x.shape}")
    for n, k in zip(spatial, window):
        if n % k:
            raise ShapeError(f"max_pool: extent {n} not divisible by window {k}")
    C = x.shape[0]
    out_sp = tuple(n // k for n, k in zip(spatial, window))
    split = (C,) + tuple(v for pair in zip(out_sp, window) for v in pair)
    r = len(spatial)
    perm = (0,) + tuple(1 + 2 * i for i in range(r)) + tuple(2 + 2 * i for i in range(r))
    blocks = x.data.reshape(split).transpose(perm).reshape((C,) + out_sp + (-1,))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        inv = np.argsort(perm)
        permuted = tuple(split[p] for p in perm)
        return (gb.reshape(permuted).transpose(inv).reshape(x.shape),)

    return make_result(out, (x,), backward, "max_pool")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial extents {a.shape[1:]} and {b.shape[1:]} differ")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return make_result(out, (a, b), lambda g: (g[:ca], g[ca:]), "concat_channels")


def center_crop(x: Tensor, target: Sequence[int]) -> Tensor:
    """Keep the centered window of extents ``target``.

    ``target`` may list every axis or only the non-channel axes. The window
    starts at ``(src - tgt) // 2`` on each axis.
    """
    target = tuple(int(t) for t in target)
    if len(target) == x.ndim - 1:
        target = (x.shape[0],) + target
    if len(target) != x.ndim:
        raise ShapeError(f"center_crop: target {target} has wrong rank for {x.shape}")
    if any(t > s for t, s in zip(target, x.shape)):
        raise ShapeError(f"center_crop: target {target} larger than source {x.shape}")
    sl = tuple(slice((s - t) // 2, (s - t) // 2 + t) for s, t in zip(x.shape, target))
    if target == x.shape:
        return x
    out = x.data[sl].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        return (dx,)

    return make_result(out, (x,), backward, "center_crop")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def central_slice(x: Tensor) -> Tensor:
    """``[C, D, H, W]`` with odd D -> ``[C, H, W]`` at depth index (D-1)/2."""
    C, D, H, W = x.shape
    return reshape(center_crop(x, (1, H, W)), (C, H, W))


# ---------------------------------------------------------------- sampling

def bilinear_weights(coords: np.ndarray, hm: int, wm: int):
    """Corner indices and weights for sampling an ``hm x wm`` grid.

    A normalized coordinate u in [0, 1] maps to the continuous pixel
    coordinate ``u * hm - 0.5`` clamped to ``[0, hm - 1]`` (same for v).
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    y = np.clip(coords[:, 0] * hm - 0.5, 0.0, hm - 1)
    x = np.clip(coords[:, 1] * wm - 0.5, 0.0, wm - 1)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, hm - 1)
    x1 = np.minimum(x0 + 1, wm - 1)
    wy = y - y0
    wx = x - x0
    idx = (y0 * wm + x0, y0 * wm + x1, y1 * wm + x0, y1 * wm + x1)
    wts = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    return idx, wts


def bilinear_sample(fmap: Tensor, coords) -> Tensor:
    """Sample ``fmap [C, Hm, Wm]`` at normalized ``(u, v)`` coords -> ``[C, n]``."""
    C, hm, wm = fmap.shape
    idx, wts = bilinear_weights(coords, hm, wm)
    flat = fmap.data.reshape(C, hm * wm)
    dtype = fmap.dtype
    wts = tuple(w.astype(dtype) for w in wts)
    out = sum(flat[:, i] * w for i, w in zip(idx, wts))

    def backward(g):
        dflat = np.zeros_like(flat)
        for i, w in zip(idx, wts):
            np.add.at(dflat, (slice(None), i), g * w)
        return (dflat.reshape(fmap.shape),)

    return make_result(out, (fmap,), backward, "bilinear_sample")


# ---------------------------------------------------------------- loss

def bce_loss(p: Tensor, g, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross entropy with ``p`` clamped to ``[eps, 1 - eps]``."""
    gd = g.data if isinstance(g, Tensor) else np.asarray(g)
    if gd.shape != p.shape:
        raise ShapeError(f"bce_loss: prediction {p.shape} vs target {gd.shape}")
    gd = gd.astype(p.dtype, copy=False)
    pc = np.clip(p.data, eps, 1 - eps)
    n = p.data.size
    loss = -(gd * np.log(pc) + (1 - gd) * np.log(1 - pc)).sum() / n
    inside = (p.data >= eps) & (p.data <= 1 - eps)

    def backward(gr):
        dp = (-gd / pc + (1 - gd) / (1 - pc)) / n * inside
        return (gr * dp,)

    return make_result(np.asarray(loss, dtype=p.dtype), (p,), backward, "bce_loss")
