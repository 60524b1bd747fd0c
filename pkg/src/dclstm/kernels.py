"""Convolution, pooling and deformable sampling kernels.

All kernels are channels-last and accept optional leading batch axes, so
``conv2d`` applied to a ``[T, H, W, C]`` video convolves every frame with
the same weights.  Each kernel returns a :class:`~dclstm.autodiff.Variable`
and records its own backward rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from math import floor, prod

import numpy as np

from .autodiff import Variable, apply, as_variable
from .tensor import ShapeError


@dataclass
class _ConvParams:
    weight: Variable
    bias: Variable | None = None
    stride: tuple[int, ...] | None = None
    padding: tuple[int, ...] | None = None

    ndim = 0

    def __post_init__(self):
        self.weight = as_variable(self.weight)
        if self.bias is not None:
            self.bias = as_variable(self.bias)
        nd = self.ndim
        if self.weight.value.ndim != nd + 2:
            raise ShapeError(f"weight must have rank {nd + 2}, got {self.weight.shape}")
        self.stride = _tuple(self.stride or 1, nd)
        self.padding = _tuple(self.padding or 0, nd)
        if any(k % 2 == 0 for k in self.kernel_size):
            raise ShapeError(f"kernel extents must be odd, got {self.kernel_size}")
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ShapeError("stride must be >= 1 and padding >= 0")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def kernel_size(self) -> tuple[int, ...]:
        return self.weight.shape[: self.ndim]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[-2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[-1]

    def variables(self) -> list[Variable]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class Conv2DParams(_ConvParams):
    """``weight[kh, kw, c_in, c_out]``, optional ``bias[c_out]``."""

    ndim = 2


class Conv3DParams(_ConvParams):
    """``weight[kt, kh, kw, c_in, c_out]``, optional ``bias[c_out]``."""

    ndim = 3


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}")
    return v


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    span = n + 2 * p - k
    if span < 0 or span % s:
        raise ShapeError(f"non-integral output extent: ({n} + 2*{p} - {k}) / {s} + 1")
    return span // s + 1


def _window(tap, stride, out) -> tuple[slice, ...]:
    return tuple(slice(t, t + s * (o - 1) + 1, s) for t, s, o in zip(tap, stride, out))


def _split_shape(x: np.ndarray, nd: int, what: str):
    if x.ndim < nd + 1:
        raise ShapeError(f"{what} needs at least {nd + 1} axes, got shape {x.shape}")
    return x.shape[: x.ndim - nd - 1], x.shape[x.ndim - nd - 1: -1], x.shape[-1]


# -- regular convolution -------------------------------------------------------


def _conv(x: Variable, p: _ConvParams) -> Variable:
    nd = p.ndim
    xv, wv = x.value, p.weight.value
    lead, spatial, cin = _split_shape(xv, nd, "conv input")
    if cin != p.in_channels:
        raise ShapeError(f"input has {cin} channels, weight expects {p.in_channels}")
    ksz, cout = p.kernel_size, p.out_channels
    out = tuple(_out_extent(n, k, s, q) for n, k, s, q in zip(spatial, ksz, p.stride, p.padding))
    pad = [(0, 0)] * len(lead) + [(q, q) for q in p.padding] + [(0, 0)]
    xp = np.pad(xv, pad) if any(p.padding) else xv
    rows = prod(lead) * prod(out)
    # Loop over all kernel axes but the last; the last is unrolled into the
    # column matrix so each matmul contracts kl * c_in values.
    kl = ksz[-1]
    heads = list(product(*(range(k) for k in ksz[:-1])))
    lead_sl = (Ellipsis,)

    def cols(head):
        parts = [xp[lead_sl + _window(head + (j,), p.stride, out) + (slice(None),)]
                 for j in range(kl)]
        return np.concatenate(parts, axis=-1).reshape(rows, kl * cin)

    def wmat(head):
        return wv[head].reshape(kl * cin, cout)

    y = np.zeros((rows, cout), dtype=np.result_type(xv, wv))
    for head in heads:
        y += cols(head) @ wmat(head)
    if p.bias is not None:
        y += p.bias.value
    y = y.reshape(lead + out + (cout,))

    inputs = [x, p.weight] + ([p.bias] if p.bias is not None else [])

    def back(g):
        g2 = g.reshape(rows, cout)
        gw = np.zeros_like(wv) if p.weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for head in heads:
            if gw is not None:
                gw[head] = (cols(head).T @ g2).reshape(kl, cin, cout)
            if gxp is not None:
                d = (g2 @ wmat(head).T).reshape(lead + out + (kl, cin))
                for j in range(kl):
                    gxp[lead_sl + _window(head + (j,), p.stride, out) + (slice(None),)] += d[..., j, :]
        gx = None
        if gxp is not None:
            crop = tuple(slice(q, q + n) for q, n in zip(p.padding, spatial))
            gx = gxp[lead_sl + crop + (slice(None),)]
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(g2.sum(axis=0) if p.bias.requires_grad else None)
        return grads

    return apply(y, inputs, back, f"conv{nd}d")


def conv2d(x, p: Conv2DParams) -> Variable:
    """2D convolution of ``x[..., h, w, c_in]`` with zero padding."""
    return _conv(as_variable(x), p)


def conv3d(x, p: Conv3DParams) -> Variable:
    """3D convolution of ``x[..., t, h, w, c_in]`` with zero padding."""
    return _conv(as_variable(x), p)


# -- pooling -----------------------------------------------------------------


def _pool(x: Variable, window, stride, nd: int, mode: str, truncate: bool) -> Variable:
    xv = x.value
    lead, spatial, c = _split_shape(xv, nd, f"{mode}pool input")
    window = _tuple(window, nd)
    stride = _tuple(stride if stride is not None else window, nd)
    out = []
    for n, k, s in zip(spatial, window, stride):
        if n < k:
            raise ShapeError(f"window {k} larger than extent {n}")
        if (n - k) % s and not truncate:
            raise ShapeError(f"extent {n} not divisible into windows of {k} with stride {s}")
        out.append((n - k) // s + 1)
    out = tuple(out)
    taps = list(product(*(range(k) for k in window)))

    def view(tap):
        return (Ellipsis,) + _window(tap, stride, out) + (slice(None),)

    if mode == "avg":
        y = sum(xv[view(t)] for t in taps) / xv.dtype.type(len(taps))

        def back(g):
            gx = np.zeros_like(xv)
            share = g / xv.dtype.type(len(taps))
            for t in taps:
                gx[view(t)] += share
            return (gx,)
    else:
        y = xv[view(taps[0])].copy()
        arg = np.zeros(y.shape, dtype=np.int32)
        for k, t in enumerate(taps[1:], 1):
            v = xv[view(t)]
            # strict > keeps the first maximum in scan order
            better = v > y
            y[better] = v[better]
            arg[better] = k

        def back(g):
            gx = np.zeros_like(xv)
            for k, t in enumerate(taps):
                gx[view(t)] += g * (arg == k)
            return (gx,)

    return apply(np.ascontiguousarray(y), (x,), back, f"{mode}pool{nd}d")


def maxpool3d(x, window, stride=None, truncate: bool = False) -> Variable:
    """Per-channel window maximum over ``x[..., t, h, w, c]``.

    Partial windows raise unless ``truncate`` is set, in which case the
    trailing remainder is dropped.
    """
    return _pool(as_variable(x), window, stride, 3, "max", truncate)


def avgpool2d(x, window, stride=None, truncate: bool = False) -> Variable:
    """Per-channel window mean over ``x[..., h, w, c]``."""
    return _pool(as_variable(x), window, stride, 2, "avg", truncate)


# -- bilinear sampling and deformable convolution -----------------------------


def bilinear_sample(x, p) -> np.ndarray:
    """Read ``x[h, w, c]`` at real coordinate ``p = (py, px)``.

    Uses the tent kernel ``g(a, b) = max(0, 1 - |a - b|)`` per axis; pixels
    outside the image contribute zero.
    """
    x = np.asarray(x)
    h, w, c = x.shape
    py, px = float(p[0]), float(p[1])
    out = np.zeros(c, dtype=np.float64)
    y0, x0 = floor(py), floor(px)
    for qy in (y0, y0 + 1):
        for qx in (x0, x0 + 1):
            g = max(0.0, 1 - abs(qy - py)) * max(0.0, 1 - abs(qx - px))
            if g > 0 and 0 <= qy < h and 0 <= qx < w:
                out += g * x[qy, qx]
    return out.astype(x.dtype)


def base_grid(p: Conv2DParams, out_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Regular-grid sampling coordinates ``[h_out, w_out, taps]`` before offsets."""
    (kh, kw), (sh, sw), (ph, pw) = p.kernel_size, p.stride, p.padding
    ho, wo = out_hw
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    gy = np.arange(ho)[:, None, None] * sh - ph + ky.reshape(1, 1, -1)
    gx = np.arange(wo)[None, :, None] * sw - pw + kx.reshape(1, 1, -1)
    return np.broadcast_to(gy, (ho, wo, kh * kw)), np.broadcast_to(gx, (ho, wo, kh * kw))


def deformable_conv2d(x, p: Conv2DParams, offsets) -> Variable:
    """Deformable convolution with per-location, per-tap ``(dy, dx)`` offsets.

    ``offsets[..., h_out, w_out, 2*kh*kw]`` is tap-major with ``dy, dx``
    interleaved.  Gradients flow to ``x``, the weights, the bias and the
    offsets.
    """
    x, off = as_variable(x), as_variable(offsets)
    xv, wv, ov = x.value, p.weight.value, off.value
    lead, (h, w), cin = _split_shape(xv, 2, "deformable_conv2d input")
    if cin != p.in_channels:
        raise ShapeError(f"input has {cin} channels, weight expects {p.in_channels}")
    (kh, kw), cout = p.kernel_size, p.out_channels
    K = kh * kw
    ho = _out_extent(h, kh, p.stride[0], p.padding[0])
    wo = _out_extent(w, kw, p.stride[1], p.padding[1])
    if ov.shape != lead + (ho, wo, 2 * K):
        raise ShapeError(f"offset field shape {ov.shape} != {lead + (ho, wo, 2 * K)}")

    B = prod(lead)
    dt = np.result_type(xv, wv, ov)
    xf = xv.reshape(B * h * w, cin)
    o = ov.reshape(B, ho, wo, K, 2).astype(dt, copy=False)
    gy, gx = base_grid(p, (ho, wo))
    py = gy.astype(dt) + o[..., 0]
    px = gx.astype(dt) + o[..., 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly, lx = py - y0, px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    bidx = np.arange(B).reshape(B, 1, 1, 1)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = (bidx * h + np.clip(yy, 0, h - 1)) * w + np.clip(xx, 0, w - 1)
        v = xf[idx] * valid[..., None]
        corners.append((idx, valid, v))
    wy = (1 - ly, 1 - ly, ly, ly)
    wx = (1 - lx, lx, 1 - lx, lx)
    cols = sum((a * b)[..., None] * v for a, b, (_, _, v) in zip(wy, wx, corners))
    rows = B * ho * wo
    cols2 = cols.reshape(rows, K * cin)
    wmat = wv.reshape(K * cin, cout)
    # Accumulate one kernel row at a time, exactly as the regular conv does,
    # so zero offsets reproduce it bit for bit.
    span = kw * cin
    y = np.zeros((rows, cout), dtype=np.result_type(cols2, wv))
    for a in range(kh):
        y += np.ascontiguousarray(cols2[:, a * span:(a + 1) * span]) @ wv[a].reshape(span, cout)
    if p.bias is not None:
        y += p.bias.value
    y = y.reshape(lead + (ho, wo, cout))

    inputs = [x, p.weight, off] + ([p.bias] if p.bias is not None else [])

    def back(g):
        g2 = g.reshape(rows, cout)
        gw = (cols2.T @ g2).reshape(wv.shape) if p.weight.requires_grad else None
        gx_ = goff = None
        if x.requires_grad or off.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, ho, wo, K, cin)
        if x.requires_grad:
            acc = np.zeros((B * h * w, cin), dtype=dt)
            for a, b, (idx, valid, _) in zip(wy, wx, corners):
                contrib = dcols * (a * b * valid)[..., None]
                np.add.at(acc, idx.reshape(-1), contrib.reshape(-1, cin))
            gx_ = acc.reshape(xv.shape)
        if off.requires_grad:
            v00, v01, v10, v11 = (v for _, _, v in corners)
            lxe, lye = lx[..., None], ly[..., None]
            d_ly = (1 - lxe) * (v10 - v00) + lxe * (v11 - v01)
            d_lx = (1 - lye) * (v01 - v00) + lye * (v11 - v10)
            goff = np.stack([(dcols * d_ly).sum(-1), (dcols * d_lx).sum(-1)], axis=-1)
            goff = goff.reshape(ov.shape)
        grads = [gx_, gw, goff]
        if p.bias is not None:
            grads.append(g2.sum(axis=0) if p.bias.requires_grad else None)
        return grads

    return apply(y, inputs, back, "deformable_conv2d")


def offset_predictor(x, p: Conv2DParams, kernel_size: tuple[int, int] | None = None) -> Variable:
    """Offset field for a deformable conv with ``kernel_size`` taps (default: ``p``'s own)."""
    kh, kw = kernel_size if kernel_size is not None else p.kernel_size
    if p.out_channels != 2 * kh * kw:
        raise ShapeError(f"offset predictor has {p.out_channels} channels, need {2 * kh * kw}")
    return conv2d(x, p)
