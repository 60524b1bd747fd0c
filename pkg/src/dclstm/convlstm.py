"""Convolutional LSTM with an optional deformable candidate path.

Gates ``i, f, o`` see the input through regular convolutions and the
previous hidden state through one scalar weight per channel applied to its
spatial mean.  The candidate ``g`` keeps full convolutions on both input
and hidden state; on scheduled frames its input convolution is deformable,
with offsets predicted from the frame by a zero-initialised convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .kernels import Conv2DParams, conv2d, deformable_conv2d, offset_predictor
from .tensor import ShapeError

GATES = ("i", "f", "o", "g")


@dataclass
class ConvLSTMState:
    h: Variable
    c: Variable

    def __post_init__(self):
        self.h, self.c = ad.as_variable(self.h), ad.as_variable(self.c)
        if self.h.shape != self.c.shape:
            raise ShapeError(f"hidden {self.h.shape} and cell {self.c.shape} shapes differ")

    @classmethod
    def zeros(cls, h: int, w: int, channels: int, dtype=np.float32) -> "ConvLSTMState":
        return cls(np.zeros((h, w, channels), dtype), np.zeros((h, w, channels), dtype))


@dataclass
class ConvLSTMCellParams:
    input_i: Conv2DParams
    input_f: Conv2DParams
    input_o: Conv2DParams
    input_g: Conv2DParams
    hidden_i: Variable
    hidden_f: Variable
    hidden_o: Variable
    hidden_g: Conv2DParams
    bias_i: Variable
    bias_f: Variable
    bias_o: Variable
    bias_g: Variable
    offset: Conv2DParams | None = None

    @property
    def hidden_channels(self) -> int:
        return self.input_g.out_channels

    def input_conv(self, gate: str) -> Conv2DParams:
        return getattr(self, f"input_{gate}")

    def named_variables(self) -> dict[str, Variable]:
        out = {}
        for k in GATES:
            out[f"input_{k}.weight"] = self.input_conv(k).weight
        for k in "ifo":
            out[f"hidden_{k}"] = getattr(self, f"hidden_{k}")
        out["hidden_g.weight"] = self.hidden_g.weight
        for k in GATES:
            out[f"bias_{k}"] = getattr(self, f"bias_{k}")
        if self.offset is not None:
            out["offset.weight"] = self.offset.weight
            out["offset.bias"] = self.offset.bias
        return out

    @classmethod
    def init(cls, in_channels: int, hidden: int, rng: np.random.Generator,
             kernel: int = 3, deformable: bool = True, dtype=np.float32) -> "ConvLSTMCellParams":
        """Uniform fan-in initialisation; forget bias 1, offset predictor all zero."""
        pad = kernel // 2

        def conv(cin):
            bound = np.sqrt(1.0 / (kernel * kernel * cin))
            w = rng.uniform(-bound, bound, (kernel, kernel, cin, hidden)).astype(dtype)
            return Conv2DParams(Variable(w, True), None, 1, pad)

        def vec(fill=None):
            v = rng.uniform(-1, 1, hidden) if fill is None else np.full(hidden, fill)
            return Variable(v.astype(dtype), True)

        convs = {f"input_{k}": conv(in_channels) for k in GATES}
        offset = None
        if deformable:
            taps = 2 * kernel * kernel
            offset = Conv2DParams(
                Variable(np.zeros((kernel, kernel, in_channels, taps), dtype), True),
                Variable(np.zeros(taps, dtype), True), 1, pad)
        return cls(
            **convs,
            hidden_i=vec(), hidden_f=vec(), hidden_o=vec(),
            hidden_g=conv(hidden),
            bias_i=vec(0.0), bias_f=vec(1.0), bias_o=vec(0.0), bias_g=vec(0.0),
            offset=offset,
        )


def _check_same_conv(p: Conv2DParams):
    if p.stride != (1, 1) or any(2 * q + 1 != k for q, k in zip(p.padding, p.kernel_size)):
        raise ShapeError("ConvLSTM convolutions must use stride 1 and 'same' padding")


def candidate_input(x, p: ConvLSTMCellParams, deformable: bool) -> Variable:
    if not deformable:
        return conv2d(x, p.input_g)
    if p.offset is None:
        raise ValueError("deformable step requested but the cell has no offset predictor")
    off = offset_predictor(x, p.offset, p.input_g.kernel_size)
    return deformable_conv2d(x, p.input_g, off)


def _recurrence(xi, xf, xo, xg, s: ConvLSTMState, p: ConvLSTMCellParams) -> ConvLSTMState:
    pooled = ad.mean(s.h, axes=(0, 1))
    i = ad.sigmoid(xi + pooled * p.hidden_i + p.bias_i)
    f = ad.sigmoid(xf + pooled * p.hidden_f + p.bias_f)
    o = ad.sigmoid(xo + pooled * p.hidden_o + p.bias_o)
    g = ad.tanh(xg + conv2d(s.h, p.hidden_g) + p.bias_g)
    c = f * s.c + i * g
    return ConvLSTMState(o * ad.tanh(c), c)


def convlstm_step(x_t, s: ConvLSTMState, p: ConvLSTMCellParams, deformable: bool = False) -> ConvLSTMState:
    """One recurrence step on a single frame ``x_t[h, w, c_in]``."""
    x_t = ad.as_variable(x_t)
    if x_t.value.ndim != 3 or x_t.shape[:2] != s.h.shape[:2]:
        raise ShapeError(f"frame {x_t.shape} does not match state {s.h.shape}")
    if s.h.shape[2] != p.hidden_channels:
        raise ShapeError(f"state has {s.h.shape[2]} channels, cell has {p.hidden_channels}")
    for k in GATES:
        _check_same_conv(p.input_conv(k))
    _check_same_conv(p.hidden_g)
    xi, xf, xo = (conv2d(x_t, p.input_conv(k)) for k in "ifo")
    xg = candidate_input(x_t, p, deformable)
    return _recurrence(xi, xf, xo, xg, s, p)


def deformable_schedule(t: int, per_mark: int = 3) -> list[int]:
    """Frames run through the deformable cell: ``per_mark`` consecutive frames
    starting at each of the 25%, 50% and 75% points, clipped to the clip."""
    if t < 1:
        raise ValueError("frame count must be >= 1")
    starts = (t // 4, t // 2, (3 * t) // 4)
    return sorted({s + k for s in starts for k in range(per_mark) if s + k < t})


def unroll(x, p: ConvLSTMCellParams, schedule: Iterable[int] = ()) -> Variable:
    """Run the cell over ``x[t, h, w, c_in]`` from a zero state; returns stacked hidden maps.

    Input-to-state convolutions do not depend on the recurrence, so they are
    evaluated for all frames at once before the time loop.
    """
    x = ad.as_variable(x)
    if x.value.ndim != 4:
        raise ShapeError(f"expected [t, h, w, c] input, got {x.shape}")
    t, h, w, _ = x.shape
    if t < 1:
        raise ValueError("empty input sequence")
    schedule = sorted(set(schedule))
    if any(not 0 <= k < t for k in schedule):
        raise ValueError(f"schedule {schedule} out of range for {t} frames")
    for k in GATES:
        _check_same_conv(p.input_conv(k))
    _check_same_conv(p.hidden_g)

    hid = p.hidden_channels
    stacked = Conv2DParams(
        ad.concat([p.input_conv(k).weight for k in GATES], axis=-1), None, 1,
        p.input_g.padding)
    proj = conv2d(x, stacked)
    deform = {}
    if schedule:
        xs = ad.stack([x[k] for k in schedule]) if len(schedule) < t else x
        xg_def = candidate_input(xs, p, True)
        deform = {k: j for j, k in enumerate(schedule)}

    state = ConvLSTMState.zeros(h, w, hid, x.dtype)
    outputs = []
    for step in range(t):
        frame = proj[step]
        xi, xf, xo, xg = (frame[..., n * hid:(n + 1) * hid] for n in range(4))
        if step in deform:
            xg = xg_def[deform[step]]
        state = _recurrence(xi, xf, xo, xg, state, p)
        outputs.append(state.h)
    return ad.stack(outputs)
