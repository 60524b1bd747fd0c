"""Finite-difference checks of every differentiable kernel.

Each case draws a small random instance, projects the kernel output onto a
fixed random tensor to get a scalar, and compares the tape gradients
against central differences evaluated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .convlstm import ConvLSTMCellParams, ConvLSTMState, convlstm_step, unroll
from .kernels import Conv2DParams, Conv3DParams, avgpool2d, conv2d, conv3d, deformable_conv2d, maxpool3d
from .train import cross_entropy

THRESHOLD = {np.float32: 1e-3, np.float64: 1e-5}


@dataclass
class Case:
    fn: Callable[..., ad.Variable]
    inputs: dict[str, np.ndarray]


def _fractional(rng, shape, low=-2, high=2):
    """Reals whose distance to the nearest integer is at least 0.1."""
    return rng.integers(low, high, shape) + rng.uniform(0.1, 0.9, shape)


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.1, 1.0, shape)


def _distinct(rng, shape):
    n = int(np.prod(shape))
    return rng.permutation(np.linspace(-1, 1, n)).reshape(shape)


def _cell(rng, cin, hid, deformable):
    k = 3
    tensors = {f"input_{g}": rng.normal(0, 0.4, (k, k, cin, hid)) for g in "ifog"}
    tensors["hidden_g"] = rng.normal(0, 0.4, (k, k, hid, hid))
    for g in "ifo":
        tensors[f"hidden_{g}"] = rng.normal(0, 0.5, hid)
    for g in "ifog":
        tensors[f"bias_{g}"] = rng.normal(0, 0.3, hid)
    if deformable:
        # tiny weights keep predicted offsets next to the fractional bias
        tensors["offset_w"] = rng.normal(0, 1e-3, (k, k, cin, 2 * k * k))
        tensors["offset_b"] = _fractional(rng, 2 * k * k, -1, 1)
    return tensors


def _make_cell(t):
    conv = lambda w: Conv2DParams(w, None, 1, 1)  # noqa: E731
    offset = Conv2DParams(t["offset_w"], t["offset_b"], 1, 1) if "offset_w" in t else None
    return ConvLSTMCellParams(
        **{f"input_{g}": conv(t[f"input_{g}"]) for g in "ifog"},
        **{f"hidden_{g}": t[f"hidden_{g}"] for g in "ifo"},
        hidden_g=conv(t["hidden_g"]),
        **{f"bias_{g}": t[f"bias_{g}"] for g in "ifog"},
        offset=offset,
    )


def make_case(name: str, rng: np.random.Generator) -> Case:
    r = lambda *s: rng.normal(0, 1, s)  # noqa: E731
    if name == "conv2d":
        h, w, cin, cout = rng.integers(3, 7), rng.integers(3, 7), rng.integers(1, 4), rng.integers(1, 4)
        pad = int(rng.integers(0, 2))
        return Case(lambda x, w_, b: conv2d(x, Conv2DParams(w_, b, 1, pad)),
                    {"x": r(h, w, cin), "w_": r(3, 3, cin, cout), "b": r(cout)})
    if name == "conv3d":
        cin, cout = rng.integers(1, 4), rng.integers(1, 4)
        return Case(lambda x, w_, b: conv3d(x, Conv3DParams(w_, b, 1, 1)),
                    {"x": r(3, 4, 4, cin), "w_": r(3, 3, 3, cin, cout), "b": r(cout)})
    if name == "deformable_conv2d":
        h, w, cin, cout = rng.integers(3, 7), rng.integers(3, 7), rng.integers(1, 4), rng.integers(1, 4)
        return Case(lambda x, w_, b, off: deformable_conv2d(x, Conv2DParams(w_, b, 1, 1), off),
                    {"x": r(h, w, cin), "w_": r(3, 3, cin, cout), "b": r(cout),
                     "off": _fractional(rng, (h, w, 18))})
    if name == "maxpool3d":
        return Case(lambda x: maxpool3d(x, (2, 2, 2)), {"x": _distinct(rng, (4, 4, 6, 2))})
    if name == "avgpool2d":
        return Case(lambda x: avgpool2d(x, 2, truncate=True), {"x": r(5, 6, 3)})
    if name == "matmul":
        m, k, n = rng.integers(1, 6, 3)
        return Case(lambda a, b: ad.matmul(a, b), {"a": r(m, k), "b": r(k, n)})
    if name == "sigmoid":
        return Case(lambda x: ad.sigmoid(x), {"x": 3 * r(4, 5)})
    if name == "tanh":
        return Case(lambda x: ad.tanh(x), {"x": 2 * r(4, 5)})
    if name == "relu":
        return Case(lambda x: ad.relu(x), {"x": _away_from_zero(rng, (4, 5))})
    if name == "mean":
        return Case(lambda x: ad.mean(x, axes=(0, 1)), {"x": r(3, 4, 2)})
    if name == "cross_entropy":
        label = int(rng.integers(0, 5))
        return Case(lambda z: cross_entropy(z, label), {"z": 2 * r(5)})
    if name == "convlstm_step":
        cin, hid = 2, 2
        t = _cell(rng, cin, hid, True)
        inputs = {"x": r(4, 4, cin), "h": 0.5 * r(4, 4, hid), "c": r(4, 4, hid), **t}

        def step(x, h, c, **tensors):
            return convlstm_step(x, ConvLSTMState(h, c), _make_cell(tensors), deformable=True).h
        return Case(step, inputs)
    if name == "unroll":
        cin, hid = 2, 2
        inputs = {"x": r(2, 4, 4, cin), **_cell(rng, cin, hid, True)}

        def run(x, **tensors):
            return unroll(x, _make_cell(tensors), schedule=[1])
        return Case(run, inputs)
    raise KeyError(f"no gradient check for kernel {name!r}")


KERNELS = ("conv2d", "conv3d", "deformable_conv2d", "maxpool3d", "avgpool2d", "matmul",
           "sigmoid", "tanh", "relu", "mean", "cross_entropy", "convlstm_step", "unroll")


def check_case(case: Case, dtype=np.float64, eps: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Max relative error per input between tape gradients (in ``dtype``) and float64 differences."""
    rng = np.random.default_rng(seed)
    names = list(case.inputs)
    proj_shape = case.fn(**case.inputs).shape
    proj = rng.normal(0, 1, proj_shape)

    variables = {k: ad.Variable(np.asarray(v, dtype=dtype), requires_grad=True) for k, v in case.inputs.items()}
    with ad.Tape() as tape:
        out = case.fn(**variables)
        loss = ad.sum_all(out * proj.astype(dtype))
    ad.backward(tape, loss)

    ref = {k: np.asarray(v.value, dtype=np.float64) for k, v in variables.items()}
    errors = {}
    for name in names:
        def f(a, name=name):
            args = dict(ref)
            args[name] = a
            return float(np.sum(case.fn(**args).value * proj))
        numeric = ad.finite_diff_grad(f, ref[name], eps)
        errors[name] = ad.relative_error(variables[name].grad, numeric)
    return errors


def run(kernel: str, trials: int = 3, seed: int = 0, dtype=np.float64, eps: float = 1e-4) -> float:
    """Largest relative error over ``trials`` random instances of ``kernel``."""
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        errs = check_case(make_case(kernel, rng), dtype, eps, seed=trial)
        worst = max(worst, max(errs.values()))
    return worst
