import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dclstm import autodiff as ad
from dclstm import gradcheck
from dclstm.convlstm import ConvLSTMCellParams, ConvLSTMState, convlstm_step, deformable_schedule, unroll
from dclstm.tensor import ShapeError


def zero_cell(cin=2, hid=3):
    p = ConvLSTMCellParams.init(cin, hid, np.random.default_rng(0))
    for v in p.named_variables().values():
        v.value[...] = 0
    return p


def random_cell(seed, cin=2, hid=3, offsets="zero"):
    rng = np.random.default_rng(seed)
    p = ConvLSTMCellParams.init(cin, hid, rng)
    if offsets == "random":
        p.offset.weight.value[...] = rng.normal(0, 0.3, p.offset.weight.shape)
        p.offset.bias.value[...] = rng.normal(0, 1.0, p.offset.bias.shape)
    return p


def test_zero_params_give_half_gates_and_zero_state():
    x = np.random.default_rng(1).normal(size=(5, 4, 2))
    s = convlstm_step(x, ConvLSTMState.zeros(5, 4, 3), zero_cell())
    assert np.all(s.c.value == 0) and np.all(s.h.value == 0)


def test_saturated_forget_carries_cell_state():
    p = zero_cell()
    p.bias_f.value[...] = 20
    c0 = np.random.default_rng(2).normal(size=(4, 4, 3)).astype(np.float32)
    s = convlstm_step(np.ones((4, 4, 2)), ConvLSTMState(np.zeros_like(c0), c0), p)
    np.testing.assert_allclose(s.c.value, c0, atol=1e-6)


def test_step_zero_offset_predictor_matches_regular():
    p = random_cell(3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 5, 2)).astype(np.float32)
    s = ConvLSTMState(rng.normal(0, 0.5, (6, 5, 3)), rng.normal(size=(6, 5, 3)))
    a = convlstm_step(x, s, p, deformable=False)
    b = convlstm_step(x, s, p, deformable=True)
    np.testing.assert_allclose(a.h.value, b.h.value, atol=1e-6)
    np.testing.assert_allclose(a.c.value, b.c.value, atol=1e-6)


def test_step_shape_errors():
    p = random_cell(0)
    with pytest.raises(ShapeError):
        convlstm_step(np.ones((4, 4, 2)), ConvLSTMState.zeros(5, 4, 3), p)
    with pytest.raises(ShapeError):
        convlstm_step(np.ones((4, 4, 2)), ConvLSTMState.zeros(4, 4, 2), p)


def test_unroll_single_frame_zero_params():
    out = unroll(np.random.default_rng(0).normal(size=(1, 4, 4, 2)), zero_cell())
    assert out.shape == (1, 4, 4, 3)
    assert np.all(out.value == 0)


def test_unroll_empty_input():
    with pytest.raises(ValueError):
        unroll(np.zeros((0, 4, 4, 2)), zero_cell())


@pytest.mark.parametrize("schedule", [(), (1,), (0, 2)])
def test_unroll_matches_manual_steps(schedule):
    p = random_cell(5, offsets="random")
    x = np.random.default_rng(6).normal(size=(3, 5, 5, 2)).astype(np.float32)
    s = ConvLSTMState.zeros(5, 5, 3)
    manual = []
    for k in range(3):
        s = convlstm_step(x[k], s, p, deformable=k in schedule)
        manual.append(s.h.value)
    np.testing.assert_allclose(unroll(x, p, schedule).value, np.stack(manual), atol=1e-5)


@pytest.mark.parametrize("schedule", [(0,), (1, 3), (0, 1, 2, 3)])
def test_unroll_zero_predictor_ignores_schedule(schedule):
    p = random_cell(7)
    x = np.random.default_rng(8).normal(size=(4, 5, 5, 2))
    np.testing.assert_allclose(unroll(x, p, schedule).value, unroll(x, p).value, atol=1e-6)


def test_unroll_schedule_out_of_range():
    with pytest.raises(ValueError):
        unroll(np.zeros((2, 4, 4, 2)), zero_cell(), schedule=[2])


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.floats(0.1, 3.0))
@settings(max_examples=15, deadline=None)
def test_hidden_state_bounded(seed, t, scale):
    p = random_cell(seed, offsets="random")
    x = scale * np.random.default_rng(seed).normal(size=(t, 4, 4, 2))
    out = unroll(x, p, schedule=[t - 1]).value
    assert out.shape == (t, 4, 4, 3)
    assert np.all(np.abs(out) < 1)


@pytest.mark.parametrize("t,expected", [
    (32, [8, 9, 10, 16, 17, 18, 24, 25, 26]),
    (16, [4, 5, 6, 8, 9, 10, 12, 13, 14]),
    (4, [1, 2, 3]),
    (1, [0]),
])
def test_schedule_examples(t, expected):
    assert deformable_schedule(t) == expected


@given(st.integers(1, 500))
def test_schedule_size_and_range(t):
    s = deformable_schedule(t)
    assert len(s) <= 9 and all(0 <= k < t for k in s)
    if t >= 12:
        assert len(s) == 9


def test_two_step_unroll_gradient():
    # first frame regular, second deformable; offsets kept 0.1 away from integers
    for dtype, tol in ((np.float32, 1e-3), (np.float64, 1e-5)):
        assert gradcheck.run("unroll", trials=2, seed=3, dtype=dtype) < tol


def test_gradients_reach_every_cell_parameter():
    p = random_cell(9, offsets="random")
    x = np.random.default_rng(10).normal(size=(2, 4, 4, 2))
    with ad.Tape() as tape:
        loss = ad.sum_all(unroll(x, p, schedule=[1]))
    ad.backward(tape, loss)
    for name, v in p.named_variables().items():
        assert v.grad is not None and np.any(v.grad != 0), name


def test_near_cancelled_offset_weight_gradient():
    # This instance has an offset-weight gradient entry of ~3e-6 against a
    # typical magnitude of ~0.2.  Elementwise relative error on it is set by
    # float32 rounding and by the O(eps^2) truncation of central differences,
    # not by a wrong derivative.
    rng = np.random.default_rng([11, 2])
    case = gradcheck.make_case("convlstm_step", rng)
    proj = np.random.default_rng(2).normal(size=case.fn(**case.inputs).shape)
    grads = {}
    for dtype in (np.float32, np.float64):
        vs = {k: ad.Variable(np.asarray(v, dtype), requires_grad=True) for k, v in case.inputs.items()}
        with ad.Tape() as tape:
            loss = ad.sum_all(case.fn(**vs) * proj.astype(dtype))
        ad.backward(tape, loss)
        grads[dtype] = vs["offset_w"].grad
    g32, g64 = grads[np.float32], grads[np.float64]
    assert np.abs(g32 - g64).max() < 1e-6 * np.abs(g64).max()

    ref = {k: np.asarray(v, np.float64) for k, v in case.inputs.items()}

    def f(w):
        return float(np.sum(case.fn(**{**ref, "offset_w": w}).value * proj))
    errs = [ad.relative_error(g64, ad.finite_diff_grad(f, ref["offset_w"], eps)) for eps in (1e-3, 1e-4, 1e-5)]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-5
