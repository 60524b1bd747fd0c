import numpy as np
import pytest

from dclstm import autodiff as ad
from dclstm.model import (ConfigError, ModelConfig, build, cell_params, closed_form_param_count,
                          forward, param_count, shape_table)
from dclstm.train import Adam, cross_entropy
from oracles import conv2d_loops, conv3d_loops, deformable_loops, pool_scan

TINY = dict(frames=8, height=16, width=16, channels=2, conv3d_channels=(3, 3), hidden=2,
            head_channels=(2, 3), num_classes=2)


def test_default_shape_table():
    assert shape_table(ModelConfig()) == [
        ("input", (32, 112, 112, 3)),
        ("conv3d", (16, 28, 28, 64)),
        ("convlstm", (16, 28, 28, 64)),
        ("head", (16, 3, 3, 128)),
        ("pool", (128,)),
        ("logits", (17,)),
    ]


def test_default_forward_trace():
    params = build(ModelConfig())
    trace = []
    clip = np.random.default_rng(0).random((32, 112, 112, 3), dtype=np.float32)
    logits = forward(params, clip, trace=trace)
    assert logits.shape == (17,)
    assert trace == shape_table(params.config)
    assert dict(trace)["conv3d"][1:3] == (28, 28)


def test_default_schedule_is_nine_frames_of_sixteen():
    cfg = ModelConfig()
    assert cfg.sequence_length == 16
    assert cfg.schedule() == [4, 5, 6, 8, 9, 10, 12, 13, 14]
    assert ModelConfig(deformable_per_mark=0).schedule() == []


@pytest.mark.parametrize("bad", [
    dict(frames=31),
    dict(conv3d_pools=((1, 2, 2), (1, 2, 2))),
    dict(conv3d_pools=((2, 2, 2), (2, 2, 2))),
    dict(kernel=4),
    dict(num_classes=1),
    dict(head_channels=()),
    dict(height=16, width=16, frames=8),  # head pools 4x4 to 0x0
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        build(ModelConfig(**bad))


def test_config_text_round_trip():
    cfg = ModelConfig(**TINY, seed=4)
    assert ModelConfig.loads(cfg.dumps()) == cfg
    assert ModelConfig.loads(cfg.dumps()).hash() == cfg.hash()
    assert ModelConfig(**TINY, seed=5).hash() != cfg.hash()
    with pytest.raises(ConfigError):
        ModelConfig.loads("nonsense=1\n")


def test_seed_determinism():
    a, b = build(ModelConfig(**TINY)), build(ModelConfig(**TINY))
    c = build(ModelConfig(**TINY, seed=1))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    clip = np.random.default_rng(1).random((8, 16, 16, 2))
    np.testing.assert_array_equal(forward(a, clip).value, forward(a, clip).value)


def test_zero_fc_gives_uniform_softmax():
    params = build(ModelConfig())
    params["fc.weight"].value[...] = 0
    logits = forward(params, np.zeros((32, 112, 112, 3), np.float32)).value
    p = np.exp(logits - logits.max())
    np.testing.assert_allclose(p / p.sum(), np.full(17, 1 / 17), atol=1e-7)


def test_param_count_examples():
    from dclstm.kernels import Conv2DParams
    layer = Conv2DParams(ad.Variable(np.zeros((3, 3, 1, 1))), ad.Variable(np.zeros(1)))
    assert param_count({v.name or str(i): v for i, v in enumerate(layer.variables())}) == 10
    base = build(ModelConfig())
    assert param_count(base) == closed_form_param_count(base.config)
    more = build(ModelConfig(num_classes=34))
    assert param_count(more) - param_count(base) == 17 * 129
    tiny = ModelConfig(**TINY)
    assert param_count(build(tiny)) == closed_form_param_count(tiny)


def _sigmoid(z):
    return 1 / (1 + np.exp(-z))


def _oracle_forward(params, clip):
    """Layer-by-layer numpy composition built from the loop oracles."""
    cfg = params.config
    P = {k: v.value.astype(np.float64) for k, v in params.items()}
    x = clip.astype(np.float64)
    for n, win in enumerate(cfg.conv3d_pools):
        x = np.maximum(conv3d_loops(x, P[f"conv3d.{n}.weight"], P[f"conv3d.{n}.bias"], (1, 1, 1)), 0)
        x = pool_scan(x, win, win, np.max)
    t, h, w, _ = x.shape
    hid = cfg.hidden
    hs, c = np.zeros((h, w, hid)), np.zeros((h, w, hid))
    schedule = set(cfg.schedule())
    outs = []
    for k in range(t):
        pooled = hs.mean(axis=(0, 1))
        gate = {g: conv2d_loops(x[k], P[f"convlstm.input_{g}.weight"], pad=(1, 1)) for g in "ifo"}
        if k in schedule:
            off = conv2d_loops(x[k], P["convlstm.offset.weight"], P["convlstm.offset.bias"], pad=(1, 1))
            xg = deformable_loops(x[k], P["convlstm.input_g.weight"], None, off)
        else:
            xg = conv2d_loops(x[k], P["convlstm.input_g.weight"], pad=(1, 1))
        i, f, o = (_sigmoid(gate[g] + pooled * P[f"convlstm.hidden_{g}"] + P[f"convlstm.bias_{g}"])
                   for g in "ifo")
        g = np.tanh(xg + conv2d_loops(hs, P["convlstm.hidden_g.weight"], pad=(1, 1)) + P["convlstm.bias_g"])
        c = f * c + i * g
        hs = o * np.tanh(c)
        outs.append(hs)
    feats = []
    for frame in outs:
        y = frame
        for n in range(len(cfg.head_channels)):
            y = np.maximum(conv2d_loops(y, P[f"head.{n}.weight"], P[f"head.{n}.bias"], pad=(1, 1)), 0)
            y = pool_scan(y, (2, 2), (2, 2), np.mean)
        feats.append(y)
    feat = np.mean(feats, axis=(0, 1, 2))
    return feat @ P["fc.weight"] + P["fc.bias"]


def test_tiny_forward_matches_layer_oracle():
    params = build(ModelConfig(**TINY))
    rng = np.random.default_rng(3)
    # non-zero offsets so the scheduled frames really deform
    params["convlstm.offset.weight"].value[...] = rng.normal(0, 0.2, params["convlstm.offset.weight"].shape)
    params["convlstm.offset.bias"].value[...] = rng.normal(0, 0.7, params["convlstm.offset.bias"].shape)
    assert params.config.schedule() == [1, 2, 3]
    clip = rng.random((8, 16, 16, 2))
    np.testing.assert_allclose(forward(params, clip).value, _oracle_forward(params, clip), atol=1e-5)


def test_empty_schedule_is_plain_convlstm():
    base = build(ModelConfig(**TINY, deformable_per_mark=0))
    assert cell_params(base).offset is None
    full = build(ModelConfig(**TINY))
    shared = [k for k in full if k in base]
    assert len(shared) == len(base)
    clip = np.random.default_rng(2).random((8, 16, 16, 2))
    for k in shared:
        base[k].value[...] = full[k].value
    # a zero offset predictor makes the deformable model equal the baseline
    np.testing.assert_allclose(forward(full, clip).value, forward(base, clip).value, atol=1e-6)


def test_clip_shape_checked():
    with pytest.raises(ValueError):
        forward(build(ModelConfig(**TINY)), np.zeros((8, 16, 15, 2)))


def test_every_parameter_receives_gradient():
    params = build(ModelConfig(**TINY))
    # zero-initialised offsets would still get gradient, but make it non-trivial
    params["convlstm.offset.bias"].value[...] = 0.3
    clip = np.random.default_rng(5).random((8, 16, 16, 2))
    with ad.Tape() as tape:
        loss = cross_entropy(forward(params, clip), 1)
    ad.backward(tape, loss)
    for name, v in params.items():
        assert v.grad is not None and v.grad.shape == v.shape, name
        assert np.any(v.grad != 0), name


def test_memorizes_a_single_clip_small():
    cfg = ModelConfig(frames=8, height=32, width=32, channels=3, conv3d_channels=(8, 8), hidden=8,
                      head_channels=(8, 8), num_classes=4)
    params = build(cfg)
    opt = Adam(params, lr=3e-3)
    clip = np.random.default_rng(6).random((8, 32, 32, 3), dtype=np.float32)
    losses = []
    for _ in range(50):
        params.zero_grad()
        with ad.Tape() as tape:
            loss = cross_entropy(forward(params, clip), 2)
        ad.backward(tape, loss)
        opt.step()
        losses.append(loss.value.item())
    assert losses[-1] < 0.1 < losses[0]
