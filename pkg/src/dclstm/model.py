"""The full video classifier.

Pipeline: 3D conv stack (two max pools, one of them temporal) -> one
ConvLSTM layer whose candidate path turns deformable on scheduled frames
-> a shared per-frame 2D conv/avg-pool head -> global average over time
and space -> fully connected logits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from math import prod

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .convlstm import GATES, ConvLSTMCellParams, deformable_schedule, unroll
from .kernels import Conv2DParams, Conv3DParams, avgpool2d, conv2d, conv3d, maxpool3d


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    frames: int = 32
    height: int = 112
    width: int = 112
    channels: int = 3
    conv3d_channels: tuple[int, ...] = (32, 64)
    conv3d_pools: tuple[tuple[int, int, int], ...] = ((1, 2, 2), (2, 2, 2))
    hidden: int = 64
    deformable_per_mark: int = 3
    head_channels: tuple[int, ...] = (64, 96, 128)
    num_classes: int = 17
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        self.conv3d_channels = tuple(int(c) for c in self.conv3d_channels)
        self.conv3d_pools = tuple(tuple(int(v) for v in p) for p in self.conv3d_pools)
        self.head_channels = tuple(int(c) for c in self.head_channels)

    def validate(self) -> "ModelConfig":
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ConfigError("input extents must be positive")
        if len(self.conv3d_pools) != len(self.conv3d_channels):
            raise ConfigError("need one pooling window per 3D conv layer")
        if any(len(p) != 3 for p in self.conv3d_pools):
            raise ConfigError("3D pooling windows have three extents")
        if sum(p[0] > 1 for p in self.conv3d_pools) != 1:
            raise ConfigError("exactly one 3D pooling window may shrink the time axis")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if self.num_classes < 2 or self.deformable_per_mark < 0 or self.hidden < 1:
            raise ConfigError("num_classes >= 2, hidden >= 1, deformable_per_mark >= 0")
        if not self.head_channels:
            raise ConfigError("the 2D head needs at least one layer")
        t, h, w = self.frames, self.height, self.width
        for win in self.conv3d_pools:
            for n, k in zip((t, h, w), win):
                if n % k:
                    raise ConfigError(f"extent {n} is not divisible by pooling window {k}")
            t, h, w = t // win[0], h // win[1], w // win[2]
        for _ in self.head_channels:
            h, w = h // 2, w // 2
            if min(h, w) < 1:
                raise ConfigError("2D head pools the feature map below 1x1")
        return self

    @property
    def sequence_length(self) -> int:
        """Frames entering the ConvLSTM."""
        return self.frames // prod(p[0] for p in self.conv3d_pools)

    def schedule(self) -> list[int]:
        if self.deformable_per_mark == 0:
            return []
        return deformable_schedule(self.sequence_length, self.deformable_per_mark)

    # key=value text form
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "conv3d_pools":
                v = ",".join("x".join(str(a) for a in p) for p in v)
            elif isinstance(v, tuple):
                v = ",".join(str(a) for a in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            v = v.strip()
            if k == "conv3d_pools":
                kw[k] = tuple(tuple(int(a) for a in p.split("x")) for p in v.split(",") if p)
            elif k in ("conv3d_channels", "head_channels"):
                kw[k] = tuple(int(a) for a in v.split(",") if a)
            else:
                kw[k] = int(v)
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        return cls.from_dict(parse_key_values(text))

    def hash(self) -> int:
        return fnv1a64(self.dumps().encode())


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class ModelParams(dict):
    """Ordered ``name -> Variable`` map that remembers its config."""

    def __init__(self, config: ModelConfig, items=()):
        super().__init__(items)
        self.config = config

    def zero_grad(self):
        for v in self.values():
            v.zero_grad()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, v in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v.value).tobytes())
        return h.hexdigest()


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def build(cfg: ModelConfig) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.kernel
    params = ModelParams(cfg)

    def add(name, value):
        params[name] = Variable(value, requires_grad=True, name=name)

    cin = cfg.channels
    for n, cout in enumerate(cfg.conv3d_channels):
        add(f"conv3d.{n}.weight", _uniform(rng, (k, k, k, cin, cout), k ** 3 * cin))
        add(f"conv3d.{n}.bias", np.zeros(cout, np.float32))
        cin = cout
    cell = ConvLSTMCellParams.init(cin, cfg.hidden, rng, k, cfg.deformable_per_mark > 0)
    for name, v in cell.named_variables().items():
        v.name = f"convlstm.{name}"
        params[v.name] = v
    cin = cfg.hidden
    for n, cout in enumerate(cfg.head_channels):
        add(f"head.{n}.weight", _uniform(rng, (k, k, cin, cout), k * k * cin))
        add(f"head.{n}.bias", np.zeros(cout, np.float32))
        cin = cout
    add("fc.weight", _uniform(rng, (cin, cfg.num_classes), cin))
    add("fc.bias", np.zeros(cfg.num_classes, np.float32))
    shape_table(cfg)
    return params


def cell_params(params: ModelParams) -> ConvLSTMCellParams:
    k = params.config.kernel
    pad = k // 2
    get = lambda name: params[f"convlstm.{name}"]  # noqa: E731
    offset = None
    if "convlstm.offset.weight" in params:
        offset = Conv2DParams(get("offset.weight"), get("offset.bias"), 1, pad)
    return ConvLSTMCellParams(
        **{f"input_{g}": Conv2DParams(get(f"input_{g}.weight"), None, 1, pad) for g in GATES},
        **{f"hidden_{g}": get(f"hidden_{g}") for g in "ifo"},
        hidden_g=Conv2DParams(get("hidden_g.weight"), None, 1, pad),
        **{f"bias_{g}": get(f"bias_{g}") for g in GATES},
        offset=offset,
    )


def forward(params: ModelParams, clip, schedule: list[int] | None = None, trace: list | None = None) -> Variable:
    """Logits ``[num_classes]`` for one clip ``[t, h, w, c]``.

    ``schedule`` overrides the config's deformable frames (``[]`` gives the
    plain ConvLSTM).  When ``trace`` is a list, ``(stage, shape)`` pairs are
    appended to it.
    """
    cfg = params.config
    x = ad.as_variable(clip)
    expected = (cfg.frames, cfg.height, cfg.width, cfg.channels)
    if x.shape != expected:
        raise ValueError(f"clip shape {x.shape} != configured {expected}")
    log = trace.append if trace is not None else (lambda item: None)
    log(("input", x.shape))
    k = cfg.kernel
    for n, win in enumerate(cfg.conv3d_pools):
        p = Conv3DParams(params[f"conv3d.{n}.weight"], params[f"conv3d.{n}.bias"], 1, k // 2)
        x = maxpool3d(ad.relu(conv3d(x, p)), win)
    log(("conv3d", x.shape))
    if schedule is None:
        schedule = cfg.schedule()
    x = unroll(x, cell_params(params), schedule)
    log(("convlstm", x.shape))
    for n in range(len(cfg.head_channels)):
        p = Conv2DParams(params[f"head.{n}.weight"], params[f"head.{n}.bias"], 1, k // 2)
        x = avgpool2d(ad.relu(conv2d(x, p)), 2, truncate=True)
    log(("head", x.shape))
    feat = ad.mean(x, axes=(0, 1, 2))
    log(("pool", feat.shape))
    logits = ad.reshape(ad.reshape(feat, (1, -1)) @ params["fc.weight"], (-1,)) + params["fc.bias"]
    log(("logits", logits.shape))
    return logits


def shape_table(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Stage-by-stage shapes implied by the config (no tensors are built)."""
    cfg.validate()
    t, h, w = cfg.frames, cfg.height, cfg.width
    table = [("input", (t, h, w, cfg.channels))]
    for win in cfg.conv3d_pools:
        t, h, w = t // win[0], h // win[1], w // win[2]
    table.append(("conv3d", (t, h, w, cfg.conv3d_channels[-1])))
    table.append(("convlstm", (t, h, w, cfg.hidden)))
    for _ in cfg.head_channels:
        h, w = h // 2, w // 2
    table.append(("head", (t, h, w, cfg.head_channels[-1])))
    table.append(("pool", (cfg.head_channels[-1],)))
    table.append(("logits", (cfg.num_classes,)))
    return table


def param_count(params) -> int:
    return int(sum(v.size for v in params.values()))


def closed_form_param_count(cfg: ModelConfig) -> int:
    """Per-layer arithmetic for the same architecture ``build`` produces."""
    k2, k3 = cfg.kernel ** 2, cfg.kernel ** 3
    total, cin = 0, cfg.channels
    for cout in cfg.conv3d_channels:
        total += k3 * cin * cout + cout
        cin = cout
    hid = cfg.hidden
    total += 4 * k2 * cin * hid + 3 * hid + k2 * hid * hid + 4 * hid
    if cfg.deformable_per_mark > 0:
        total += k2 * cin * 2 * k2 + 2 * k2
    cin = hid
    for cout in cfg.head_channels:
        total += k2 * cin * cout + cout
        cin = cout
    return total + cin * cfg.num_classes + cfg.num_classes
