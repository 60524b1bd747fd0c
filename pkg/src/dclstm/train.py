"""Loss, optimizers, metrics, checkpoints and the training loop."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .data import VideoClip, resize_frames, sample_indices
from .model import ConfigError, ModelConfig, ModelParams, build, forward, parse_key_values

log = logging.getLogger(__name__)


def cross_entropy(logits, label: int) -> Variable:
    """``-log softmax(logits)[label]`` with max subtraction; returns shape ``(1,)``."""
    logits = ad.as_variable(logits)
    z = logits.value
    if z.ndim != 1:
        raise ValueError(f"logits must be a vector, got shape {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} out of range for {z.shape[0]} classes")
    shifted = z - z.max()
    exp = np.exp(shifted)
    total = exp.sum()
    loss = np.log(total) - shifted[label]
    probs = exp / total

    def back(g):
        d = probs.copy()
        d[label] -= 1
        return (d * g.reshape(()),)

    return ad.apply(np.asarray([loss], dtype=z.dtype), (logits,), back, "cross_entropy")


# -- configuration ------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    val_fraction: float = 0.2
    grouped_split: bool = True
    checkpoint_path: str = ""
    log_path: str = ""

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            t = types[k]
            if t == "bool":
                kw[k] = v.lower() in ("1", "true", "yes")
            elif t == "int":
                kw[k] = int(v)
            elif t == "float":
                kw[k] = float(v)
            else:
                kw[k] = v
        return cls(**kw).validate()


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a key=value file; keys prefixed ``train.`` configure training, the rest the model."""
    pairs = parse_key_values(Path(path).read_text())
    model_kv = {k: v for k, v in pairs.items() if not k.startswith("train.")}
    train_kv = {k[len("train."):]: v for k, v in pairs.items() if k.startswith("train.")}
    return ModelConfig.from_dict(model_kv).validate(), TrainConfig.from_dict(train_kv)


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    lines = [model_cfg.dumps()]
    for f in fields(train_cfg):
        lines.append(f"train.{f.name}={getattr(train_cfg, f.name)}\n")
    return "".join(lines)


# -- optimizers ------------------------------------------------------------------


class SGD:
    """SGD with heavy-ball momentum and decoupled weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buf: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self):
        self.t += 1
        for name, v in self.params.items():
            if v.grad is None:
                continue
            g = v.grad
            if self.momentum:
                b = self.buf.get(name)
                b = g.copy() if b is None else self.momentum * b + g
                self.buf[name] = b
                g = b
            if self.weight_decay:
                v.value -= v.dtype.type(self.lr * self.weight_decay) * v.value
            v.value -= v.dtype.type(self.lr) * g


class Adam:
    """Adam with bias-corrected moments and decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name, np.zeros_like(p.value))
            v = self.v.get(name, np.zeros_like(p.value))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.value -= p.dtype.type(self.lr * self.weight_decay) * p.value
            p.value -= (self.lr * update).astype(p.dtype)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


# -- metrics -----------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray
    mean_loss: float
    predictions: list[int] = field(default_factory=list, repr=False)

    def format(self) -> str:
        lines = [
            f"clips: {int(self.confusion.sum())}",
            f"accuracy: {self.accuracy:.6f}",
            f"mean_loss: {self.mean_loss:.6f}",
        ]
        for k, row in enumerate(self.confusion):
            lines.append(f"confusion[{k}]: " + " ".join(str(int(v)) for v in row))
        return "\n".join(lines)


def prepare_clip(clip: VideoClip, cfg: ModelConfig, jitter: bool = False, rng=None) -> np.ndarray:
    """Bring a clip to the configured frame count and frame size."""
    frames = clip.frames[sample_indices(clip.num_frames, cfg.frames, jitter, rng)]
    if frames.shape[3] != cfg.channels:
        raise ValueError(f"clip has {frames.shape[3]} channels, model expects {cfg.channels}")
    if frames.shape[1:3] != (cfg.height, cfg.width):
        frames = resize_frames(frames, cfg.height, cfg.width)
    return frames


def evaluate(params: ModelParams, clips: list[VideoClip], schedule=None) -> Metrics:
    """Accuracy, confusion matrix and mean loss; midpoint sampling, no tape."""
    if not clips:
        raise ValueError("cannot evaluate on an empty dataset")
    k = params.config.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    losses, preds = [], []
    for clip in clips:
        logits = forward(params, prepare_clip(clip, params.config), schedule)
        losses.append(float(cross_entropy(logits, clip.label).value[0]))
        pred = int(np.argmax(logits.value))
        preds.append(pred)
        confusion[clip.label, pred] += 1
    acc = float(np.trace(confusion) / confusion.sum())
    return Metrics(acc, confusion, float(np.mean(losses)), preds)


# -- training ---------------------------------------------------------------------


def train_step(params: ModelParams, batch, opt, schedule=None) -> tuple[float, int]:
    """One optimizer step on prepared ``(frames, label)`` pairs; batch gradient is the mean."""
    params.zero_grad()
    total, correct = 0.0, 0
    for frames, label in batch:
        with Tape() as tape:
            logits = forward(params, frames, schedule)
            loss = cross_entropy(logits, label)
        ad.backward(tape, loss)
        total += float(loss.value[0])
        correct += int(np.argmax(logits.value) == label)
    n = len(batch)
    if n > 1:
        for v in params.values():
            if v.grad is not None:
                v.grad = v.grad / v.dtype.type(n)
    opt.step()
    return total, correct


def fit(params: ModelParams, train: list[VideoClip], val: list[VideoClip], cfg: TrainConfig,
        schedule=None, log_path=None, checkpoint_path=None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs; appends one tab-separated line per epoch to ``log_path``."""
    cfg.validate()
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(params, cfg)
    history = []
    log_path = log_path or cfg.log_path or None
    checkpoint_path = checkpoint_path or cfg.checkpoint_path or None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [(prepare_clip(train[i], params.config, True, rng), train[i].label)
                     for i in order[start:start + cfg.batch_size]]
            l, c = train_step(params, batch, opt, schedule)
            loss_sum += l
            correct += c
        row = {"epoch": epoch, "train_loss": loss_sum / len(train), "train_acc": correct / len(train)}
        if val:
            m = evaluate(params, val, schedule)
            row.update(val_loss=m.mean_loss, val_acc=m.accuracy)
        else:
            row.update(val_loss=float("nan"), val_acc=float("nan"))
        history.append(row)
        line = "{epoch}\t{train_loss:.6f}\t{train_acc:.6f}\t{val_loss:.6f}\t{val_acc:.6f}".format(**row)
        log.info("epoch %s", line.replace("\t", " "))
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(line + "\n")
    if checkpoint_path:
        save_checkpoint(params, checkpoint_path)
    return history


def run_ablation(train: list[VideoClip], val: list[VideoClip], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, seeds) -> dict[str, list[float]]:
    """Validation accuracy of the plain and deformable ConvLSTM for each seed."""
    results = {"baseline": [], "deformable": []}
    for seed in seeds:
        for variant in ("baseline", "deformable"):
            mcfg = ModelConfig(**{**vars(model_cfg), "seed": seed})
            if variant == "baseline":
                mcfg.deformable_per_mark = 0
            tcfg = TrainConfig(**{**vars(train_cfg), "seed": seed})
            params = build(mcfg)
            fit(params, train, val, tcfg, log_path="", checkpoint_path="")
            acc = evaluate(params, val).accuracy
            log.info("seed %d %s val_acc %.4f", seed, variant, acc)
            results[variant].append(acc)
    return results


def format_ablation(results: dict[str, list[float]]) -> str:
    lines = ["model\tmean_val_acc\tper_seed"]
    for label, key in (("Normal ConvLSTM", "baseline"), ("Deformable ConvLSTM", "deformable")):
        accs = results[key]
        lines.append(f"{label}\t{np.mean(accs):.4f}\t" + ",".join(f"{a:.4f}" for a in accs))
    return "\n".join(lines)


# -- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    """Layout (little-endian): ``DCKP``, u16 version, u64 FNV-1a config hash,
    u32 config length + config text, u32 record count, then per tensor
    u16 name length, name, u8 rank, u32 extents, f32 payload."""
    text = params.config.dumps().encode()
    out = [CKPT_MAGIC, struct.pack("<HQI", CKPT_VERSION, params.config.hash(), len(text)), text,
           struct.pack("<I", len(params))]
    for name, v in params.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", v.value.ndim) + struct.pack(f"<{v.value.ndim}I", *v.shape))
        out.append(np.ascontiguousarray(v.value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelParams:
    data = Path(path).read_bytes()
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated at byte {pos})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if read(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, chash, clen = struct.unpack("<HQI", read(14))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig.loads(read(clen).decode())
    if cfg.hash() != chash:
        raise CheckpointError(f"{path}: corrupt checkpoint (config hash mismatch)")
    if expected is not None and expected.hash() != chash:
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
    (count,) = struct.unpack("<I", read(4))
    params = ModelParams(cfg)
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = read(nlen).decode()
        (rank,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{rank}I", read(4 * rank))
        n = int(np.prod(shape))
        value = np.frombuffer(read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Variable(value, requires_grad=True, name=name)
    if pos != len(data):
        raise CheckpointError(f"{path}: corrupt checkpoint (trailing bytes)")
    reference = build(cfg)
    if list(reference) != list(params) or any(
            reference[k].shape != params[k].shape for k in reference):
        raise CheckpointError(f"{path}: parameter set does not match its config")
    return params
