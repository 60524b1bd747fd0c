# Train a tiny model on the synthetic moving-blob corpus (about a minute on one core; 8 epochs).
import logging

import numpy as np

from dclstm import data
from dclstm.model import ModelConfig, build, param_count
from dclstm.train import TrainConfig, evaluate, fit

logging.basicConfig(level=logging.INFO, format="%(message)s")

clips = data.synth_dataset(200, 4, 16, 32, 32, seed=0)
train, val = data.train_val_split(clips, 0.2, seed=0)
print(len(train), "train /", len(val), "val")

cfg = ModelConfig(frames=16, height=32, width=32, conv3d_channels=(8, 16), hidden=16,
                  head_channels=(16, 16, 16), num_classes=4)
params = build(cfg)
print("parameters:", param_count(params), "schedule:", cfg.schedule())

print("before:", evaluate(params, val).accuracy)
fit(params, train, val, TrainConfig(epochs=8, batch_size=8, learning_rate=3e-3))
m = evaluate(params, val)
print(m.format())

# augmentation keeps every value in [0, 1]
aug = data.augment(val[0], data.AugmentSpec("none", 20.0, 1.0, 0.2))
print("augmented range:", float(aug.frames.min()), float(aug.frames.max()))
