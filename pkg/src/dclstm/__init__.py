"""Deformable ConvLSTM video classification on a small numpy autodiff core."""

from .autodiff import Tape, Variable, backward
from .convlstm import ConvLSTMCellParams, ConvLSTMState, convlstm_step, deformable_schedule, unroll
from .data import AugmentSpec, VideoClip, augment, synth_dataset, train_val_split, uniform_sample
from .kernels import Conv2DParams, Conv3DParams, conv2d, conv3d, deformable_conv2d
from .model import ModelConfig, build, forward, param_count
from .train import TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

__all__ = [
    "AugmentSpec", "Conv2DParams", "Conv3DParams", "ConvLSTMCellParams", "ConvLSTMState", "ModelConfig",
    "Tape", "TrainConfig", "Variable", "VideoClip", "augment", "backward", "build", "conv2d", "conv3d",
    "convlstm_step", "deformable_conv2d", "deformable_schedule", "evaluate", "fit", "forward",
    "load_checkpoint", "param_count", "save_checkpoint", "synth_dataset", "train_val_split",
    "uniform_sample", "unroll",
]
__version__ = "0.1.0"
