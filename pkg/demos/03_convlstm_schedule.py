# Which ConvLSTM steps run deformable, and what a zero offset predictor means.
import numpy as np

from dclstm.convlstm import ConvLSTMCellParams, deformable_schedule, unroll
from dclstm.model import ModelConfig, shape_table

print("t=32:", deformable_schedule(32))
print("t=16:", deformable_schedule(16))   # what the default model actually uses

for stage, shape in shape_table(ModelConfig()):
    print(f"{stage:9s} {shape}")

cell = ConvLSTMCellParams.init(in_channels=2, hidden=4, rng=np.random.default_rng(1))
x = np.random.default_rng(2).random((6, 8, 8, 2), dtype=np.float32)
plain = unroll(x, cell).value
deform = unroll(x, cell, schedule=deformable_schedule(6)).value
print("zero-init predictor, max diff:", np.abs(plain - deform).max())

# once the predictor has weights the scheduled steps diverge
cell.offset.bias.value[:] = 0.7
deform = unroll(x, cell, schedule=deformable_schedule(6)).value
print("per-step diff:", np.abs(plain - deform).max(axis=(1, 2, 3)).round(4))
