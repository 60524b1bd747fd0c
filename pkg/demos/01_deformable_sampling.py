# Bilinear sampling and deformable convolution, step by step.
import numpy as np

from dclstm.kernels import Conv2DParams, bilinear_sample, conv2d, deformable_conv2d

img = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]  # 2x2, one channel

# integer coordinates read pixels; fractional ones blend the four neighbours
print(bilinear_sample(img, (0, 1)))        # [1.]
print(bilinear_sample(img, (0.5, 0.5)))    # [1.5]
print(bilinear_sample(img, (-0.5, 1.0)))   # [0.5] half the weight lands on the zero pad

rng = np.random.default_rng(0)
x = rng.random((6, 6, 2))
p = Conv2DParams(rng.normal(size=(3, 3, 2, 4)), np.zeros(4), stride=1, padding=1)

# offsets are [h, w, 2*taps]: (dy, dx) per tap, taps in row-major kernel order
zero = np.zeros((6, 6, 18))
same = np.abs(deformable_conv2d(x, p, zero).value - conv2d(x, p).value).max()
print("zero offsets vs conv2d:", same)

# move every tap half a pixel right: each output reads between columns
half = zero.copy()
half[..., 1::2] = 0.5
out = deformable_conv2d(x, p, half).value
print("shifted output shape:", out.shape)
