# The tape records ops while it is open; backward walks it in reverse.
import numpy as np

from dclstm import autodiff as ad
from dclstm import gradcheck

w = ad.Variable(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
x = np.array([[1.0], [2.0]])

with ad.Tape() as tape:
    y = ad.tanh(w @ x)
    loss = ad.sum_all(y * y)
ad.backward(tape, loss)
print("d loss / d w =\n", w.grad)

# same gradient from central differences in float64
num = ad.finite_diff_grad(lambda a: float(np.sum(np.tanh(a @ x) ** 2)), w.value)
print("relative error:", ad.relative_error(w.grad, num))

# every kernel ships a random check; float32 gradients are judged against float64 differences
for name in ("conv2d", "deformable_conv2d", "cross_entropy"):
    print(f"{name:18s} f32 {gradcheck.run(name, 2, dtype=np.float32):.1e}  "
          f"f64 {gradcheck.run(name, 2, dtype=np.float64):.1e}")
