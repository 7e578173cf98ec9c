#!/usr/bin/env python3
# The tensor library in isolation: forward operators, a recorded graph,
# and gradients checked against finite differences.

import numpy as np

from microct_seg.autodiff import (ConvParams, Tensor, backward, bce_with_logits,
                                  conv2d, maxpool2d, relu, tensor_sum)

rng = np.random.default_rng(0)

# a 3x3 all-ones kernel over a single window is just the window sum
x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
k = Tensor(np.ones((1, 1, 3, 3)))
print("conv of 1..9 with ones kernel:", conv2d(x, k, None, ConvParams.square(3)).data.ravel())

# gradients flow through compositions; grad buffers live on the leaves
w = Tensor(rng.standard_normal((4, 1, 3, 3)) * 0.5, requires_grad=True)
inp = Tensor(rng.standard_normal((1, 1, 8, 8)))
out = maxpool2d(relu(conv2d(inp, w, None, ConvParams.square(3, pad=1))))
loss = tensor_sum(out)
backward(loss)
print("loss:", float(loss.data), " grad shape:", w.grad.shape)

# central-difference spot check on one weight coordinate
h = 1e-5
idx = (2, 0, 1, 1)
orig = w.data[idx]
w.data[idx] = orig + h
fp = float(tensor_sum(maxpool2d(relu(conv2d(inp, w, None, ConvParams.square(3, pad=1))))).data)
w.data[idx] = orig - h
fm = float(tensor_sum(maxpool2d(relu(conv2d(inp, w, None, ConvParams.square(3, pad=1))))).data)
w.data[idx] = orig
fd = (fp - fm) / (2 * h)
print(f"autodiff {w.grad[idx]:+.6f} vs finite difference {fd:+.6f}")

# the loss used during training: sigmoid binary cross-entropy over
# per-class planes; zero logits sit exactly at ln 2
logits = Tensor(np.zeros((1, 2, 4, 4)))
targets = np.zeros((1, 2, 4, 4))
targets[0, 0] = 1.0
print("BCE at zero logits:", float(bce_with_logits(logits, targets).data),
      "(ln 2 =", float(np.log(2)), ")")
