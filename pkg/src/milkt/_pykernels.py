"""Pure-numpy versions of the compiled kernels in ``milkt._ext.ckernels``.

Same floating-point operation order as the compiled loops, so both backends
give bit-identical results.
"""

import math

import numpy as np


def adam_update(p, g, m, v, lr, weight_decay, beta1, beta2, eps, bc1, bc2):
    if not (p.shape == g.shape == m.shape == v.shape):
        raise ValueError("adam_update: buffer lengths differ")
    step_size = lr / bc1
    inv_sqrt_bc2 = 1.0 / math.sqrt(bc2)
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= (lr * weight_decay) * p
    p -= step_size * m / (np.sqrt(v) * inv_sqrt_bc2 + eps)
