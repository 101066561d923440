"""Adam optimizer with the step-wise learning-rate schedule used for training."""

import numpy as np


class AdamState:
    """First/second moment buffers plus the shared step counter.

    Defaults beta1=0.9, beta2=0.999, eps=1e-8.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` aligns with ``params``; shapes must match their moment buffers.
    Deterministic given inputs.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)


def learning_rate(step, base=1e-3):
    """Step-indexed schedule: base up to 50k, /10 from 50k, /100 from 80k."""
    if step < 50_000:
        return base
    if step < 80_000:
        return base * 1e-1
    return base * 1e-2
