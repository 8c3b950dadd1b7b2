"""Adam with the Noam warmup/decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ParamStore


@dataclass(frozen=True)
class NoamSchedule:
    """lr rises linearly for warmup_steps then decays as step^-0.5.

    Normalized so the peak (attained exactly at step == warmup_steps) equals
    peak_lr; model_dim is carried for completeness but the peak normalization
    replaces the usual dim^-0.5 factor.
    """

    peak_lr: float = 0.001
    warmup_steps: int = 4000
    model_dim: int = 128

    def lr(self, step: int) -> float:
        if step < 1:
            raise ValueError("schedule step starts at 1")
        w = float(self.warmup_steps)
        return self.peak_lr * np.sqrt(w) * min(step**-0.5, step * w**-1.5)


def adam_step(
    store: ParamStore,
    schedule: NoamSchedule,
    l2: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> float:
    """One Adam update over every parameter with a populated gradient.

    The L2 term contributes 2*l2*theta to each gradient before the moment
    updates, matching the gradient of l2*||theta||^2. Returns the lr used.
    """
    store.step += 1
    lr = schedule.lr(store.step)
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.items():
        if p.grad is None and l2 == 0.0:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if l2 != 0.0:
            g = g + 2.0 * l2 * p.data
        m, v = store.adam_state(name)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return lr
