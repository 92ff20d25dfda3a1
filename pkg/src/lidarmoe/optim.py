"""Adaptive-moment optimizer with decoupled weight decay and a one-cycle
learning-rate schedule: linear warmup over the first 10% of steps to the
configured peak, then cosine decay to peak/100 at the final step."""

from __future__ import annotations

import numpy as np


def one_cycle_lr(step: int, total_steps: int, peak: float) -> float:
    """Learning rate at ``step`` (0-based) of a ``total_steps`` run."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    warmup = max(1, int(round(0.1 * total_steps)))
    if step < warmup:
        return peak * (step + 1) / warmup
    end = peak / 100.0
    span = max(1, total_steps - warmup)
    progress = (step - warmup + 1) / span
    return end + (peak - end) * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Per-parameter moment estimates over a ParameterStore's trainables.

    Frozen parameters are never touched. The update uses beta1=0.9,
    beta2=0.999, eps=1e-8 with bias correction and decoupled weight decay.
    """

    def __init__(self, store, peak_lr, total_steps, weight_decay=0.01,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.peak_lr = float(peak_lr)
        self.total_steps = int(total_steps)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, grads: dict) -> float:
        """Apply one update from ``grads`` (name -> array); returns the lr used."""
        trainable = set(self.store.trainable_names())
        extra = set(grads) - trainable
        if extra:
            raise ValueError(f"gradients for non-trainable parameters: {sorted(extra)}")
        lr = one_cycle_lr(self.step_count, self.total_steps, self.peak_lr)
        t = self.step_count + 1
        for name in sorted(grads):
            g = grads[name].astype(np.float64)
            theta = self.store.get(name).astype(np.float64)
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            theta -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                           + self.weight_decay * theta)
            self.store.set(name, theta)
        self.step_count += 1
        return lr
