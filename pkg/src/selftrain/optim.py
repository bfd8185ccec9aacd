"""Adam with linear warmup followed by linear decay.

The effective learning rate at step t is

    lr_base * min(t / warmup_steps, max(0, (total_steps - t) / (total_steps - warmup_steps)))

so it climbs linearly to lr_base at t = warmup_steps and falls linearly to 0
at t = total_steps. Weight decay is the classic coupled form (decay added to
the gradient before the moment updates); parameters flagged ``decay=False``
(biases, layer-norm affines) are exempt.
"""

from __future__ import annotations

import logging
from typing import Iterable

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


def lr_at(step: int, lr_base: float, warmup_steps: int, total_steps: int) -> float:
    """Learning rate schedule; continuous, peaks at warmup, 0 at total_steps."""
    if total_steps <= 0:
        return lr_base
    if warmup_steps > 0:
        warm = step / warmup_steps
    else:
        warm = 1.0
    if total_steps > warmup_steps:
        decay = (total_steps - step) / (total_steps - warmup_steps)
    else:
        decay = 1.0
    return lr_base * min(warm, max(0.0, decay))


class Adam:
    """Bias-corrected Adam over a list of (name, tensor, decay-flag) slots."""

    def __init__(
        self,
        params: Iterable,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        warmup_steps: int = 0,
        total_steps: int = 0,
    ):
        self.slots = []
        for entry in params:
            if isinstance(entry, Tensor):
                name, tensor, decay = "", entry, True
            else:
                name, tensor, decay = entry
            self.slots.append(
                {
                    "name": name,
                    "param": tensor,
                    "decay": bool(decay),
                    "m": np.zeros_like(tensor.data),
                    "v": np.zeros_like(tensor.data),
                }
            )
        self.lr_base = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.t = 0
        self._warned_exhausted = False

    @property
    def lr(self) -> float:
        return lr_at(self.t, self.lr_base, self.warmup_steps, self.total_steps)

    def step(self):
        """Apply one Adam update to every slot with a gradient, then zero grads."""
        self.t += 1
        lr_eff = self.lr
        if self.total_steps and self.t > self.total_steps and not self._warned_exhausted:
            log.warning(
                "optimizer stepped past total_steps=%d; learning rate clamped to 0",
                self.total_steps,
            )
            self._warned_exhausted = True
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for slot in self.slots:
            p = slot["param"]
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and slot["decay"]:
                g = g + self.weight_decay * p.data
            m, v = slot["m"], slot["v"]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if lr_eff:
                mhat = m / bc1
                vhat = v / bc2
                p.data -= (lr_eff * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = None

    def zero_grad(self):
        for slot in self.slots:
            slot["param"].grad = None
