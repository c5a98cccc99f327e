"""Nesterov-accelerated Adam."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .exceptions import NonFiniteError
from .tensor import Parameter


class Nadam:
    """Nadam with a constant momentum schedule.

    For gradient ``g`` at step ``t``::

        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        m_hat = b1 * m / (1 - b1**(t + 1)) + (1 - b1) * g / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= lr * m_hat / (sqrt(v_hat) + eps)

    State (``m``, ``v``, ``step``) lives in each parameter's ``opt_state`` so
    it travels with the parameter through checkpoints.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        # validate everything first so a bad gradient leaves all parameters untouched
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {p.name}")
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            st = p.opt_state
            if "m" not in st:
                st["m"] = np.zeros_like(p.data)
                st["v"] = np.zeros_like(p.data)
                st["step"] = 0
            t = st["step"] + 1
            g = p.grad
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            m_hat = b1 * st["m"] / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * g / (1.0 - b1 ** t)
            v_hat = st["v"] / (1.0 - b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            st["step"] = t
            p.zero_grad()


def nadam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
    """Apply one Nadam update in place and zero the gradients."""
    Nadam(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps).step()
