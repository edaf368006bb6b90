"""Adam with decoupled weight decay.

Weight decay is applied as a separate shrinkage step `p -= lr * wd * p`
after the moment update rather than folded into the gradient, so the decay
strength does not depend on the adaptive moment scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    """Optimizer state bound to a fixed, ordered parameter list."""

    params: list[Tensor]
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def for_params(cls, params: Sequence[Tensor], learning_rate: float = 1e-4,
                   beta1: float = 0.9, beta2: float = 0.999,
                   weight_decay: float = 5e-4, eps: float = 1e-8) -> "AdamState":
        return cls(params=list(params), learning_rate=learning_rate, beta1=beta1,
                   beta2=beta2, weight_decay=weight_decay, eps=eps)


def ensure_grads(params: Sequence[Tensor]) -> None:
    """Zero-fill gradients of parameters the last backward never reached.

    Keeps one optimizer state valid across steps whose loss touches only a
    subset of the parameters (a zero gradient still applies weight decay
    and decays the moments).
    """
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected update of every parameter, in place.

    Gradients are left untouched; the caller zeroes them between steps.
    """
    params = list(params)
    if len(params) != len(state.params) or any(p is not q for p, q in zip(params, state.params)):
        raise ContractError("adam_step received a parameter list the state was not built for")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} has no gradient; run backward first")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        np.multiply(m, b1, out=m)
        m += (1.0 - b1) * g
        np.multiply(v, b2, out=v)
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= lr * update
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
