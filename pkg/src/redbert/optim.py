"""Adam optimizer with a constant learning rate, plus gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """Optimizer state; moment buffers are allocated lazily per parameter."""

    learning_rate: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    The learning rate never changes during a run. Parameters are updated
    in place from their accumulated ``.grad`` buffers; a parameter whose
    grad is None is skipped (it did not participate in the loss).
    """

    def __init__(self, params: list[Tensor], learning_rate: float = 2e-5,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    def step(self):
        s = self.state
        s.step_count += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(
                    f"param {i}: grad shape {p.grad.shape} != "
                    f"param shape {p.data.shape}")
            if i not in s.first_moment:
                s.first_moment[i] = np.zeros_like(p.data)
                s.second_moment[i] = np.zeros_like(p.data)
            kernels.adam_update(
                p.data, p.grad, s.first_moment[i], s.second_moment[i],
                s.learning_rate, s.beta1, s.beta2, s.epsilon, s.step_count)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad.astype(np.float64)).sum())
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm
