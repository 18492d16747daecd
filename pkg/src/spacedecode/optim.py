# coding: utf-8

import math
from typing import Dict, Sequence, Tuple

import numpy as np

from .core_math import ParamTensor

__all__ = ["Adam", "cosine_lr", "clip_grad_norm", "global_grad_norm"]


class Adam(object):
    """
    Adam with bias correction; one (m, v) moment pair per parameter.
    """

    def __init__(self,
                 params: Sequence[ParamTensor],
                 lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.state: Dict[str, Tuple[np.ndarray, np.ndarray]] = {
            p.name: (np.zeros_like(p.value), np.zeros_like(p.value)) for p in self.params}

    def step(self, lr: float = None) -> None:
        lr = self.lr if lr is None else lr
        beta1, beta2 = self.betas
        self.t += 1
        for p in self.params:
            m, v = self.state[p.name]
            m = beta1 * m + (1.0 - beta1) * p.grad
            v = beta2 * v + (1.0 - beta2) * p.grad * p.grad
            self.state[p.name] = (m, v)
            m_hat = m / (1.0 - beta1 ** self.t)
            v_hat = v / (1.0 - beta2 ** self.t)
            p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def cosine_lr(step: int, total_steps: int, max_lr: float, warmup_steps: int = 0, min_lr_ratio: float = 0.0) -> float:
    """
    Linear warmup to `max_lr`, then cosine decay to `max_lr * min_lr_ratio` at `total_steps`.
    """
    min_lr = max_lr * min_lr_ratio
    if step < warmup_steps:
        return max_lr * (step + 1) / warmup_steps
    if step >= total_steps:
        return min_lr
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return min_lr + (max_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: Sequence[ParamTensor]) -> float:
    return float(math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))


def clip_grad_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    """
    Scale all gradients so that their joint L2 norm is at most `max_norm` (0 disables clipping).

    :return: the norm before clipping
    """
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for p in params:
            p.grad = p.grad * coef
    return norm
