"""First-order optimizers that update :class:`~dfakd.tensor.Tensor` leaves in place."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


def _param_label(p: Tensor, index: int) -> str:
    return p.name or f"param[{index}] shape={p.shape}"


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params: list[Tensor] = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for k, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradError(f"no gradient for {_param_label(p, k)}")
            grads.append(p.grad)
        return grads


class SGD(Optimizer):
    """SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr)
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, g, v in zip(self.params, self._grads(), self.velocity):
            d = g + self.weight_decay * p.data if self.weight_decay else g
            v *= self.momentum
            v += d
            p.data -= self.lr * v


class Adam(Optimizer):
    """Adam with bias correction.

    Weight decay is coupled (added to the gradient) unless ``decoupled`` is
    set, in which case parameters shrink by ``lr * weight_decay`` directly.
    """

    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: Sequence[float] = (0.5, 0.999),
        weight_decay: float = 1e-3,
        eps: float = 1e-8,
        decoupled: bool = False,
    ):
        super().__init__(params, lr)
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.betas = (float(b1), float(b2))
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.decoupled = decoupled
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            if self.weight_decay and self.decoupled:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def multistep_lr(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float) -> float:
    """Learning rate after decaying ``base_lr`` by ``gamma`` at each passed milestone epoch."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)
