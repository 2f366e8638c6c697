import logging
from typing import Iterable

import numpy as np

from .Tensor import Tensor
from .protofed_aux import ConfigurationError
from .protofed_types import OptimizerKind

logger = logging.getLogger(__name__)


class Optimizer(object):
    """Updates a fixed list of trainable tensors in place from their ``grad``.

    Per-parameter state lives on the optimizer and survives across calls to
    ``step`` until ``reset`` is called.
    """

    def __init__(self, params: Iterable[Tensor], learning_rate: float):
        self.params = list(params)
        if learning_rate < 0:
            raise ConfigurationError(
                f"learning rate must be >= 0, got {learning_rate}")
        if any(not p.trainable for p in self.params):
            raise ConfigurationError("optimizers only accept trainable tensors")
        self.learning_rate = learning_rate
        self.reset()

    def reset(self) -> None:
        pass

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.learning_rate * p.grad


class Adam(Optimizer):

    def __init__(self, params: Iterable[Tensor], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        super().__init__(params, learning_rate)

    def reset(self) -> None:
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * p.grad ** 2
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - self.learning_rate * update).astype(p.dtype)


def make_optimizer(kind: OptimizerKind, params: Iterable[Tensor],
                   learning_rate: float) -> Optimizer:
    if kind is OptimizerKind.Adam:
        return Adam(params, learning_rate)
    if kind is OptimizerKind.SGD:
        return SGD(params, learning_rate)
    raise ConfigurationError(f"unknown optimizer {kind}")
