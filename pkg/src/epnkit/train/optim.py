"""Adam optimizer with bias correction and a step-halving schedule."""

import numpy as np


class Adam:
    """Standard Adam. Parameters are updated in place so layers keep their
    array references."""

    def __init__(self, params: dict, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, learning_rate=None) -> None:
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, p in self.params.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def decayed_learning_rate(base: float, epoch: int, half_every: int) -> float:
    """Exponential decay by half every `half_every` epochs; 0 disables decay."""
    if half_every <= 0:
        return base
    return base * 0.5 ** (epoch // half_every)
