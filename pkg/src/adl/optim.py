"""Stochastic gradient descent with classical momentum."""

import numpy as np

from .errors import OptimizerError


class SgdMomentum:
    """Velocity update v = mu*v + (grad + wd*param); param -= lr*v.

    Weight decay is folded into the gradient before the velocity update, so
    it participates in momentum like any other gradient component.
    """

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=4e-5):
        if lr <= 0:
            raise OptimizerError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerError(f"parameter {name!r} has no gradient")
            v = self.velocities.get(name)
            if v is None or v.shape != p.data.shape:
                raise OptimizerError(f"velocity state missing or stale for {name!r}")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def sgd_momentum_step(param, grad, velocity, lr=0.01, momentum=0.9, weight_decay=0.0):
    """One functional update; returns (new_param, new_velocity)."""
    g = grad + weight_decay * param
    v = momentum * velocity + g
    return param - lr * v, v
