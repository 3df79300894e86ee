"""SGD with classical momentum and L2 weight decay.

Update rule per parameter: v <- momentum * v + grad + weight_decay * param,
then param <- param - lr * v.  Parameters with no gradient this step treat
grad as zero (momentum and decay still apply).
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .errors import ConfigError


class SgdMomentum:
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.params: list[tuple[str, Tensor]] = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self):
        for _, t in self.params:
            t.zero_grad()

    def step(self):
        for name, t in self.params:
            grad = t.grad if t.grad is not None else 0.0
            v = self.velocity[name]
            v *= self.momentum
            v += grad
            if self.weight_decay:
                v += self.weight_decay * t.data
            t.data = t.data - self.lr * v
