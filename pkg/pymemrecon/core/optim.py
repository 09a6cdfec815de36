__all__ = [
    'AdamW',
    'OptimizerConfig',
]


from dataclasses import (
    asdict,
    dataclass,
)

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-5
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05

    def validate(self):
        errors = []
        if not self.lr > 0:
            errors.append(f'lr: must be positive, got {self.lr!r}')
        if len(self.betas) != 2 or not all(0.0 <= beta < 1.0 for beta in self.betas):
            errors.append(f'betas: must be two values in [0, 1), got {self.betas!r}')
        if not self.eps > 0:
            errors.append(f'eps: must be positive, got {self.eps!r}')
        if not self.weight_decay >= 0:
            errors.append(f'weight_decay: must be non-negative, got {self.weight_decay!r}')
        return errors

    def to_dict(self):
        return asdict(self)


class AdamW:
    """
    Adam with decoupled weight decay. Decay applies to matrices only
    (weights of linear layers and embeddings), never to biases or
    normalisation gains.

    Parameter values are replaced, never updated in place, and keep their
    dtype.
    """
    def __init__(self, parameters, config=None):
        self.config = config if config is not None else OptimizerConfig()
        self.params = list(parameters)
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.t = 0

    def __repr__(self):
        return (
            f'{self.__module__}.{self.__class__.__name__}('
            f'{self.config!r}, step={self.t}'
            f')'
        )

    def step(self):
        lr = self.config.lr
        beta1, beta2 = self.config.betas
        self.t += 1

        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            grad = np.asarray(p.grad, dtype=np.float64)
            self.m[i] = beta1 * self.m[i] + (1 - beta1) * grad
            self.v[i] = beta2 * self.v[i] + (1 - beta2) * grad ** 2
            m_hat = self.m[i] / (1 - beta1 ** self.t)
            v_hat = self.v[i] / (1 - beta2 ** self.t)

            data = p.data.astype(np.float64)
            if p.ndim >= 2 and self.config.weight_decay:
                data = data * (1 - lr * self.config.weight_decay)
            data = data - lr * m_hat / (np.sqrt(v_hat) + self.config.eps)
            p.data = data.astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
