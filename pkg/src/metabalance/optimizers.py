"""Update rules consuming an already-balanced, summed gradient.

Optimizers never see per-task gradients or balancer state: whatever happened
to the task gradients before summation is invisible here.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import ConfigurationError, ContractViolation, TrainingFault


class Optimizer:
    name = "base"

    def __init__(self, lr: float):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.step_count = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def _delta(self, name: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_update(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place, group by group in ``params`` order."""
        if set(params) != set(grads):
            raise ContractViolation("optimizer: parameter and gradient group keys differ")
        self.step_count += 1
        deltas = {}
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ContractViolation(f"optimizer: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            d = self._delta(name, g)
            if not np.isfinite(d).all():
                raise TrainingFault(f"non-finite {self.name} update for group {name!r} at step {self.step_count}")
            deltas[name] = d
        for name, p in params.items():
            p -= deltas[name]


class SGD(Optimizer):
    """theta <- theta - lr * G."""

    name = "sgd"

    def __init__(self, lr: float = 0.01):
        super().__init__(lr)

    def _delta(self, name, grad):
        return self.lr * grad


class Adam(Optimizer):
    name = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _delta(self, name, grad):
        st = self.state.setdefault(name, {"m": np.zeros_like(grad), "v": np.zeros_like(grad)})
        st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * grad
        st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * grad * grad
        m_hat = st["m"] / (1 - self.beta1 ** self.step_count)
        v_hat = st["v"] / (1 - self.beta2 ** self.step_count)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Adagrad(Optimizer):
    name = "adagrad"

    def __init__(self, lr: float = 0.01, eps: float = 1e-10):
        super().__init__(lr)
        self.eps = eps

    def _delta(self, name, grad):
        st = self.state.setdefault(name, {"sum_sq": np.zeros_like(grad)})
        st["sum_sq"] = st["sum_sq"] + grad * grad
        return self.lr * grad / (np.sqrt(st["sum_sq"]) + self.eps)


class RMSProp(Optimizer):
    name = "rmsprop"

    def __init__(self, lr: float = 1e-3, decay: float = 0.99, eps: float = 1e-8):
        super().__init__(lr)
        self.decay, self.eps = decay, eps

    def _delta(self, name, grad):
        st = self.state.setdefault(name, {"sq": np.zeros_like(grad)})
        st["sq"] = self.decay * st["sq"] + (1 - self.decay) * grad * grad
        return self.lr * grad / (np.sqrt(st["sq"]) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam, "adagrad": Adagrad, "rmsprop": RMSProp}


def make_optimizer(name: str, **hyper) -> Optimizer:
    try:
        cls = OPTIMIZERS[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}") from None
    return cls(**hyper)


def apply_update(optimizer: Optimizer, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    optimizer.apply_update(params, grads)
