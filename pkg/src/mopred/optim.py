"""AdamW with decoupled weight decay, plus gradient-norm clipping."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError
from .nn import Parameter


def adamw_step(param, grad, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One bias-corrected AdamW update; mutates param/m/v in place."""
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** step)
    vhat = v / (1.0 - b2 ** step)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)


class AdamW:
    def __init__(
        self,
        named_params: list[tuple[str, Parameter]],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.named_params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {path: np.zeros_like(p.data) for path, p in self.named_params}
        self._v = {path: np.zeros_like(p.data) for path, p in self.named_params}

    def step(self, lr: float | None = None):
        if lr is not None:
            if lr <= 0:
                raise ConfigurationError(f"learning rate must be positive, got {lr}")
            self.lr = lr
        self.step_count += 1
        for path, p in self.named_params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_step(
                p.data,
                grad,
                self._m[path],
                self._v[path],
                self.step_count,
                self.lr,
                self.betas,
                self.eps,
                self.weight_decay,
            )

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def state_arrays(self, prefix: str = "optim.") -> dict[str, np.ndarray]:
        state = {}
        for path, _ in self.named_params:
            state[prefix + "m." + path] = self._m[path]
            state[prefix + "v." + path] = self._v[path]
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int, prefix: str = "optim."):
        for path, _ in self.named_params:
            self._m[path] = np.asarray(arrays[prefix + "m." + path], dtype=np.float64).copy()
            self._v[path] = np.asarray(arrays[prefix + "v." + path], dtype=np.float64).copy()
        self.step_count = int(step_count)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
