"""Adaptive-moment optimizer and gradient clipping.

State (first/second moments, step count) is keyed by parameter name so it
survives checkpointing and reload in a stable order.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, InputError
from .tensor import Tensor


def global_grad_norm(params: list[tuple[str, Tensor]]) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(params: list[tuple[str, Tensor]],
                     max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ConfigError(f"clip threshold {max_norm} must be positive")
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class Adam:
    """First/second-moment adaptive updates with bias correction."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate {lr} must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"moment decays ({beta1}, {beta2}) outside "
                              f"[0, 1)")
        names = [n for n, _ in params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in optimizer")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in params}
        self._v = {n: np.zeros_like(p.data) for n, p in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - (p.data.dtype.type(self.lr) * update).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self._m:
            out[f"optim/m/{name}"] = self._m[name]
            out[f"optim/v/{name}"] = self._v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray],
                          t: int) -> None:
        for name in self._m:
            mk, vk = f"optim/m/{name}", f"optim/v/{name}"
            if mk not in arrays or vk not in arrays:
                raise InputError(f"optimizer state missing for {name}")
            if arrays[mk].shape != self._m[name].shape:
                raise InputError(f"optimizer state shape mismatch for "
                                 f"{name}")
            self._m[name] = arrays[mk].astype(self._m[name].dtype)
            self._v[name] = arrays[vk].astype(self._v[name].dtype)
        self.t = int(t)

    def meta(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "t": self.t}
