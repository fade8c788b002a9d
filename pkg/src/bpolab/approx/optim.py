"""Adam with global-norm clipping, Polyak shadows, parameter archives."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import global_norm


@dataclass
class OptimizerState:
    """Adam moments for one parameter dict; updates parameters in place."""

    params: dict
    lr: float = 3e-4
    eps: float = 1e-5
    max_grad: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))

    def step(self, grads: dict, lr: float | None = None) -> float:
        """Clip by global norm, apply one Adam step. Returns the pre-clip norm."""
        for k, g in grads.items():
            if k not in self.params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient {k} has shape {g.shape}, parameter {self.params[k].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k!r}")
        norm = global_norm(grads)
        scale = 1.0
        if self.max_grad is not None and norm > self.max_grad:
            scale = self.max_grad / norm
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for k, p in self.params.items():
            g = grads[k] * scale if k in grads else np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


def adam_step(opt: OptimizerState, grads: dict, lr: float | None = None) -> float:
    return opt.step(grads, lr)


@dataclass
class PolyakState:
    """Shadow parameters tracking ``source`` at rate ``tau``."""

    shadow: dict
    tau: float = 0.02

    def __post_init__(self):
        if not (0.0 < self.tau <= 1.0):
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")

    @classmethod
    def of(cls, params: dict, tau: float = 0.02) -> "PolyakState":
        return cls({k: v.copy() for k, v in params.items()}, tau)


def polyak_update(state: PolyakState, params: dict) -> None:
    for k, p in params.items():
        if state.shadow[k].shape != p.shape:
            raise ValueError(f"shadow {k} has shape {state.shadow[k].shape}, source {p.shape}")
        state.shadow[k] *= 1.0 - state.tau
        state.shadow[k] += state.tau * p


def save_params(path, params: dict) -> None:
    """Write a ``.npz`` archive; each array keeps its name, dtype and shape."""
    with open(path, "wb") as fh:
        np.savez(fh, **params)


def load_params(path) -> dict:
    with np.load(path) as data:
        return {k: data[k].copy() for k in data.files}
