"""Small feed-forward nets with hand-written reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


def symlog(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.expm1(np.abs(x))


def symexp_grad(x):
    """d symexp(x) / dx."""
    return np.exp(np.abs(np.asarray(x, dtype=float)))


@dataclass
class ParamNet:
    """MLP: ``[affine -> (layer norm) -> relu] * len(hidden) -> affine``.

    Parameters live in ``params`` keyed ``W{i}``, ``b{i}`` and, with layer
    norm, ``g{i}``/``beta{i}``; the output layer has index ``len(hidden)``.
    ``head`` is ``"linear"`` or ``"symlog"``; for a symlog head the raw
    output is read as symlog of the prediction.
    """

    in_dim: int
    out_dim: int
    hidden: tuple = (64, 64)
    layer_norm: bool = False
    zero_init: bool = True
    head: str = "linear"
    ln_eps: float = 1e-6
    seed: Optional[int] = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head not in ("linear", "symlog"):
            raise ValueError(f"unknown head kind {self.head!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.params:
            self.params = self._init_params(np.random.default_rng(self.seed))

    def _init_params(self, rng: np.random.Generator) -> dict:
        params = {}
        sizes = (self.in_dim,) + self.hidden
        for i in range(len(self.hidden)):
            fan_in = sizes[i]
            params[f"W{i}"] = rng.standard_normal((fan_in, sizes[i + 1])) * np.sqrt(2.0 / fan_in)
            params[f"b{i}"] = np.zeros(sizes[i + 1])
            if self.layer_norm:
                params[f"g{i}"] = np.ones(sizes[i + 1])
                params[f"beta{i}"] = np.zeros(sizes[i + 1])
        L = len(self.hidden)
        fan_in = sizes[-1]
        if self.zero_init:
            params[f"W{L}"] = np.zeros((fan_in, self.out_dim))
        else:
            params[f"W{L}"] = rng.standard_normal((fan_in, self.out_dim)) * np.sqrt(1.0 / fan_in)
        params[f"b{L}"] = np.zeros(self.out_dim)
        return params

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def forward(self, X: np.ndarray):
        """Raw outputs ``[N, out_dim]`` and a cache for :meth:`backward`."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"expected input [N, {self.in_dim}], got {X.shape}")
        p = self.params
        cache = {"x0": X}
        h = X
        for i in range(len(self.hidden)):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            if self.layer_norm:
                mean = z.mean(axis=1, keepdims=True)
                var = z.var(axis=1, keepdims=True)
                inv = 1.0 / np.sqrt(var + self.ln_eps)
                zhat = (z - mean) * inv
                cache[f"zhat{i}"], cache[f"inv{i}"] = zhat, inv
                z = zhat * p[f"g{i}"] + p[f"beta{i}"]
            cache[f"z{i}"] = z
            h = np.maximum(z, 0.0)
            cache[f"x{i + 1}"] = h
        L = len(self.hidden)
        out = h @ p[f"W{L}"] + p[f"b{L}"]
        return out, cache

    def __call__(self, X):
        return self.forward(X)[0]

    def backward(self, cache: dict, dout: np.ndarray):
        """Gradients of ``sum(dout * out)`` w.r.t. params and input."""
        p = self.params
        grads = {}
        L = len(self.hidden)
        dout = np.asarray(dout, dtype=float)
        h = cache[f"x{L}"]
        grads[f"W{L}"] = h.T @ dout
        grads[f"b{L}"] = dout.sum(axis=0)
        dh = dout @ p[f"W{L}"].T
        for i in range(L - 1, -1, -1):
            dz = dh * (cache[f"z{i}"] > 0)
            if self.layer_norm:
                zhat, inv = cache[f"zhat{i}"], cache[f"inv{i}"]
                grads[f"g{i}"] = np.sum(dz * zhat, axis=0)
                grads[f"beta{i}"] = dz.sum(axis=0)
                dzhat = dz * p[f"g{i}"]
                n = zhat.shape[1]
                dz = inv / n * (n * dzhat - dzhat.sum(axis=1, keepdims=True)
                                - zhat * np.sum(dzhat * zhat, axis=1, keepdims=True))
            x = cache[f"x{i}"]
            grads[f"W{i}"] = x.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ p[f"W{i}"].T
        return grads, dh

    def predict(self, X):
        """Prediction in value space (symexp applied for symlog heads)."""
        raw = self(X)
        return symexp(raw) if self.head == "symlog" else raw

    def clone(self) -> "ParamNet":
        return ParamNet(self.in_dim, self.out_dim, self.hidden, self.layer_norm, self.zero_init,
                        self.head, self.ln_eps, self.seed,
                        {k: v.copy() for k, v in self.params.items()})


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_grads(total: dict, extra: dict, scale: float = 1.0) -> dict:
    for k, v in extra.items():
        total[k] = total[k] + scale * v if k in total else scale * v
    return total


def flatten(params: dict) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)]) if params else np.zeros(0)


def unflatten(vector: np.ndarray, like: dict) -> dict:
    out, i = {}, 0
    for k in sorted(like):
        n = like[k].size
        out[k] = vector[i:i + n].reshape(like[k].shape).copy()
        i += n
    return out


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
