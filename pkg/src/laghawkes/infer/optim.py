"""Adaptive-moment gradient ascent and the positivity transforms used by the fits."""

from __future__ import annotations

import numpy as np


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    # log(expm1(y)) without overflow for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Adam:
    """Per-coordinate adaptive moments; maximizes (``step`` adds the scaled gradient)."""

    def __init__(self, lr: float = 1e-2, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] + lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def moving_average(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size < window:
        return np.array([x.mean()]) if x.size else x
    # each window summed on its own, so a monotone input gives a monotone output
    return np.lib.stride_tricks.sliding_window_view(x, window).mean(axis=1)
