"""Adam with global gradient-norm clipping and non-finite step skipping."""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float = 1.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.skipped = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, T.Tensor]) -> None:
        """One update in place (tensors are replaced, not mutated).

        Gradients are read from .grad (missing grads count as zero), clipped
        to a global norm of clip_norm, then applied with bias-corrected
        moments.  A non-finite gradient anywhere skips the whole step.
        """
        grads = {}
        sq_sum = 0.0
        finite = True
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if not np.all(np.isfinite(g)):
                finite = False
                break
            grads[name] = g
            sq_sum += float((g * g).sum())
        if not finite:
            self.skipped += 1
            self.zero_grad(params)
            return
        norm = np.sqrt(sq_sum)
        scale = 1.0 if norm <= self.clip_norm else self.clip_norm / norm

        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name] * scale
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.values)
                v = np.zeros_like(p.values)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            update = self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            params[name] = T.Tensor.param(p.values - update)

    @staticmethod
    def zero_grad(params: dict[str, T.Tensor]) -> None:
        for p in params.values():
            p.zero_grad()
