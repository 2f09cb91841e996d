"""Tiny adaptive-moment descent used by tracking, mapping and exposure fitting.

Works on dicts of torch tensors and returns parameter *deltas* so the caller
decides how to apply them (tensors add, poses compose through the exp map).
"""

from __future__ import annotations

import torch


class Adam:
    def __init__(self, lrs, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        """lrs: either a single float or a dict keyed like the grad dicts."""
        self.lrs = lrs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def lr_for(self, key: str) -> float:
        if isinstance(self.lrs, dict):
            return self.lrs[key]
        return float(self.lrs)

    def step(self, grads: dict, lr_scale: float = 1.0) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        deltas = {}
        for key, g in grads.items():
            g = torch.as_tensor(g)
            m = self.m.get(key)
            if m is None:
                m = torch.zeros_like(g)
                self.v[key] = torch.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[key] + (1 - b2) * g * g
            self.m[key] = m
            self.v[key] = v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            deltas[key] = -(self.lr_for(key) * lr_scale) * m_hat / (v_hat.sqrt() + self.eps)
        return deltas
