"""Optimizers over named parameter dictionaries.

Parameters and gradients are plain {name: ndarray} dicts with a stable
insertion order; updates return fresh arrays and never mutate inputs, while
the optimizer state object is updated in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update; zero gradients leave parameters unchanged."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


@dataclass
class MomentumState:
    v: dict = field(default_factory=dict)


def momentum_step(params: dict, grads: dict, state: MomentumState, lr: float,
                  momentum: float = 0.9) -> dict:
    """Heavy-ball update: v <- momentum*v + g, p <- p - lr*v."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        v = state.v.get(name)
        v = g if v is None else momentum * v + g
        state.v[name] = v
        out[name] = p - lr * v
    return out


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients jointly so their global norm is at most max_norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
