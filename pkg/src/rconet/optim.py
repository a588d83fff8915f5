"""Adam with decoupled weight decay."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericWarning

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params, grads, state: AdamState, lr, weight_decay, decay=None, betas=BETAS, eps=EPS):
    """One in-place update of ``params`` (name -> ndarray).

    ``decay`` names the parameters that receive weight decay (default: all).
    A non-finite gradient anywhere skips the whole step and warns. Returns
    True when a step was taken.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            warnings.warn(f"non-finite gradient in {name}; step skipped", NumericWarning, stacklevel=2)
            return False
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ContractError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and (decay is None or name in decay):
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


def default_decay(names):
    """Weight decay on convolution/dense/projector weights only, never on
    normalization parameters or biases."""
    return {n for n in names if n.endswith("weight")}


class Adam:
    def __init__(self, params, lr=2e-4, weight_decay=1e-4, decay=None):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.decay = default_decay(self.params) if decay is None else set(decay)
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        return adam_step({n: p.data for n, p in self.params.items()}, grads, self.state,
                         self.lr, self.weight_decay, self.decay)
