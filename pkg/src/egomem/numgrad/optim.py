"""Adam with decoupled weight decay."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, grads=None):
    """Apply one Adam update in place.

    ``params`` maps names to tensors; gradients are taken from ``grads`` (same
    keys) when given, else from each tensor's ``.grad``. Weight decay is
    decoupled: ``p -= lr * wd * p`` alongside the adaptive step.
    """
    items = list(params.items())
    for name, p in items:
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in items:
        g = grads[name] if grads is not None else p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - state.lr * update
    return params


class Adam:
    def __init__(self, named_params, lr=1e-4, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
