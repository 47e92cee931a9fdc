"""Small module system: parameter containers and transformer building blocks."""
import math
from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(shape, rng, fan_in=None, name=None):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialised parameter."""
    fan_in = fan_in if fan_in is not None else shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def constant(shape, value, name=None):
    return Tensor(np.full(shape, float(value)), requires_grad=True, name=name)


class Module:
    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, val in self.__dict__.items():
            full = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[full] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(full + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
            p.grad = np.zeros_like(p.data)

    def n_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = parameter((n_in, n_out), rng, fan_in=n_in)
        self.bias = parameter((n_out,), rng, fan_in=n_in) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, n, eps=1e-5):
        self.gain = constant((n,), 1.0)
        self.bias = constant((n,), 0.0)
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, query, key_value):
        return ops.attention(self.q(query), self.k(key_value), self.v(key_value), self.heads,
                             self.out.weight, self.out.bias)


class FeedForward(Module):
    def __init__(self, d, hidden, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d, heads, rng):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, 4 * d, rng)

    def __call__(self, x):
        h = self.norm1(x)
        a, w = self.attn(h, h)
        x = ops.add(x, a)
        x = ops.add(x, self.ff(self.norm2(x)))
        return x, w


class DecoderLayer(Module):
    """Pre-norm cross-attention block (queries attend over a memory)."""

    def __init__(self, d, heads, rng):
        self.norm_q = LayerNorm(d)
        self.norm_m = LayerNorm(d)
        self.cross = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, 4 * d, rng)

    def __call__(self, x, memory):
        a, w = self.cross(self.norm_q(x), self.norm_m(memory))
        x = ops.add(x, a)
        x = ops.add(x, self.ff(self.norm2(x)))
        return x, w


def sinusoidal_encoding(n_positions, d):
    pos = np.arange(n_positions)[:, None]
    i = np.arange(d)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))
