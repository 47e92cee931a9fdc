"""Tensor and computation tape.

Operations record themselves on the innermost active :class:`Tape`; when no
tape is active (inference) nothing is recorded and ops are plain numpy.
"""
import threading

import numpy as np

_state = threading.local()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 tensor, optionally tracking a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def values(self):
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through numgrad.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are appended in execution
    order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, backward):
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() before recording")
        out.requires_grad = True
        out._tape = self
        self.records.append(_Record(out, inputs, backward))

    def reset(self):
        self.records = []
        self.consumed = False

    def backward(self, loss):
        if not isinstance(loss, Tensor):
            raise TypeError("backward() expects a Tensor")
        if loss.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("backward() called twice on the same tape without reset()")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            rec.out.grad = g
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        # whatever is left belongs to leaves (parameters / inputs)
        leaves = {}
        for rec in self.records:
            for inp in rec.inputs:
                if inp.requires_grad and inp._tape is not self:
                    leaves[id(inp)] = inp
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None:
                continue
            if leaf.grad is None or leaf.grad.shape != g.shape:
                leaf.grad = np.array(g, dtype=np.float64)
            else:
                leaf.grad += g
        # outputs point back at the tape; drop that link so a finished step is
        # freed by reference counting instead of waiting for the cycle collector
        for rec in self.records:
            rec.out._tape = None


def backward(loss):
    """Backpropagate a scalar loss through the tape that produced it."""
    tape = loss._tape if isinstance(loss, Tensor) else None
    if tape is None:
        raise RuntimeError("loss was not produced on a recording tape")
    tape.backward(loss)


def record_op(out_data, inputs, backward_fn):
    """Wrap ``out_data`` as a Tensor and record it if any input needs grad."""
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out
