"""Central finite-difference gradient checks."""
import numpy as np

from .tensor import Tape


def numeric_grad(fn, tensor, h=1e-5):
    """d fn() / d tensor by central differences; ``fn`` returns a scalar Tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn().item()
        flat[i] = old - h
        fm = fn().item()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn, tensors):
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [t.grad.copy() for t in tensors]


def relative_error(a, b, floor=1e-12):
    """``||a - b|| / (||a|| + ||b||)`` over the whole tensor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def max_relative_error(fn, tensors, h=1e-5):
    """Worst per-tensor relative error between analytic and numeric gradients."""
    grads = analytic_grads(fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        worst = max(worst, relative_error(g, numeric_grad(fn, t, h)))
    return worst
