"""Differentiable operations.

Every op takes and returns :class:`Tensor` and records a backward rule on
the active tape. Shapes must match exactly; the only implicit expansion is
a row-vector bias added along the last axis (``add_bias`` / ``linear``).
Anything else is spelled out with ``expand``.
"""
import math

import numpy as np

from .tensor import Tensor, record_op


class ShapeError(ValueError):
    pass


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = _t(a), _t(b)
    _same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _t(a), _t(b)
    _same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _t(a), _t(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    a = _t(a)
    return record_op(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x, b):
    x, b = _t(x), _t(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    n = b.shape[0]
    return record_op(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def matmul(a, b):
    """Matrix product of a 2-D ``m×k`` and a 2-D ``k×n`` tensor."""
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x`` (leading axes are flattened)."""
    x, w = _t(x), _t(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    lead = x.shape[:-1]
    k, n = w.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        b = _t(b)
        if b.shape != (n,):
            raise ShapeError(f"linear: bias {b.shape} does not match output width {n}")
        out = out + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)
    wd = w.data

    def back(g):
        g2 = g.reshape(-1, n)
        grads = [(g2 @ wd.T).reshape(lead + (k,)), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record_op(out.reshape(lead + (n,)), inputs, back)


def bmm(a, b):
    """Batched matrix product ``[B,m,k] @ [B,k,n]``."""
    a, b = _t(a), _t(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record_op(
        np.matmul(ad, bd), (a, b),
        lambda g: (np.matmul(g, bd.transpose(0, 2, 1)), np.matmul(ad.transpose(0, 2, 1), g)),
    )


def reshape(x, shape):
    x = _t(x)
    old = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x, axes):
    x = _t(x)
    inv = tuple(np.argsort(axes))
    return record_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def transpose(x):
    """Swap the last two axes."""
    nd = x.data.ndim
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return permute(x, axes)


def concat(tensors, axis=-1):
    tensors = [_t(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def back(g):
        return np.split(g, bounds, axis=ax)

    return record_op(out, tuple(tensors), back)


def take(x, indices, axis=0):
    """Gather along ``axis`` (indices may repeat)."""
    x = _t(x)
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    ax = axis % len(shape)

    def back(g):
        if ax == 0 and idx.ndim == 1:
            return (_scatter_rows(shape, idx, g),)
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return record_op(np.take(x.data, idx, axis=axis), (x,), back)


def _scatter_rows(shape, rows, g):
    """``out[rows[i]] += g[i]`` for a 1-D row index; bincount is much faster than ``np.add.at``."""
    n = shape[0]
    width = int(np.prod(shape[1:], dtype=np.int64))
    if width == 0 or len(rows) == 0:
        return np.zeros(shape, dtype=np.float64)
    flat = (rows[:, None] * width + np.arange(width)).ravel()
    return np.bincount(flat, weights=np.asarray(g, dtype=np.float64).ravel(), minlength=n * width).reshape(shape)


def expand(x, shape):
    """Explicitly repeat size-1 axes of ``x`` up to ``shape``."""
    x = _t(x)
    if len(shape) != x.data.ndim:
        raise ShapeError(f"expand: rank mismatch {x.shape} -> {tuple(shape)}")
    axes = []
    for i, (s, t) in enumerate(zip(x.shape, shape)):
        if s != t:
            if s != 1:
                raise ShapeError(f"expand: axis {i} has size {s}, cannot expand to {t}")
            axes.append(i)
    axes = tuple(axes)
    return record_op(
        np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


def sum(x):
    x = _t(x)
    shape = x.shape
    return record_op(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x):
    x = _t(x)
    shape = x.shape
    n = x.data.size
    return record_op(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def sum_axis(x, axis):
    x = _t(x)
    shape = x.shape
    return record_op(x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def max_axis(x, axis):
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    x = _t(x)
    xd = x.data
    arg = np.argmax(xd, axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return record_op(out, (x,), back)


def window_max(x, starts, ends):
    """Max over rows ``starts[w]..ends[w]`` (inclusive) of a 2-D ``[N, G]`` tensor."""
    x = _t(x)
    xd = x.data
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    n_win = len(starts)
    out = xd[starts].copy()
    arg = np.repeat(starts[:, None], xd.shape[1], axis=1)
    max_len = int((ends - starts).max()) + 1 if n_win else 0
    for off in range(1, max_len):
        rows = starts + off
        live = rows <= ends
        rows_c = np.minimum(rows, xd.shape[0] - 1)
        cand = xd[rows_c]
        better = (cand > out) & live[:, None]
        out = np.where(better, cand, out)
        arg = np.where(better, rows_c[:, None], arg)

    def back(g):
        n, width = xd.shape
        flat = (arg * width + np.arange(width)).ravel()
        return (np.bincount(flat, weights=np.asarray(g).ravel(), minlength=n * width).reshape(xd.shape),)

    return record_op(out, (x,), back)


def relu(x):
    x = _t(x)
    mask = x.data > 0
    return record_op(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x):
    x = _t(x)
    y = np.tanh(x.data)
    return record_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    x = _t(x)
    y = _sigmoid(x.data)
    return record_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    x = _t(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    y = 0.5 * xd * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return record_op(y, (x,), back)


def _softmax(xd, axis):
    if np.isnan(xd).any():
        raise ValueError("softmax: NaN in input")
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    x = _t(x)
    y = _softmax(x.data, axis)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op(y, (x,), back)


def log_softmax(x, axis=-1):
    x = _t(x)
    xd = x.data
    if np.isnan(xd).any():
        raise ValueError("log_softmax: NaN in input")
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return record_op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _t(x), _t(gain), _t(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last axis {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        g2 = g.reshape(-1, n)
        xh2 = xhat.reshape(-1, n)
        dgain = (g2 * xh2).sum(axis=0)
        dbias = g2.sum(axis=0)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return record_op(out, (x, gain, bias), back)


def cross_entropy(logits, target):
    """Mean of ``-log softmax(logits)[target]``.

    ``logits`` is ``[C]`` with an integer target, or ``[N, C]`` with ``N``
    integer targets (the result is averaged over rows).
    """
    logits = _t(logits)
    xd = logits.data
    single = xd.ndim == 1
    x2 = xd.reshape(1, -1) if single else xd
    n, c = x2.shape
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if tgt.shape != (n,):
        raise ShapeError(f"cross_entropy: {tgt.shape[0]} targets for {n} rows")
    if (tgt < 0).any() or (tgt >= c).any():
        bad = int(tgt[(tgt < 0) | (tgt >= c)][0])
        raise IndexError(f"cross_entropy: target {bad} out of range for {c} classes")
    z = x2 - x2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, tgt]).mean()
    p = np.exp(z - lse[:, None])

    def back(g):
        d = p.copy()
        d[rows, tgt] -= 1.0
        d *= float(g) / n
        return (d.reshape(xd.shape),)

    return record_op(np.array(loss), (logits,), back)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy with soft targets in [0, 1]."""
    logits, targets = _t(logits), _t(targets)
    _same_shape(logits, targets, "bce_with_logits")
    z = logits.data
    y = targets.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    s = _sigmoid(z)
    return record_op(np.array(loss.mean()), (logits,), lambda g: ((s - y) * (float(g) / n),))


def mse(pred, target):
    """Mean squared error."""
    pred, target = _t(pred), _t(target)
    _same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size
    return record_op(np.array((diff * diff).mean()), (pred, target), lambda g: (2.0 * diff * (float(g) / n), -2.0 * diff * (float(g) / n)))


def attention(q, k, v, heads, w_out, b_out=None, mask=None):
    """Multi-head scaled dot-product attention on already-projected inputs.

    ``q`` is ``[B, Lq, d]`` and ``k``, ``v`` are ``[B, Lk, d]`` (2-D inputs
    are treated as a batch of one). Heads split ``d`` evenly; per-head scores
    are scaled by ``1/sqrt(d/heads)``, heads are concatenated and projected
    with ``w_out``. Returns ``(output, weights)`` with weights
    ``[B, heads, Lq, Lk]`` as a plain array.
    """
    q, k, v = _t(q), _t(k), _t(v)
    squeeze = q.data.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    b, lq, d = q.shape
    lk = k.shape[1]
    if d % heads:
        raise ValueError(f"attention: model width {d} is not divisible by {heads} heads")
    if k.shape != (b, lk, d) or v.shape != (b, lk, d):
        raise ShapeError(f"attention: key/value shapes {k.shape}, {v.shape} incompatible with query {q.shape}")
    dh = d // heads

    def split(t, length):
        return reshape(permute(reshape(t, (b, length, heads, dh)), (0, 2, 1, 3)), (b * heads, length, dh))

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = scale(bmm(qh, transpose(kh)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    weights = softmax(scores, axis=-1)
    ctx = bmm(weights, vh)
    ctx = reshape(permute(reshape(ctx, (b, heads, lq, dh)), (0, 2, 1, 3)), (b, lq, d))
    out = linear(ctx, w_out, b_out)
    if squeeze:
        out = reshape(out, (lq, w_out.shape[1]))
    return out, weights.data.reshape(b, heads, lq, lk)


multi_head_attention = attention
