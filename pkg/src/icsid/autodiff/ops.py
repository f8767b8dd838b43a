"""Differentiable operations.

Every op computes its result eagerly with numpy, and, when gradients are
enabled and some input requires them, attaches a backward closure to the
output tensor. Backward closures deposit gradients into parents via
``accum_grad`` and never mutate forward buffers.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, grad_enabled
from .. import _core


def _result(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    """Wrap op output; builds the graph edge only when a gradient can flow."""
    req = grad_enabled() and any(p.requires_grad or p._bwd is not None for p in parents)
    out = Tensor._node(data, req)
    if req:
        out._parents = parents
        out._bwd = bwd()
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to the given shape, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd():
        def run(g):
            a.accum_grad(_unbroadcast(g, a.data.shape))
            b.accum_grad(_unbroadcast(g, b.data.shape))

        return run

    return _result(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd():
        def run(g):
            a.accum_grad(_unbroadcast(g, a.data.shape))
            b.accum_grad(_unbroadcast(-g, b.data.shape), own=True)

        return run

    return _result(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd():
        def run(g):
            a.accum_grad(_unbroadcast(g * b.data, a.data.shape), own=True)
            b.accum_grad(_unbroadcast(g * a.data, b.data.shape), own=True)

        return run

    return _result(data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd():
        def run(g):
            a.accum_grad(_unbroadcast(g / b.data, a.data.shape), own=True)
            b.accum_grad(_unbroadcast(-g * data / b.data, b.data.shape), own=True)

        return run

    return _result(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def bwd():
        def run(g):
            a.accum_grad(g * c, own=True)

        return run

    return _result(data, (a,), bwd)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bwd():
        def run(g):
            a.accum_grad(g * (2.0 * a.data), own=True)

        return run

    return _result(data, (a,), bwd)


# -- nonlinearities ------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bwd():
        def run(g):
            a.accum_grad(g * (a.data > 0), own=True)

        return run

    return _result(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd():
        def run(g):
            a.accum_grad(g * (1.0 - data * data), own=True)

        return run

    return _result(data, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    # log(1 + exp(x)) computed without overflow for large |x|.
    x = a.data
    data = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)

    def bwd():
        def run(g):
            a.accum_grad(g * expit(x), own=True)

        return run

    return _result(data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd():
        def run(g):
            a.accum_grad(g * data, own=True)

        return run

    return _result(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd():
        def run(g):
            a.accum_grad(g / a.data, own=True)

        return run

    return _result(data, (a,), bwd)


# -- reductions ----------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd():
        def run(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accum_grad(np.broadcast_to(g, a.data.shape))

        return run

    return _result(np.asarray(data, dtype=a.data.dtype), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])

    def bwd():
        def run(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accum_grad(np.broadcast_to(g, a.data.shape) / denom, own=True)

        return run

    return _result(np.asarray(data, dtype=a.data.dtype), (a,), bwd)


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)

    def bwd():
        def run(g):
            a.accum_grad(g.reshape(a.data.shape))

        return run

    return _result(data, (a,), bwd)


def transpose(a: Tensor, perm: tuple) -> Tensor:
    data = np.ascontiguousarray(a.data.transpose(perm))
    inv = np.argsort(perm)

    def bwd():
        def run(g):
            a.accum_grad(np.ascontiguousarray(g.transpose(inv)), own=True)

        return run

    return _result(data, (a,), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic indexing only (ints, slices, tuples thereof); no fancy indexing."""
    data = np.ascontiguousarray(a.data[idx])

    def bwd():
        def run(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accum_grad(full, own=True)

        return run

    return _result(data, (a,), bwd)


def concat(tensors: list, axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd():
        def run(g):
            offsets = np.cumsum([0] + sizes)
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accum_grad(g[tuple(sl)])

        return run

    return _result(data, tuple(tensors), bwd)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires operands with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible")
    data = np.matmul(a.data, b.data)

    def bwd():
        def run(g):
            bt = np.swapaxes(b.data, -1, -2)
            at = np.swapaxes(a.data, -1, -2)
            a.accum_grad(_unbroadcast(np.matmul(g, bt), a.data.shape), own=True)
            b.accum_grad(_unbroadcast(np.matmul(at, g), b.data.shape), own=True)

        return run

    return _result(data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = x @ w + b over the last axis of x.

    w has shape (d_in, d_out) and b shape (d_out,).
    """
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"linear: input shape {x.data.shape} incompatible with weight shape {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"linear: bias shape {b.data.shape} incompatible with weight shape {w.data.shape}"
        )
    d_in, d_out = w.data.shape
    x2 = x.data.reshape(-1, d_in)
    data = (x2 @ w.data + b.data).reshape(x.data.shape[:-1] + (d_out,))

    def bwd():
        def run(g):
            g2 = g.reshape(-1, d_out)
            x.accum_grad((g2 @ w.data.T).reshape(x.data.shape), own=True)
            w.accum_grad(x2.T @ g2, own=True)
            b.accum_grad(g2.sum(axis=0), own=True)

        return run

    return _result(data, (x, w, b), bwd)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply
    elementwise gain and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/shift shapes {gain.data.shape}/{shift.data.shape} "
            f"do not match feature size {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + shift.data

    def bwd():
        def run(g):
            gg = g * gain.data
            # d/dx of (x - mu) / sqrt(var + eps) with mu, var functions of x.
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            x.accum_grad((gg - m1 - xhat * m2) * inv, own=True)
            red = tuple(range(g.ndim - 1))
            gain.accum_grad((g * xhat).sum(axis=red), own=True)
            shift.accum_grad(g.sum(axis=red), own=True)

        return run

    return _result(data, (x, gain, shift), bwd)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    mask is a boolean array broadcastable to x; False entries are excluded
    (their weight is exactly zero). Every row must keep at least one entry.
    The maximum is subtracted before exponentiation for stability.
    """
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    mx = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - mx)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=-1, keepdims=True)
    data = e / s

    def bwd():
        def run(g):
            dot = (g * data).sum(axis=-1, keepdims=True)
            x.accum_grad((g - dot) * data, own=True)

        return run

    return _result(data, (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; scales kept activations by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * keep

    def bwd():
        def run(g):
            x.accum_grad(g * keep, own=True)

        return run

    return _result(data, (x,), bwd)


# -- attention ----------------------------------------------------------------


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    n_heads: int,
    causal: bool = False,
) -> Tensor:
    """Scaled dot-product attention over already-projected q, k, v.

    Inputs are (batch, time, d) or (time, d); q may have a different length
    than k and v. Heads are split from the feature axis, scores are scaled by
    1/sqrt(d/n_heads), optionally masked so query position i attends only to
    key positions <= i, soft-maxed, applied to v, merged, and passed through
    the output projection (w_out, b_out).
    """
    lifted = q.data.ndim == 2
    if lifted:
        q, k, v = (reshape(t, (1,) + t.data.shape) for t in (q, k, v))
    d = q.data.shape[-1]
    if d % n_heads != 0:
        raise ConfigError(f"model width {d} is not divisible by n_heads={n_heads}")
    if k.data.shape != v.data.shape:
        raise DimensionError(f"key shape {k.data.shape} != value shape {v.data.shape}")
    dh = d // n_heads
    bsz, tq = q.data.shape[0], q.data.shape[1]
    tk = k.data.shape[1]

    def split(t, tlen):
        return transpose(reshape(t, (bsz, tlen, n_heads, dh)), (0, 2, 1, 3))

    qh = split(q, tq)
    kh = split(k, tk)
    vh = split(v, tk)

    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = None
    if causal:
        # Query position i sees key positions 0..i.
        mask = np.tril(np.ones((tq, tk), dtype=bool))
    attn = softmax(scores, mask)
    ctx = matmul(attn, vh)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, tq, d))
    out = linear(merged, w_out, b_out)
    if lifted:
        out = reshape(out, (tq, d))
    return out


# -- recurrent scan -------------------------------------------------------------


def rnn_scan(x: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor, h0: Tensor) -> Tensor:
    """Unidirectional tanh recurrence h_t = tanh(x_t @ w_in + h_{t-1} @ w_rec + bias).

    x is (batch, time, d_in) or (time, d_in); h0 is (hidden,) shared across the
    batch, or (batch, hidden). Returns hidden states for every step, with the
    same leading layout as x. Forward and backward loops run in the compiled
    core when it is available.
    """
    lifted = x.data.ndim == 2
    xd = x.data[None] if lifted else x.data
    if xd.ndim != 3:
        raise DimensionError(f"rnn_scan expects 2-D or 3-D input, got shape {x.data.shape}")
    bsz, tlen, d_in = xd.shape
    if w_in.data.shape[0] != d_in:
        raise DimensionError(
            f"rnn_scan: input width {d_in} incompatible with w_in shape {w_in.data.shape}"
        )
    hidden = w_in.data.shape[1]
    if w_rec.data.shape != (hidden, hidden):
        raise DimensionError(f"rnn_scan: w_rec shape {w_rec.data.shape} must be square ({hidden})")

    dt = x.data.dtype
    xw = (xd.reshape(-1, d_in) @ w_in.data + bias.data).reshape(bsz, tlen, hidden)
    xw_tm = np.ascontiguousarray(xw.transpose(1, 0, 2))
    if h0.data.ndim == 1:
        h0b = np.ascontiguousarray(np.broadcast_to(h0.data, (bsz, hidden)))
    else:
        h0b = np.ascontiguousarray(h0.data)
    h_tm = np.empty((tlen, bsz, hidden), dtype=dt)
    _core.rnn_scan_fwd(xw_tm, w_rec.data, h0b, h_tm)
    data = np.ascontiguousarray(h_tm.transpose(1, 0, 2))

    def bwd():
        def run(g):
            g3 = g[None] if lifted else g
            g_tm = np.ascontiguousarray(g3.transpose(1, 0, 2))
            da = np.empty((tlen, bsz, hidden), dtype=dt)
            dh0b = np.empty((bsz, hidden), dtype=dt)
            dw_rec = np.zeros((hidden, hidden), dtype=dt)
            _core.rnn_scan_bwd(h_tm, h0b, w_rec.data, g_tm, da, dh0b, dw_rec)
            da2 = da.transpose(1, 0, 2).reshape(-1, hidden)
            dx = (da2 @ w_in.data.T).reshape(bsz, tlen, d_in)
            x.accum_grad(dx[0] if lifted else dx, own=True)
            w_in.accum_grad(xd.reshape(-1, d_in).T @ da2, own=True)
            w_rec.accum_grad(dw_rec, own=True)
            bias.accum_grad(da2.sum(axis=0), own=True)
            h0.accum_grad(dh0b.sum(axis=0) if h0.data.ndim == 1 else dh0b, own=True)

        return run

    out_data = data[0] if lifted else data
    return _result(out_data, (x, w_in, w_rec, bias, h0), bwd)
