"""Plain-numpy fallback for the compiled kernels in `_kernels.pyx`.

Same contracts, same update order, no compiled code.  The IIR loop is a
per-sample Python loop and is roughly two orders of magnitude slower than
the extension; the RNN scans only pay per-timestep numpy overhead.
"""

import numpy as np


def iir_filter(b, a, u, zi):
    n = len(a) - 1
    y = np.empty(len(u), dtype=np.float64)
    if n == 0:
        np.multiply(u, b[0], out=y)
        return y
    for k in range(len(u)):
        uk = u[k]
        yk = b[0] * uk + zi[0]
        for i in range(n - 1):
            zi[i] = b[i + 1] * uk + zi[i + 1] - a[i + 1] * yk
        zi[n - 1] = b[n] * uk - a[n] * yk
        y[k] = yk
    return y


def rnn_scan_fwd(xw, w_rec, h0, h_out):
    T = xw.shape[0]
    prev = h0
    for t in range(T):
        h_out[t] = np.tanh(xw[t] + prev @ w_rec)
        prev = h_out[t]


def rnn_scan_bwd(h_all, h0, w_rec, grad_h, da, dh0, dw_rec):
    T = h_all.shape[0]
    carry = np.zeros_like(h0)
    w_rec_t = w_rec.T
    for t in range(T - 1, -1, -1):
        ht = h_all[t]
        da[t] = (grad_h[t] + carry) * (1.0 - ht * ht)
        prev = h_all[t - 1] if t > 0 else h0
        dw_rec += prev.T @ da[t]
        carry = da[t] @ w_rec_t
    dh0[...] = carry
