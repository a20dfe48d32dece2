"""Numeric kernels for the dense autoencoder engine.

Everything in this module is written against the numba nopython subset of
numpy so the same source serves two backends: executed directly it is the
pure-numpy fallback, and :mod:`fedcref.backend` compiles a jitted clone of
it. Keep additions restricted to that subset (contiguous float64 arrays,
``np.dot``, basic broadcasting).

Model parameters travel as one flat float64 vector. For layer ``l`` with
fan-in ``sizes[l]`` and fan-out ``sizes[l+1]`` the layout is the row-major
weight matrix followed by the bias vector, layers in order. Hidden layers
use ReLU, the output layer a sigmoid.
"""

import numpy as np


def param_count(sizes):
    """Total flat-parameter length for the given layer widths."""
    total = 0
    for l in range(sizes.shape[0] - 1):
        total += sizes[l] * sizes[l + 1] + sizes[l + 1]
    return total


def forward(params, sizes, x):
    """Reconstruction of batch ``x`` (n, d) -> (n, d)."""
    a = x
    n_layers = sizes.shape[0] - 1
    off = 0
    for l in range(n_layers):
        nin = sizes[l]
        nout = sizes[l + 1]
        w = params[off:off + nin * nout].reshape(nin, nout)
        off += nin * nout
        b = params[off:off + nout]
        off += nout
        z = np.dot(a, w) + b
        if l < n_layers - 1:
            a = np.maximum(z, 0.0)
        else:
            a = 1.0 / (1.0 + np.exp(-z))
    return a


def reconstruction_errors(params, sizes, x):
    """Per-sample mean squared reconstruction error, shape (n,)."""
    r = forward(params, sizes, x)
    d = x.shape[1]
    return np.sum((r - x) ** 2, axis=1) / d


def loss_and_grad(params, sizes, x):
    """Mean loss over the batch and its gradient w.r.t. every parameter."""
    n_layers = sizes.shape[0] - 1
    n = x.shape[0]
    d = x.shape[1]
    acts = [x]
    a = x
    off = 0
    for l in range(n_layers):
        nin = sizes[l]
        nout = sizes[l + 1]
        w = params[off:off + nin * nout].reshape(nin, nout)
        off += nin * nout
        b = params[off:off + nout]
        off += nout
        z = np.dot(a, w) + b
        if l < n_layers - 1:
            a = np.maximum(z, 0.0)
        else:
            a = 1.0 / (1.0 + np.exp(-z))
        acts.append(a)

    grad = np.zeros_like(params)
    out = acts[n_layers]
    # d(mean sq err)/d(out), folded with the sigmoid derivative
    delta = (2.0 / (n * d)) * (out - x) * out * (1.0 - out)
    for l in range(n_layers - 1, -1, -1):
        nin = sizes[l]
        nout = sizes[l + 1]
        off -= nin * nout + nout
        a_prev = acts[l]
        dw = np.dot(a_prev.T, delta)
        grad[off:off + nin * nout] = dw.ravel()
        grad[off + nin * nout:off + nin * nout + nout] = np.sum(delta, axis=0)
        if l > 0:
            w = params[off:off + nin * nout].reshape(nin, nout)
            delta = np.dot(delta, w.T) * (a_prev > 0.0)
    loss = np.mean((out - x) ** 2)
    return loss, grad


def train_epochs(params, sizes, x, order, batch_size, lr, beta1, beta2, eps,
                 m0, v0, t0):
    """Mini-batch Adam over pre-drawn shuffle orders.

    ``order`` has one row of permuted sample indices per epoch; drawing the
    permutations outside keeps both backends on identical batch sequences.
    Returns (params, m, v, step, finite_ok); callers must treat a False flag
    as divergence.
    """
    p = params.copy()
    m = m0.copy()
    v = v0.copy()
    t = t0
    epochs = order.shape[0]
    n = x.shape[0]
    ok = True
    for e in range(epochs):
        for s in range(0, n, batch_size):
            idx = order[e, s:s + batch_size]
            xb = x[idx]
            loss, g = loss_and_grad(p, sizes, xb)
            if not np.isfinite(loss):
                ok = False
                break
            t += 1
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not ok:
            break
    return p, m, v, t, ok
