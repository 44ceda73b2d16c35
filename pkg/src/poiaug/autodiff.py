"""Per-sequence reverse-mode tape.

The forward pass of a model is written in terms of the ops below.  Each op
computes its value eagerly and, when given a :class:`Tape`, records a
closure that maps the output gradient onto its inputs.  Parameter gradients
are accumulated straight into the :class:`~poiaug.numerics.ParameterStore`.
The tape is rebuilt for every sequence, so variable lengths need no static
graph.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .numerics import ParameterStore


class Var:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    def add_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.value) if self.grad is None else self.grad


class Tape:
    def __init__(self):
        self._backward = []

    def record(self, fn) -> None:
        self._backward.append(fn)

    def backward(self) -> None:
        for fn in reversed(self._backward):
            fn()
        self._backward.clear()

    def __len__(self) -> int:
        return len(self._backward)


def _value(x):
    return x.value if isinstance(x, Var) else x


def constant(value) -> Var:
    return Var(np.asarray(value, dtype=np.float64))


def embed(tape, store: ParameterStore, name: str, indices) -> Var:
    """Rows of the embedding table ``name``; ``indices`` is an int or int array."""
    table = store[name]
    out = Var(table[indices].copy())
    if tape is not None:
        def backward():
            if out.grad is not None:
                np.add.at(store.grads[name], indices, out.grad)
        tape.record(backward)
    return out


def concat(tape, parts) -> Var:
    """Concatenate along the last axis; plain arrays are treated as constants."""
    values = [_value(p) for p in parts]
    out = Var(np.concatenate(values, axis=-1))
    if tape is not None:
        bounds = np.cumsum([0] + [v.shape[-1] for v in values])

        def backward():
            if out.grad is None:
                return
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if isinstance(p, Var):
                    p.add_grad(out.grad[..., lo:hi])
        tape.record(backward)
    return out


def add(tape, a: Var, b) -> Var:
    out = Var(a.value + _value(b))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            a.add_grad(out.grad)
            if isinstance(b, Var):
                b.add_grad(out.grad)
        tape.record(backward)
    return out


def tanh(tape, a: Var) -> Var:
    out = Var(np.tanh(a.value))
    if tape is not None:
        def backward():
            if out.grad is not None:
                a.add_grad(out.grad * (1.0 - out.value * out.value))
        tape.record(backward)
    return out


def linear(tape, store: ParameterStore, prefix: str, x: Var, bias: bool = True) -> Var:
    """``x @ W.T + b`` for a vector or a row-stacked matrix ``x``."""
    W = store[f"{prefix}.W"]
    y = np.dot(x.value, W.T)
    if bias:
        y = y + store[f"{prefix}.b"]
    out = Var(y)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if g.ndim == 1:
                store.grads[f"{prefix}.W"] += np.outer(g, x.value)
                if bias:
                    store.grads[f"{prefix}.b"] += g
            else:
                store.grads[f"{prefix}.W"] += np.dot(g.T, x.value)
                if bias:
                    store.grads[f"{prefix}.b"] += g.sum(axis=0)
            x.add_grad(np.dot(g, W))
        tape.record(backward)
    return out


def lstm(tape, store: ParameterStore, prefix: str, X: Var, h0: Var | None = None, c0: Var | None = None,
         keep_h=None, keep_c=None):
    """Run an LSTM over the rows of ``X``.

    Returns ``(H, h_last, c_last, C)`` where ``H`` stacks every hidden state
    and ``C`` (a plain array, no gradient) every cell state.  ``keep_h`` and
    ``keep_c`` are optional per-step zoneout coefficients.
    """
    W, U, b = store[f"{prefix}.W"], store[f"{prefix}.U"], store[f"{prefix}.b"]
    hd = U.shape[1]
    h_init = np.zeros(hd) if h0 is None else h0.value
    c_init = np.zeros(hd) if c0 is None else c0.value
    kh = np.zeros((0, hd)) if keep_h is None else np.ascontiguousarray(keep_h, dtype=np.float64)
    kc = np.zeros((0, hd)) if keep_c is None else np.ascontiguousarray(keep_c, dtype=np.float64)
    Xv = np.ascontiguousarray(X.value)
    H, C, G, TC = _kernels.ACTIVE.lstm_forward(W, U, b, Xv, h_init, c_init, kh, kc)
    out_H = Var(H)
    h_last = Var(H[-1].copy())
    c_last = Var(C[-1].copy())
    if tape is not None:
        def backward():
            if out_H.grad is None and h_last.grad is None and c_last.grad is None:
                return
            dX, dW, dU, db, dh0, dc0 = _kernels.ACTIVE.lstm_backward(
                W, U, Xv, h_init, c_init, H, C, G, TC, kh, kc,
                np.ascontiguousarray(out_H.grad_or_zeros()), h_last.grad_or_zeros(), c_last.grad_or_zeros(),
            )
            store.grads[f"{prefix}.W"] += dW
            store.grads[f"{prefix}.U"] += dU
            store.grads[f"{prefix}.b"] += db
            X.add_grad(dX)
            if h0 is not None:
                h0.add_grad(dh0)
            if c0 is not None:
                c0.add_grad(dc0)
        tape.record(backward)
    return out_H, h_last, c_last, C


def lstm_step(tape, store: ParameterStore, prefix: str, x: Var, h: Var | None, c: Var | None,
              keep_h=None, keep_c=None):
    """Single LSTM step on a vector input; returns ``(h, c)``."""
    X = Var(x.value[None, :])
    if tape is not None:
        # recorded first so it runs after the LSTM backward has filled X.grad
        def backward():
            if X.grad is not None:
                x.add_grad(X.grad[0])
        tape.record(backward)
    _, h_new, c_new, _ = lstm(
        tape, store, prefix, X, h, c,
        None if keep_h is None else np.asarray(keep_h)[None, :],
        None if keep_c is None else np.asarray(keep_c)[None, :],
    )
    return h_new, c_new


def rnn(tape, store: ParameterStore, prefix: str, X: Var) -> Var:
    """Elman RNN over the rows of ``X`` from a zero state."""
    W, U, b = store[f"{prefix}.W"], store[f"{prefix}.U"], store[f"{prefix}.b"]
    h0 = np.zeros(U.shape[0])
    Xv = np.ascontiguousarray(X.value)
    H = _kernels.ACTIVE.rnn_forward(W, U, b, Xv, h0)
    out = Var(H)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dX, dW, dU, db, _ = _kernels.ACTIVE.rnn_backward(W, U, Xv, h0, H, np.ascontiguousarray(out.grad))
            store.grads[f"{prefix}.W"] += dW
            store.grads[f"{prefix}.U"] += dU
            store.grads[f"{prefix}.b"] += db
            X.add_grad(dX)
        tape.record(backward)
    return out


def rows(tape, X: Var, order) -> Var:
    """Gather rows of ``X`` in the given order (used for reversal)."""
    order = np.asarray(order)
    out = Var(X.value[order])
    if tape is not None:
        def backward():
            if out.grad is not None:
                g = np.zeros_like(X.value)
                np.add.at(g, order, out.grad)
                X.add_grad(g)
        tape.record(backward)
    return out


def gaussian_factors(lo: int, hi: int, center: int, sigma: float) -> np.ndarray:
    s = np.arange(lo, hi + 1, dtype=np.float64)
    return np.exp(-((s - center) ** 2) / (2.0 * sigma * sigma))


def local_attention(tape, store: ParameterStore, name: str, h: Var, annotations: Var,
                    lo: int, hi: int, center: int, sigma: float):
    """Gaussian-modulated general-score attention over ``annotations[lo:hi+1]``.

    Raw scores ``h^T W_a a_s`` are softmaxed over the window, multiplied by
    ``exp(-(s - center)^2 / (2 sigma^2))`` and renormalized.  Returns
    ``(context, weights)`` with ``weights`` a plain array over the window.
    """
    Wa = store[name]
    Hw = annotations.value[lo:hi + 1]
    q = np.dot(Wa.T, h.value)
    scores = np.dot(Hw, q)
    e = np.exp(scores - scores.max())
    align = e / e.sum()
    gauss = gaussian_factors(lo, hi, center, sigma)
    r = align * gauss
    total = r.sum()
    weights = r / total
    context = Var(np.dot(weights, Hw))
    if tape is not None:
        def backward():
            dctx = context.grad
            if dctx is None:
                return
            dweights = np.dot(Hw, dctx)
            dHw = np.outer(weights, dctx)
            dr = (dweights - np.dot(dweights, weights)) / total
            dalign = dr * gauss
            dscores = align * (dalign - np.dot(dalign, align))
            dHw += np.outer(dscores, q)
            v = np.dot(Hw.T, dscores)
            store.grads[name] += np.outer(h.value, v)
            h.add_grad(np.dot(Wa, v))
            gA = np.zeros_like(annotations.value)
            gA[lo:hi + 1] = dHw
            annotations.add_grad(gA)
        tape.record(backward)
    return context, weights


def cross_entropy(tape, logits: Var, targets, weights) -> float:
    """Weighted sum of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is a vector (single target) or a matrix with one row per
    target.  Returns the loss value; the gradient is seeded on ``logits``.
    """
    z = np.atleast_2d(logits.value)
    targets = np.atleast_1d(np.asarray(targets))
    weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows_idx = np.arange(z.shape[0])
    nll = log_norm - shifted[rows_idx, targets]
    loss = float(np.dot(weights, nll))
    if tape is not None:
        def backward():
            probs = np.exp(shifted - log_norm[:, None])
            probs[rows_idx, targets] -= 1.0
            g = probs * weights[:, None]
            logits.add_grad(g.reshape(logits.value.shape))
        tape.record(backward)
    return loss
