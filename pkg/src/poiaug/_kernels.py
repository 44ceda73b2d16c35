"""Hot recurrent kernels.

Each kernel is written once in numpy style that numba's nopython mode also
accepts.  At import time the module compiles them with ``numba.njit`` unless
``POIAUG_DISABLE_NUMBA`` is set to a truthy value (or numba is missing), in
which case the plain Python/numpy functions are used directly.

``PY`` and ``JIT`` expose both flavours explicitly for benchmarking and for
tests that compare the two paths.
"""

import os
import types

import numpy as np

_FLAG = os.environ.get("POIAUG_DISABLE_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _FLAG in ("", "0", "false", "no")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _mix(keep, prev, new):
    # exact selection at keep in {0, 1} so zoneout(0)/zoneout(1) are bit-identical
    return np.where(keep == 0.0, new, np.where(keep == 1.0, prev, keep * prev + (1.0 - keep) * new))


def lstm_forward(W, U, b, X, h0, c0, keep_h, keep_c):
    """Run an LSTM over the rows of ``X``.

    Gate layout in ``W`` (4H x I), ``U`` (4H x H) and ``b`` (4H) is
    input, forget, candidate, output.  ``keep_h``/``keep_c`` hold per-step
    zoneout coefficients (n x H); pass arrays with zero rows to disable.

    Returns hidden states, cell states, activated gates and tanh of the
    candidate cell state, all per step.
    """
    n = X.shape[0]
    hd = U.shape[1]
    zone = keep_h.shape[0] > 0
    Z = np.dot(X, W.T) + b
    H = np.empty((n, hd))
    C = np.empty((n, hd))
    G = np.empty((n, 4 * hd))
    TC = np.empty((n, hd))
    h = h0.copy()
    c = c0.copy()
    for t in range(n):
        z = Z[t] + np.dot(U, h)
        i = _sigmoid(z[:hd])
        f = _sigmoid(z[hd:2 * hd])
        g = np.tanh(z[2 * hd:3 * hd])
        o = _sigmoid(z[3 * hd:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        if zone:
            h = _mix(keep_h[t], h, h_new)
            c = _mix(keep_c[t], c, c_new)
        else:
            h = h_new
            c = c_new
        H[t] = h
        C[t] = c
        G[t, :hd] = i
        G[t, hd:2 * hd] = f
        G[t, 2 * hd:3 * hd] = g
        G[t, 3 * hd:] = o
        TC[t] = tc
    return H, C, G, TC


def lstm_backward(W, U, X, h0, c0, H, C, G, TC, keep_h, keep_c, dH, dh_last, dc_last):
    """Backpropagate through :func:`lstm_forward`.

    ``dH`` is the gradient on every emitted hidden state; ``dh_last`` and
    ``dc_last`` are extra gradients on the final hidden and cell state.
    Returns (dX, dW, dU, db, dh0, dc0).
    """
    n = X.shape[0]
    hd = U.shape[1]
    zone = keep_h.shape[0] > 0
    dZ = np.empty((n, 4 * hd))
    dU = np.zeros(U.shape)
    dh_next = dh_last.copy()
    dc_next = dc_last.copy()
    for t in range(n - 1, -1, -1):
        if t > 0:
            h_prev = H[t - 1]
            c_prev = C[t - 1]
        else:
            h_prev = h0
            c_prev = c0
        dh = dH[t] + dh_next
        dc = dc_next
        if zone:
            kh = keep_h[t]
            kc = keep_c[t]
            dh_new = (1.0 - kh) * dh
            dh_carry = kh * dh
            dc_new = (1.0 - kc) * dc
            dc_carry = kc * dc
        else:
            dh_new = dh
            dh_carry = np.zeros(hd)
            dc_new = dc
            dc_carry = np.zeros(hd)
        i = G[t, :hd]
        f = G[t, hd:2 * hd]
        g = G[t, 2 * hd:3 * hd]
        o = G[t, 3 * hd:]
        tc = TC[t]
        do = dh_new * tc
        dc_new = dc_new + dh_new * o * (1.0 - tc * tc)
        dZ[t, :hd] = dc_new * g * i * (1.0 - i)
        dZ[t, hd:2 * hd] = dc_new * c_prev * f * (1.0 - f)
        dZ[t, 2 * hd:3 * hd] = dc_new * i * (1.0 - g * g)
        dZ[t, 3 * hd:] = do * o * (1.0 - o)
        dU += np.outer(dZ[t], h_prev)
        dh_next = np.dot(U.T, dZ[t]) + dh_carry
        dc_next = dc_new * f + dc_carry
    dX = np.dot(dZ, W)
    dW = np.dot(dZ.T, X)
    db = dZ.sum(axis=0)
    return dX, dW, dU, db, dh_next, dc_next


def rnn_forward(W, U, b, X, h0):
    """Elman recurrence ``h_t = tanh(W x_t + U h_{t-1} + b)``."""
    n = X.shape[0]
    hd = U.shape[0]
    Z = np.dot(X, W.T) + b
    H = np.empty((n, hd))
    h = h0.copy()
    for t in range(n):
        h = np.tanh(Z[t] + np.dot(U, h))
        H[t] = h
    return H


def rnn_backward(W, U, X, h0, H, dH):
    n = X.shape[0]
    dZ = np.empty((n, U.shape[0]))
    dU = np.zeros(U.shape)
    dh_next = np.zeros(U.shape[0])
    for t in range(n - 1, -1, -1):
        h_prev = H[t - 1] if t > 0 else h0
        dz = (dH[t] + dh_next) * (1.0 - H[t] * H[t])
        dZ[t] = dz
        dU += np.outer(dz, h_prev)
        dh_next = np.dot(U.T, dz)
    return np.dot(dZ, W), np.dot(dZ.T, X), dU, dZ.sum(axis=0), dh_next


def haversine_many(lat, lng, lats, lngs, radius):
    """Great-circle distances from one point to arrays of points (degrees in, km out)."""
    p1 = np.radians(lat)
    p2 = np.radians(lats)
    dp = p2 - p1
    dl = np.radians(lngs - lng)
    a = np.sin(0.5 * dp) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(0.5 * dl) ** 2
    a = np.minimum(np.maximum(a, 0.0), 1.0)
    return 2.0 * radius * np.arcsin(np.sqrt(a))


_NAMES = ("lstm_forward", "lstm_backward", "rnn_forward", "rnn_backward", "haversine_many")

PY = types.SimpleNamespace(**{name: globals()[name] for name in _NAMES})
JIT = None
USING_NUMBA = False


def _rebind(fn, namespace):
    return types.FunctionType(fn.__code__, namespace, fn.__name__, fn.__defaults__, fn.__closure__)


if NUMBA_REQUESTED:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba = None
    if numba is not None:
        # compiled copies resolve helpers from their own namespace, leaving PY untouched
        _jit_ns = dict(globals())
        for _name in ("_sigmoid", "_mix") + _NAMES:
            _jit_ns[_name] = numba.njit(cache=True)(_rebind(globals()[_name], _jit_ns))
        JIT = types.SimpleNamespace(**{name: _jit_ns[name] for name in _NAMES})
        USING_NUMBA = True

ACTIVE = JIT if USING_NUMBA else PY
