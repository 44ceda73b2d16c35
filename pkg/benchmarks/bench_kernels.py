"""Compare the numba-compiled kernels with their pure numpy originals.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-call wall time for each kernel at the model's shapes and checks
that both paths agree.
"""

import argparse
import time

import numpy as np

from poiaug import _kernels


def _inputs(rng, n, n_in, hd):
    W = rng.uniform(-0.5, 0.5, (4 * hd, n_in))
    U = rng.uniform(-0.5, 0.5, (4 * hd, hd))
    b = rng.uniform(-0.5, 0.5, 4 * hd)
    X = rng.normal(size=(n, n_in))
    h0, c0 = np.zeros(hd), np.zeros(hd)
    kh = (rng.random((n, hd)) < 0.1).astype(np.float64)
    kc = (rng.random((n, hd)) < 0.1).astype(np.float64)
    return W, U, b, X, h0, c0, kh, kc


def _time(fn, args, repeat):
    fn(*args)  # warm-up (triggers compilation for the jitted path)
    t0 = time.perf_counter()
    for _ in range(repeat):
        out = fn(*args)
    return (time.perf_counter() - t0) / repeat, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=2000)
    parser.add_argument("--length", type=int, default=20, help="sequence length")
    args = parser.parse_args(argv)
    if _kernels.JIT is None:
        print("numba unavailable or disabled (POIAUG_DISABLE_NUMBA); nothing to compare")
        return 0
    rng = np.random.default_rng(0)
    W, U, b, X, h0, c0, kh, kc = _inputs(rng, args.length, 32, 32)
    H, C, G, TC = _kernels.PY.lstm_forward(W, U, b, X, h0, c0, kh, kc)
    dH = rng.normal(size=H.shape)
    cases = {
        "lstm_forward": (W, U, b, X, h0, c0, kh, kc),
        "lstm_backward": (W, U, X, h0, c0, H, C, G, TC, kh, kc, dH, np.zeros(32), np.zeros(32)),
        "rnn_forward": (W[:32], U[:32], b[:32], X, h0),
        "haversine_many": (40.0, -74.0, rng.uniform(-90, 90, 5000), rng.uniform(-180, 180, 5000), 6371.0),
    }
    H_rnn = _kernels.PY.rnn_forward(*cases["rnn_forward"])
    cases["rnn_backward"] = (W[:32], U[:32], X, h0, H_rnn, dH)
    print(f"{'kernel':<16}{'numpy us':>12}{'numba us':>12}{'speedup':>10}  max|diff|")
    for name, inputs in cases.items():
        t_py, out_py = _time(getattr(_kernels.PY, name), inputs, args.repeat)
        t_jit, out_jit = _time(getattr(_kernels.JIT, name), inputs, args.repeat)
        outs_py = out_py if isinstance(out_py, tuple) else (out_py,)
        outs_jit = out_jit if isinstance(out_jit, tuple) else (out_jit,)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(outs_py, outs_jit))
        print(f"{name:<16}{t_py * 1e6:>12.1f}{t_jit * 1e6:>12.1f}{t_py / t_jit:>10.2f}  {diff:.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
