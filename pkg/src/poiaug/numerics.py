"""Dense parameter storage, Adam, checkpoints and gradient verification.

All arrays are float64.  Parameters live in a :class:`ParameterStore` keyed
by stable dotted paths (``"enc.fw.W"``); every parameter owns a gradient slot
of identical shape that the autodiff ops in :mod:`poiaug.autodiff`
accumulate into.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import _kernels
from .errors import ContractViolation, DataFormatError, NumericalError, ShapeError

CHECKPOINT_MAGIC = "poiaug-checkpoint"
CHECKPOINT_VERSION = 1


def derive_seed(seed: int, *names: str) -> int:
    """Stable 63-bit seed for a named subsystem of a run."""
    key = ":".join([str(int(seed)), *names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def make_rng(seed: int, *names: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


class ParameterStore:
    """Named float64 parameters with matching gradient slots."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise ContractViolation(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def zero_grad(self, names: Iterable[str] | None = None) -> None:
        for name in self.values if names is None else names:
            self.grads[name].fill(0.0)

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self.values.items():
            out.add(name, value)
        return out

    def assign(self, other: "ParameterStore") -> None:
        """Overwrite values in place from a store with the same layout."""
        for name, value in other.values.items():
            if self.values[name].shape != value.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {self.values[name].shape}")
            self.values[name][...] = value

    def grad_norm(self, names: Iterable[str] | None = None) -> float:
        total = 0.0
        for name in self.values if names is None else names:
            g = self.grads[name]
            total += float(np.dot(g.ravel(), g.ravel()))
        return math.sqrt(total)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.values.values())

    def is_all_zero(self) -> bool:
        return all(not v.any() for v in self.values.values())


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def add_lstm(store: ParameterStore, prefix: str, n_in: int, n_hidden: int, rng) -> None:
    store.add(f"{prefix}.W", init_uniform(rng, (4 * n_hidden, n_in), n_in))
    store.add(f"{prefix}.U", init_uniform(rng, (4 * n_hidden, n_hidden), n_hidden))
    b = np.zeros(4 * n_hidden)
    b[n_hidden:2 * n_hidden] = 1.0  # forget gate
    store.add(f"{prefix}.b", b)


def add_rnn(store: ParameterStore, prefix: str, n_in: int, n_hidden: int, rng) -> None:
    store.add(f"{prefix}.W", init_uniform(rng, (n_hidden, n_in), n_in))
    store.add(f"{prefix}.U", init_uniform(rng, (n_hidden, n_hidden), n_hidden))
    store.add(f"{prefix}.b", np.zeros(n_hidden))


def add_linear(store: ParameterStore, prefix: str, n_in: int, n_out: int, rng, bias: bool = True) -> None:
    store.add(f"{prefix}.W", init_uniform(rng, (n_out, n_in), n_in))
    if bias:
        store.add(f"{prefix}.b", np.zeros(n_out))


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a rank-1 array."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("softmax needs a non-empty rank-1 array")
    if not np.isfinite(z).all():
        raise ValueError("softmax input contains non-finite values")
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class LSTMWeights:
    """Input (``W``), recurrent (``U``) and bias (``b``) blocks of one LSTM."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    path: str = "lstm"

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> "LSTMWeights":
        return cls(store[f"{prefix}.W"], store[f"{prefix}.U"], store[f"{prefix}.b"], prefix)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    def check(self, n_in: int) -> None:
        hd = self.U.shape[1]
        if self.U.shape != (4 * hd, hd):
            raise ShapeError(f"{self.path}.U: expected (4H, H), got {self.U.shape}")
        if self.W.shape != (4 * hd, n_in):
            raise ShapeError(f"{self.path}.W: expected {(4 * hd, n_in)}, got {self.W.shape}")
        if self.b.shape != (4 * hd,):
            raise ShapeError(f"{self.path}.b: expected {(4 * hd,)}, got {self.b.shape}")


def lstm_cell_step(x, h_prev, cs_prev, weights: LSTMWeights):
    """One LSTM step; returns ``(h, cs)``."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    cs_prev = np.asarray(cs_prev, dtype=np.float64)
    weights.check(x.shape[0])
    hd = weights.hidden
    if h_prev.shape != (hd,):
        raise ShapeError(f"{weights.path}: h_prev has shape {h_prev.shape}, expected {(hd,)}")
    if cs_prev.shape != (hd,):
        raise ShapeError(f"{weights.path}: cs_prev has shape {cs_prev.shape}, expected {(hd,)}")
    empty = np.zeros((0, hd))
    H, C, _, _ = _kernels.ACTIVE.lstm_forward(
        weights.W, weights.U, weights.b, x[None, :], h_prev, cs_prev, empty, empty
    )
    return H[0].copy(), C[0].copy()


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, store: ParameterStore, names: Iterable[str] | None = None, **hyper) -> "AdamState":
        names = list(store.values) if names is None else list(names)
        return cls(
            m={n: np.zeros_like(store[n]) for n in names},
            v={n: np.zeros_like(store[n]) for n in names},
            **hyper,
        )


def adam_step(store: ParameterStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update over the parameters tracked by ``state``.

    Gradients of the updated parameters are zeroed afterwards.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name in state.m:
        if name not in store.grads:
            raise ContractViolation(f"no gradient slot for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, m in state.m.items():
        g = store.grads[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        store.values[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        g.fill(0.0)


def clip_grad_norm(store: ParameterStore, names: Iterable[str], max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    names = list(names)
    norm = store.grad_norm(names)
    if not math.isfinite(norm):
        raise NumericalError("gradient norm is not finite")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in names:
            store.grads[name] *= scale
    return norm


def gradient_check(
    loss_fn: Callable[[ParameterStore], float],
    store: ParameterStore,
    probes: int = 20,
    seed: int = 0,
    step: float = 1e-5,
    names: Iterable[str] | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(store)`` must return the scalar loss and accumulate its
    analytic gradient into ``store.grads``.  Coordinates are probed uniformly
    over all entries of the selected parameters.  The error denominator is
    ``max(|analytic|, |numeric|, floor)``; set ``floor`` near the
    finite-difference noise level divided by the tolerance.
    """
    names = list(store.values) if names is None else list(names)
    store.zero_grad()
    loss = loss_fn(store)
    if not math.isfinite(loss):
        raise NumericalError("loss is not finite at the unperturbed point")
    analytic = {n: store.grads[n].copy() for n in names}
    sizes = np.array([store[n].size for n in names], dtype=np.float64)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = store[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + step
        plus = loss_fn(store)
        flat[idx] = orig - step
        minus = loss_fn(store)
        flat[idx] = orig
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise NumericalError(f"non-finite loss while probing {name}[{idx}]")
        numeric = (plus - minus) / (2.0 * step)
        a = float(analytic[name].reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    store.zero_grad()
    return worst


def save_checkpoint(store: ParameterStore, target, seed: int) -> None:
    """Write parameters as versioned text; ``target`` is a path or text stream."""
    if isinstance(target, (str, Path)):
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            save_checkpoint(store, fh, seed)
        return
    target.write(f"{CHECKPOINT_MAGIC}\tversion={CHECKPOINT_VERSION}\tseed={int(seed)}\n")
    for name in sorted(store.values):
        value = store.values[name]
        shape = ",".join(str(d) for d in value.shape)
        body = " ".join(repr(float(x)) for x in value.reshape(-1))
        target.write(f"{name}\t{shape}\t{body}\n")


def load_checkpoint(source) -> tuple[ParameterStore, int]:
    """Inverse of :func:`save_checkpoint`; returns ``(store, seed)``."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return load_checkpoint(fh)
    header = source.readline().rstrip("\n").split("\t")
    if len(header) != 3 or header[0] != CHECKPOINT_MAGIC:
        raise DataFormatError("not a poiaug checkpoint")
    version = int(header[1].partition("=")[2])
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    seed = int(header[2].partition("=")[2])
    store = ParameterStore()
    for lineno, line in enumerate(source, start=2):
        line = line.rstrip("\n")
        if not line:
            continue
        try:
            name, shape_text, body = line.split("\t")
            shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
            values = np.array([float(x) for x in body.split()], dtype=np.float64)
            store.add(name, values.reshape(shape))
        except ValueError as exc:
            raise DataFormatError(f"checkpoint line {lineno}: {exc}") from exc
    return store, seed
