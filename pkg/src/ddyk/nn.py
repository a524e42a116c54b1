"""Small dense networks with tape-based reverse-mode differentiation.

Everything runs in float64 on numpy arrays. A :class:`Tensor` is a thin
wrapper around an ``ndarray``; arithmetic on tensors is recorded on every
active :class:`GradientTape`, and :func:`backward` replays the records in
reverse to accumulate vector-Jacobian products.

Example:
    >>> net = DenseNet([2, 8, 1], ["tanh", "identity"], rng=0)
    >>> with GradientTape() as tape:
    ...     y = net(np.array([0.5, -1.0]))
    >>> grads = tape.gradient(y, net.parameters())
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

SMOOTH_RELU_WIDTH = 0.1
CHECKPOINT_VERSION = 1

_ACTIVE_TAPES: list["GradientTape"] = []


class NonFiniteError(ValueError):
    """Raised when a value that must be finite is not."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array that can take part in recorded computations."""

    __slots__ = ("value", "name")
    __array_ufunc__ = None

    def __init__(self, value, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: Callable


class GradientTape:
    """Records primitive operations executed while the tape is active.

    A tape supports exactly one backward pass per recorded forward pass;
    recording new operations re-arms it.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def _push(self, record: _Record):
        if self._consumed:
            self.records.clear()
            self._consumed = False
        self.records.append(record)

    def backward(self, output: Tensor, seed=None) -> dict[int, np.ndarray]:
        return backward(self, output, seed)

    def gradient(self, output: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``output`` (seeded) with respect to ``sources``.

        Sources the output does not depend on get zero arrays.
        """
        grads = backward(self, output, seed)
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def backward(tape: GradientTape, output: Tensor, seed=None) -> dict[int, np.ndarray]:
    """Reverse pass over ``tape`` seeded at ``output``.

    Args:
        tape: tape holding a completed forward pass.
        output: tensor produced during that pass.
        seed: cotangent with the shape of ``output``; defaults to ones.

    Returns:
        Mapping ``id(tensor) -> gradient`` for every tensor reached.
    """
    if tape._consumed:
        raise RuntimeError("tape already consumed by a backward pass; record a new forward pass first")
    if not tape.records:
        raise RuntimeError("backward called without a recorded forward pass")
    if seed is None:
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise ValueError(f"seed shape {seed.shape} does not match output shape {output.value.shape}")

    grads: dict[int, np.ndarray] = {id(output): seed.copy()}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        parts = rec.vjp(g)
        for inp, gi in zip(rec.inputs, parts):
            if gi is None or not isinstance(inp, Tensor):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape._consumed = True
    return grads


def _record(value: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    if _ACTIVE_TAPES:
        rec = _Record(out, inputs, vjp)
        for tape in _ACTIVE_TAPES:
            tape._push(rec)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _record(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _record(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _record(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av / bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    return _record(-_val(a), (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    av = _val(a)
    return _record(av**exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), vjp)


def transpose(a) -> Tensor:
    return _record(_val(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, index) -> Tensor:
    av = _val(a)

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, index, g)
        return (full,)

    return _record(av[index], (a,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    vals = [_val(p) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate(vals, axis=axis), tuple(parts), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    av = _val(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record(np.sum(av, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    av = _val(a)
    count = av.size if axis is None else av.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def where(cond, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a plain boolean array (not differentiated)."""
    c = np.asarray(cond, dtype=bool)
    av, bv = _val(a), _val(b)
    out = np.where(c, av, bv)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(c, g, 0.0), av.shape), _unbroadcast(np.where(c, 0.0, g), bv.shape)),
    )


def minimum(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return where(av <= bv, a, b)


def maximum(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return where(av >= bv, a, b)


def tabs(a) -> Tensor:
    av = _val(a)
    return _record(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def exp(a) -> Tensor:
    out = np.exp(_val(a))
    return _record(out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    out = np.tanh(_val(a))
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_np(x: np.ndarray) -> np.ndarray:
    # logaddexp(0, x) = max(x, 0) + log1p(exp(-|x|)); no overflow for large |x|
    return np.logaddexp(0.0, x)


def softplus(a) -> Tensor:
    av = _val(a)
    return _record(softplus_np(av), (a,), lambda g: (g * sigmoid_np(av),))


def relu(a) -> Tensor:
    av = _val(a)
    return _record(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def smooth_relu_np(x: np.ndarray, d: float = SMOOTH_RELU_WIDTH) -> np.ndarray:
    return np.where(x <= 0.0, 0.0, np.where(x >= d, x - 0.5 * d, x * x / (2.0 * d)))


def smooth_relu(a, d: float = SMOOTH_RELU_WIDTH) -> Tensor:
    """Quadratically smoothed ReLU: 0 for x<=0, x^2/2d on (0, d), x - d/2 beyond."""
    av = _val(a)
    slope = np.clip(av / d, 0.0, 1.0)
    return _record(smooth_relu_np(av, d), (a,), lambda g: (g * slope,))


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS: dict[str, Callable] = {
    "tanh": tanh,
    "softplus": softplus,
    "relu": relu,
    "smooth-relu": smooth_relu,
    "identity": identity,
}


# ---------------------------------------------------------------------------
# Dense networks
# ---------------------------------------------------------------------------


class DenseNet:
    """Fully connected network ``x -> act_k(W_k ... act_1(W_1 x + b_1) ... + b_k)``.

    Args:
        widths: layer widths including input and output, e.g. ``[4, 16, 16, 1]``.
        activations: one tag per affine layer (``len(widths) - 1`` entries).
        rng: seed or ``np.random.Generator`` for the uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
        name: prefix for parameter names.
    """

    def __init__(self, widths: Sequence[int], activations: Sequence[str], rng=None, name: str = "net"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"widths must hold at least two positive integers, got {widths}")
        if len(activations) != len(widths) - 1:
            raise ValueError(f"need {len(widths) - 1} activations, got {len(activations)}")
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}; choose from {sorted(ACTIVATIONS)}")
        rng = np.random.default_rng(rng)
        self.widths = widths
        self.activations = list(activations)
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(n_in)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (n_out, n_in)), f"{name}.{i}.weight"))
            self.biases.append(Tensor(rng.uniform(-bound, bound, n_out), f"{name}.{i}.bias"))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def __call__(self, x):
        return forward(self, x)

    def copy(self) -> "DenseNet":
        new = DenseNet.__new__(DenseNet)
        new.widths = list(self.widths)
        new.activations = list(self.activations)
        new.name = self.name
        new.weights = [Tensor(w.value, w.name) for w in self.weights]
        new.biases = [Tensor(b.value, b.name) for b in self.biases]
        return new

    def layer_metadata(self) -> list[dict]:
        return [
            {"in": i, "out": o, "activation": a}
            for i, o, a in zip(self.widths[:-1], self.widths[1:], self.activations)
        ]


def forward(net: DenseNet, x) -> Tensor:
    """Evaluate ``net`` on a vector ``(n_in,)`` or a batch ``(B, n_in)``."""
    xv = _val(x)
    if xv.ndim not in (1, 2) or xv.shape[-1] != net.n_in:
        raise ValueError(f"{net.name}: expected input of shape (n, {net.n_in}) or ({net.n_in},), got {xv.shape}")
    h = x if isinstance(x, Tensor) else Tensor(xv)
    for W, b, tag in zip(net.weights, net.biases, net.activations):
        h = ACTIVATIONS[tag](h @ W.T + b)
    return h


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments for a fixed list of parameters."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.value) for p in self.params]
        if not self.v:
            self.v = [np.zeros_like(p.value) for p in self.params]


def adam_step(state: AdamState, gradients: Sequence[np.ndarray]) -> list[Tensor]:
    """One Adam descent step, in place on ``state.params``.

    Raises:
        NonFiniteError: a gradient entry is NaN or infinite; nothing is updated.
    """
    if len(gradients) != len(state.params):
        raise ValueError(f"expected {len(state.params)} gradients, got {len(gradients)}")
    for p, g in zip(state.params, gradients):
        if np.shape(g) != p.value.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.name} {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(state.params, gradients)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        p.value = p.value - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return state.params


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> Path:
    """Write named arrays to a ``.npz`` container with a JSON header.

    The header always carries ``version`` and the ordered array ``names``;
    arrays are stored row-major (C order).
    """
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    meta = {"version": CHECKPOINT_VERSION, "names": list(arrays)}
    meta.update(header or {})
    payload = {f"arr_{i}": np.ascontiguousarray(a, dtype=np.float64) for i, a in enumerate(arrays.values())}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(meta, sort_keys=True)), **payload)
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {name: data[f"arr_{i}"] for i, name in enumerate(header["names"])}
    return header, arrays


def named_arrays(params: Iterable[Tensor]) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in params}


def assign_arrays(params: Iterable[Tensor], arrays: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise KeyError(f"checkpoint lacks parameter {p.name}")
        if arrays[p.name].shape != p.value.shape:
            raise ValueError(f"shape mismatch for {p.name}: {arrays[p.name].shape} vs {p.value.shape}")
        p.value = np.array(arrays[p.name], dtype=np.float64)
