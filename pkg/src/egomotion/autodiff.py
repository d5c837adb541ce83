"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every :class:`Var` created by an operation in
creation order, which is a topological order of the computation DAG.
:func:`backward` walks the tape once in reverse and accumulates adjoints.

Only what dense networks, the mixture head, the C-VAE and the trajectory
loss need is provided.  Broadcasting is limited to numpy's rules on
elementwise binary ops; gradients are summed back to the operand shape.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .io_utils import atomic_write_bytes, atomic_write_text

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Var:
    __slots__ = ("value", "parents", "backward_fn", "key", "index")

    def __init__(self, value, parents=(), backward_fn: Backward | None = None, key: str | None = None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.key = key
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" key={self.key!r}" if self.key else ""
        return f"Var(shape={self.value.shape}{tag})"

    # operator sugar; all route through the module-level ops
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)


class Tape:
    """Append-only record of operations."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._params: dict[str, Var] = {}

    def _push(self, v: Var) -> Var:
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v

    def param(self, array: np.ndarray, key: str) -> Var:
        """Leaf whose gradient is reported under ``key``; reused if seen."""
        if key in self._params:
            return self._params[key]
        v = self._push(Var(np.asarray(array, dtype=float), key=key))
        self._params[key] = v
        return v

    def constant(self, array) -> Var:
        return self._push(Var(np.asarray(array, dtype=float)))

    def record(self, value: np.ndarray, parents: Sequence[Var], backward_fn: Backward) -> Var:
        """Add a custom operation.  ``backward_fn(g)`` returns one gradient per parent."""
        return self._push(Var(value, tuple(parents), backward_fn))

    @property
    def params(self) -> dict[str, Var]:
        return dict(self._params)


# Ops find their tape through this module-level pointer: the most recently
# activated tape.  Tapes are single-threaded by contract.
_ACTIVE: list[Tape] = []


def active_tape() -> Tape:
    if not _ACTIVE:
        raise ContractError("no active tape; use `with recording(tape):`")
    return _ACTIVE[-1]


class recording:
    """Context manager making ``tape`` the target for new operations."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self) -> Tape:
        _ACTIVE.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _ACTIVE.pop()


def _lift(x) -> Var:
    if isinstance(x, Var):
        return x
    return active_tape().constant(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _op(value, parents, fn) -> Var:
    return active_tape().record(value, parents, fn)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _op(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    out = av / bv
    return _op(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Var:
    a = _lift(a)
    return _op(-a.value, (a,), lambda g: (-g,))


def square(a) -> Var:
    a = _lift(a)
    av = a.value
    return _op(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a) -> Var:
    a = _lift(a)
    out = np.exp(a.value)
    return _op(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = _lift(a)
    av = a.value
    return _op(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Var:
    a = _lift(a)
    out = np.tanh(a.value)
    return _op(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp_min(a, floor: float) -> Var:
    """max(a, floor); zero gradient where the floor is active."""
    a = _lift(a)
    keep = a.value >= floor
    return _op(np.where(keep, a.value, floor), (a,), lambda g: (g * keep,))


def scale(a, c: float) -> Var:
    a = _lift(a)
    return _op(a.value * c, (a,), lambda g: (g * c,))


# --------------------------------------------------------------------------
# reductions, indexing, shape
# --------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Var:
    a = _lift(a)
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(np.asarray(out), (a,), bw)


def mean(a, axis=None) -> Var:
    a = _lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def logsumexp(a, axis: int = -1) -> Var:
    a = _lift(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return _op(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def reshape(a, shape) -> Var:
    a = _lift(a)
    old = a.value.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx) -> Var:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = _lift(a)
    shape = a.value.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _op(a.value[idx], (a,), bw)


def columns(a, start: int, stop: int) -> Var:
    """``a[..., start:stop]`` with a cheap slice-assign backward."""
    a = _lift(a)
    shape = a.value.shape

    def bw(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _op(a.value[..., start:stop], (a,), bw)


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [_lift(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _op(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), bw)


def take_along(a, index: np.ndarray, axis: int) -> Var:
    """``np.take_along_axis`` with a fixed integer index (no gradient to it)."""
    a = _lift(a)
    shape = a.value.shape

    def bw(g):
        out = np.zeros(shape)
        np.put_along_axis(out, index, g, axis=axis)
        return (out,)

    return _op(np.take_along_axis(a.value, index, axis=axis), (a,), bw)


def segment_sum(a, segments: np.ndarray, n_segments: int) -> Var:
    """Sum rows of ``a`` into ``n_segments`` bins by integer ``segments``."""
    a = _lift(a)
    seg = np.asarray(segments)
    out = np.zeros((n_segments,) + a.value.shape[1:])
    np.add.at(out, seg, a.value)
    return _op(out, (a,), lambda g: (g[seg],))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Var:
    """Matrix product of 1-D or 2-D operands (numpy ``@`` semantics)."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim > 2 or bv.ndim > 2:
        raise ShapeError("matmul supports 1-D and 2-D operands only")
    # promote vectors to matrices so one backward rule covers every case
    a2 = av.reshape(1, -1) if av.ndim == 1 else av
    b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv

    def bw(g):
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(av.shape), (a2.T @ g2).reshape(bv.shape)

    return _op(av @ bv, (a, b), bw)


def affine(x, W, b) -> Var:
    """x @ W + b for x (N, n), W (n, m), b (m,)."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    xv, Wv = x.value, W.value
    return _op(xv @ Wv + b.value, (x, W, b), lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0)))


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from scalar ``loss``; returns gradients keyed by parameter.

    Every parameter registered on the tape gets an entry (zeros if the loss
    does not depend on it).
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    if not (0 <= loss.index < len(tape.nodes) and tape.nodes[loss.index] is loss):
        raise ContractError("loss was not recorded on this tape")
    adj: list[np.ndarray | None] = [None] * len(tape.nodes)
    adj[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = adj[i]
        node = tape.nodes[i]
        if g is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(g)
        for p, pg in zip(node.parents, grads):
            if pg is None:
                continue
            j = p.index
            if adj[j] is None:
                # adjoints are never updated in place, so sharing is safe
                adj[j] = np.asarray(pg, dtype=float).reshape(p.value.shape)
            else:
                adj[j] = adj[j] + pg
    return {
        k: (adj[v.index] if adj[v.index] is not None else np.zeros_like(v.value))
        for k, v in tape._params.items()
    }


# --------------------------------------------------------------------------
# dense networks
# --------------------------------------------------------------------------

ACTIVATIONS = ("tanh", "linear")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "tanh"
    dropout: float = 0.0


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"layer {i}: unknown activation {layer.activation!r}")
            if not 0.0 <= layer.dropout < 1.0:
                raise ShapeError(f"layer {i}: dropout must be in [0, 1)")
            if layer.W.shape[1] != layer.b.shape[0]:
                raise ShapeError(f"layer {i}: W {layer.W.shape} and b {layer.b.shape} disagree")
            if i and self.layers[i - 1].W.shape[1] != layer.W.shape[0]:
                raise ShapeError(f"layer {i}: input width {layer.W.shape[0]} != {self.layers[i - 1].W.shape[1]}")

    @property
    def n_in(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def n_out(self) -> int:
        return self.layers[-1].W.shape[1]

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.W{i}"] = layer.W
            out[f"{prefix}.b{i}"] = layer.b
        return out

    def load_parameters(self, prefix: str, params: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            W = np.asarray(params[f"{prefix}.W{i}"], dtype=float)
            b = np.asarray(params[f"{prefix}.b{i}"], dtype=float)
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ShapeError(f"{prefix} layer {i}: shape mismatch on load")
            layer.W, layer.b = W, b

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode forward pass without recording."""
        h = np.asarray(x, dtype=float)
        if h.shape[-1] != self.n_in:
            raise ShapeError(f"input width {h.shape[-1]} != {self.n_in}")
        for layer in self.layers:
            h = h @ layer.W + layer.b
            if layer.activation == "tanh":
                h = np.tanh(h)
        return h


def init_dense(sizes: Sequence[int], rng: np.random.Generator, activations: Sequence[str] | None = None,
               dropout: float | Sequence[float] = 0.0) -> DenseNet:
    """Glorot-uniform weights, zero biases.  Hidden layers default to tanh,
    the output layer to linear."""
    n = len(sizes) - 1
    if activations is None:
        activations = ["tanh"] * (n - 1) + ["linear"]
    if np.isscalar(dropout):
        dropout = [float(dropout)] * (n - 1) + [0.0]
    layers = []
    for i in range(n):
        lim = np.sqrt(6.0 / (sizes[i] + sizes[i + 1]))
        W = rng.uniform(-lim, lim, size=(sizes[i], sizes[i + 1]))
        layers.append(Layer(W, np.zeros(sizes[i + 1]), activations[i], float(dropout[i])))
    return DenseNet(layers)


def forward(net: DenseNet, x, *, train: bool = False, rng: np.random.Generator | None = None,
            tape: Tape | None = None, name: str = "net"):
    """Recorded forward pass; returns ``(output Var, tape)``.

    In train mode, inverted dropout masks are drawn from ``rng`` and the
    surviving units are scaled by ``1 / (1 - rate)``.  Infer mode applies no
    masking and is deterministic.
    """
    tape = tape if tape is not None else Tape()
    with recording(tape):
        h = x if isinstance(x, Var) else tape.constant(x)
        if h.value.shape[-1] != net.n_in:
            raise ShapeError(f"input width {h.value.shape[-1]} != {net.n_in}")
        if train and rng is None and any(l.dropout > 0 for l in net.layers):
            raise ContractError("train mode with dropout needs an rng")
        for i, layer in enumerate(net.layers):
            W = tape.param(layer.W, f"{name}.W{i}")
            b = tape.param(layer.b, f"{name}.b{i}")
            h = affine(h, W, b)
            if layer.activation == "tanh":
                h = tanh(h)
            if train and layer.dropout > 0:
                keep = 1.0 - layer.dropout
                mask = (rng.random(h.value.shape) < keep) / keep
                h = mul(h, mask)
    return h, tape


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``;
    the inputs are not modified."""
    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        if g is None:
            new_params[k], m_new[k], v_new[k] = p, m, v
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.epsilon, step, m_new, v_new)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor) elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (flat indices optional)."""
    x = np.array(x, dtype=float, copy=True)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def gradient_floor(fd: np.ndarray, rel: float = 1e-6) -> float:
    """Denominator floor for relative errors: entries far below the gradient's
    own scale are judged against ``rel * max(1, max|fd|)`` so that finite
    difference round-off on near-zero entries does not dominate."""
    return rel * max(1.0, float(np.max(np.abs(fd))) if np.size(fd) else 1.0)


def finite_diff_check(fn: Callable[[Tape, Var], Var], x, eps: float = 1e-5, rel: float = 1e-6) -> float:
    """Max relative error between tape gradient and central differences.

    ``fn(tape, x_var)`` must build a scalar loss on ``tape`` from ``x_var``.
    """
    x = np.asarray(x, dtype=float)

    def value(xv):
        t = Tape()
        with recording(t):
            return float(fn(t, t.param(xv, "x")).value)

    tape = Tape()
    with recording(tape):
        loss = fn(tape, tape.param(x, "x"))
    g = backward(tape, loss)["x"]
    fd = numeric_gradient(value, x, eps)
    return float(np.max(relative_error(g, fd, gradient_floor(fd, rel))))


# --------------------------------------------------------------------------
# checkpoint files
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "egomotion-tensors-v1"


def save_tensors(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``manifest.json`` + ``tensors.bin`` (little-endian float64).

    Tensors are laid out in sorted-name order so output is byte-stable.
    """
    directory = Path(directory)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "byte_order": "little",
        "dtype": "float64",
        "tensors": entries,
        "meta": meta or {},
    }
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(directory / "tensors.bin", b"".join(chunks))
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.frombuffer((directory / "tensors.bin").read_bytes(), dtype="<f8")
    out = {}
    for e in manifest["tensors"]:
        out[e["name"]] = flat[e["offset"]:e["offset"] + e["count"]].astype(float).reshape(e["shape"])
    return out, manifest.get("meta", {})
