"""A small reverse-mode autodiff engine over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.
``Tensor.backward`` walks the graph in reverse topological order and
accumulates (``+=``) into ``.grad`` so shared subgraphs receive summed
gradients.

Broadcasting follows numpy; gradients are summed back to each input shape.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True
_MAC_COUNTERS: list = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class MacCounter:
    def __init__(self):
        self.macs = 0


@contextlib.contextmanager
def count_macs():
    """Count the multiply-accumulates of every ``matmul``/``linear`` call inside the block."""
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _add_macs(n: int):
    for c in _MAC_COUNTERS:
        c.macs += int(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    # make ndarray operands defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=float) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}{', grad' if self.requires_grad else ''})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root``, parents before children (iterative DFS)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))


def _make(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch ``relu``, ``sigmoid``, ``add`` or ``mul`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# --------------------------------------------------------------------------
# shape manipulation and reductions
# --------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), back, "getitem")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != axis % ndim):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def pad_zeros(x, n: int, axis: int) -> Tensor:
    """Append ``n`` all-zero slices along ``axis``."""
    x = as_tensor(x)
    shape = list(x.shape)
    shape[axis] = n
    return concat([x, Tensor(np.zeros(shape))], axis=axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over ``axis``; the summation runs in index order."""
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), back, "mean")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _add_macs(out.size * a.shape[-1])

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back, "matmul")


def linear(x, W, b=None) -> Tensor:
    """``y = x W^T + b`` over the trailing axis of ``x``; ``W`` is ``(d_out, d_in)``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    y = x.data @ W.data.T
    _add_macs(y.size * W.shape[1])
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"linear: bias shape {b.shape} does not match weight {W.shape}")
        y = y + b.data
        parents.append(b)

    def back(g):
        gx = g @ W.data
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ x.data.reshape(-1, x.shape[-1])
        grads = [gx, gW]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(y, parents, back, "linear")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), back, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over all entries."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=float)
    if pred.shape != t.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _make(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """One AdamW update, in place on the arrays of ``params``.

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != parameter {name} {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * theta
        theta -= state.lr * update
    return params


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def gradient_check(f, params: dict, h: float = 1e-6, floor: float = 1e-12,
                   sample: int | None = None, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` maps a dict of :class:`Tensor` (same keys as ``params``) to a
    scalar :class:`Tensor`.  The relative error of one coordinate is
    ``|g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)``.  With ``sample`` set,
    at most that many randomly chosen coordinates of each parameter are
    checked.
    """
    leaves = {k: Tensor(np.array(v, dtype=float), requires_grad=True, name=k) for k, v in params.items()}
    f(leaves).backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for k, leaf in leaves.items():
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            coords = range(flat.size)
            if sample is not None and flat.size > sample:
                coords = np.sort(rng.choice(flat.size, size=sample, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                step = flat[i]
                fp = float(f(leaves).data)
                flat[i] = orig - h
                step -= flat[i]  # the step actually taken in floating point
                fm = float(f(leaves).data)
                flat[i] = orig
                fd = (fp - fm) / step
                ga = float(analytic.reshape(-1)[i])
                err = abs(ga - fd) / max(floor, abs(ga) + abs(fd))
                worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TTPM"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays: dict, extra: dict | None = None) -> None:
    """Write named float64 arrays: magic, version, length-prefixed manifest, raw data."""
    names = list(arrays)
    manifest = {
        "params": [[n, list(np.shape(arrays[n]))] for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest") from exc
    offset = 12 + mlen
    arrays = {}
    for name, shape in manifest["params"]:
        n = math.prod(shape)
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(float).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, manifest["extra"]
