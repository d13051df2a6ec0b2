"""Minimal reverse-mode differentiation over numpy arrays.

Every op builds a node holding its parents and a vector-Jacobian function;
``backward`` walks the tape in reverse topological order. Broadcasting follows
numpy rules and gradients are summed back onto the broadcast operand.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy import sparse

_DTYPE = np.float64

GMC_MAGIC = b"GMC1"


def set_dtype(dtype) -> None:
    """Switch the working precision (float64 for verification, float32 allowed)."""
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


def get_dtype():
    return _DTYPE


class Tensor:
    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

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

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _node(data, parents, vjp) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (), _vjp=vjp if req else None)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` for a constant floor."""
    x = as_tensor(x)
    mask = x.data > floor
    return _node(np.where(mask, x.data, floor).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


# -- linear algebra / shape --------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), vjp)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def broadcast(x, shape) -> Tensor:
    """Expand leading/size-1 dimensions to ``shape``."""
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), vjp)


def gather_rows(x, idx) -> Tensor:
    """``x[idx]`` for an integer index array of any shape; gradients scatter-add."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def vjp(g):
        flat = g.reshape(idx.size, -1)
        rows = idx.ravel() % x.shape[0]
        scatter = sparse.csr_matrix((np.ones(idx.size, dtype=flat.dtype), (rows, np.arange(idx.size))),
                                    shape=(x.shape[0], idx.size))
        return (np.asarray(scatter @ flat).reshape(x.shape),)

    return _node(out, (x,), vjp)


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tuple(ts), vjp)


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    return _node(out, tuple(ts),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


# -- reductions ---------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _node(out, (x,), lambda g: (_expand(g, x.shape, axis, keepdims).copy(),))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return reduce_sum(x, axis, keepdims) * (1.0 / count)


def reduce_max(x, axis=-1, keepdims=False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    argk = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, argk, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, argk, gk, axis=axis)
        return (gx,)

    return _node(out, (x,), vjp)


def logsumexp(x, axis=-1, keepdims=False) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x.data - m), axis=axis, keepdims=True)
    outk = np.log(s) + m
    out = outk if keepdims else np.squeeze(outk, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(x.data - outk),)

    return _node(out, (x,), vjp)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, (x,), vjp)


def softmax_lastdim(x) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x, eps: float = 1e-8) -> Tensor:
    """Normalise the last dimension to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _node(out, (x,), vjp)


# -- custom ops ---------------------------------------------------------------

def custom_op(data, parents, vjp) -> Tensor:
    """Wrap a numpy result with a hand-written vector-Jacobian product."""
    return _node(np.asarray(data), tuple(as_tensor(p) for p in parents), vjp)


# -- backward -----------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = np.asarray(gp)


# -- parameters ---------------------------------------------------------------

class ParamStore:
    """Named parameter tensors plus Adam moment state."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(value, dtype=_DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def linear(self, name: str, fan_in: int, fan_out: int, bias: bool = True):
        """Kaiming-uniform weight ``name.w`` (fan_in x fan_out) and zero bias ``name.b``."""
        bound = np.sqrt(6.0 / fan_in)
        w = self.add(f"{name}.w", self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        b = self.add(f"{name}.b", np.zeros(fan_out)) if bias else None
        return w, b

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for k, t in self.params.items()}

    def shapes(self) -> dict[str, tuple]:
        return {k: t.shape for k, t in self.params.items()}

    def astype(self, dtype) -> None:
        for t in self.params.values():
            t.data = t.data.astype(dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != tuple(v.shape):
                raise ValueError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.params[k].data.dtype).copy()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.params.values())


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, t: int | None = None):
    """One bias-corrected Adam update applied in place; returns the store."""
    if t is None:
        params.step += 1
        t = params.step
    else:
        params.step = t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter {name} shape {p.shape}")
        m = params._m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = params._v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        params._m[name], params._v[name] = m, v
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return params


def save_params(path, params: ParamStore) -> None:
    """Write the little-endian ``GMC1`` checkpoint."""
    with open(path, "wb") as fh:
        fh.write(GMC_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != GMC_MAGIC:
        raise ValueError(f"{path}: not a GMC1 checkpoint")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return out
