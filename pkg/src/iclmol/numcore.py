"""Minimal dense-tensor core with reverse-mode autodiff.

Tensors wrap contiguous numpy arrays (float32 or float64). Every op records
itself on an implicit tape (parent links); `backward` walks the records in
reverse topological order exactly once. No broadcasting beyond what the op
gradients explicitly undo via `_unbroadcast`.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch inside an op; message names the offending op."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


_DTYPES = {"f32": np.float32, "f64": np.float64}


def _as_dtype(precision):
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}") from None


class Tensor:
    """A dense array node in a computation trace."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.ascontiguousarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    # ---- trace walking ----

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor.

        Accumulates into `.grad` of every reachable tensor with
        requires_grad. `seed` defaults to ones (scalar losses).
        """
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg.astype(parent.data.dtype, copy=True)
                else:
                    acc += pg

    def zero_grad(self):
        self.grad = None

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.dtype))


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, precision="f64", requires_grad=False):
    return Tensor(np.asarray(data, dtype=_as_dtype(precision)), requires_grad=requires_grad)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check(cond, op, msg):
    if not cond:
        raise DimensionError(f"{op}: {msg}")


# ---- primitive ops ----


def add(a, b):
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: {e}") from None
    return Tensor(out, _parents=(a, b), _op="add",
                  _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    try:
        out = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: {e}") from None
    return Tensor(out, _parents=(a, b), _op="sub",
                  _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: {e}") from None
    return Tensor(out, _parents=(a, b), _op="mul",
                  _backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    _check(a.data.ndim >= 1 and b.data.ndim >= 2, "matmul", "rank too low")
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise DimensionError(f"matmul: {e}") from None

    def backward(g):
        if a.data.ndim == 1:
            ga = g @ b.data.T
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if a.data.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, _parents=(a, b), _op="matmul", _backward=backward)


def exp(a):
    out = np.exp(a.data)
    return Tensor(out, _parents=(a,), _op="exp", _backward=lambda g: (g * out,))


def log(a):
    return Tensor(np.log(a.data), _parents=(a,), _op="log",
                  _backward=lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor(out, _parents=(a,), _op="tanh", _backward=lambda g: (g * (1.0 - out * out),))


def silu(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return Tensor(out, _parents=(a,), _op="silu",
                  _backward=lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


def gelu(a):
    # tanh approximation; smooth and cheap
    c = float(np.sqrt(2.0 / np.pi))
    x = a.data
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return Tensor(out, _parents=(a,), _op="gelu", _backward=backward)


def absolute(a):
    s = np.sign(a.data)
    return Tensor(np.abs(a.data), _parents=(a,), _op="abs", _backward=lambda g: (g * s,))


def square(a):
    return Tensor(a.data * a.data, _parents=(a,), _op="square",
                  _backward=lambda g: (2.0 * g * a.data,))


def softmax(a, mask=None):
    """Softmax over the last axis; `mask` is an additive constant (e.g. -inf)."""
    x = a.data if mask is None else a.data + mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, _parents=(a,), _op="softmax", _backward=backward)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis, then scale+shift. Fused gradient."""
    _check(gain.shape == (a.shape[-1],) and bias.shape == (a.shape[-1],),
           "layer_norm", f"gain/bias must be ({a.shape[-1]},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        gxhat = g * gain.data
        dx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        axes = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor(out, _parents=(a, gain, bias), _op="layer_norm", _backward=backward)


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, _parents=(a,), _op="sum", _backward=backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), _lift(1.0 / n, a.dtype))


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {e}") from None
    return Tensor(out, _parents=(a,), _op="reshape",
                  _backward=lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return Tensor(a.data.transpose(axes), _parents=(a,), _op="transpose",
                  _backward=lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, _parents=tuple(tensors), _op="concat", _backward=backward)


def gather(a, index, axis=0):
    """Take rows along `axis` by an integer index array (constant)."""
    index = np.asarray(index)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * axis + (index,), g)
        return (ga,)

    return Tensor(out, _parents=(a,), _op="gather", _backward=backward)


def pair_mix(gate, x):
    """out[..., i, c] = sum_j gate[..., i, j, c] * x[..., j, c].

    Gated neighbor aggregation; `gate` carries pairwise geometry features
    already projected to the channel dimension.
    """
    _check(gate.data.ndim == x.data.ndim + 1, "pair_mix", "gate must have one extra axis")
    _check(gate.shape[-1] == x.shape[-1] and gate.shape[-2] == x.shape[-2],
           "pair_mix", f"incompatible shapes {gate.shape} vs {x.shape}")
    out = np.einsum("...ijc,...jc->...ic", gate.data, x.data)

    def backward(g):
        ggate = np.einsum("...ic,...jc->...ijc", g, x.data)
        gx = np.einsum("...ijc,...ic->...jc", gate.data, g)
        return ggate, gx

    return Tensor(out, _parents=(gate, x), _op="pair_mix", _backward=backward)


# ---- gradient entry points ----


def forward_backward(expr, inputs):
    """Evaluate `expr(*inputs)` (must return a scalar Tensor) and return
    (value, [grad per input flagged requires_grad, else None])."""
    for t in inputs:
        t.zero_grad()
    out = expr(*inputs)
    if out.data.size != 1:
        raise DimensionError(f"forward_backward: expr returned shape {out.shape}, expected scalar")
    out.backward()
    return float(out.data.reshape(())), [t.grad if t.requires_grad else None for t in inputs]


def finite_diff_grad(expr, inputs, h=1e-6):
    """Central-difference gradient of a scalar expr, per input scalar. f64 only."""
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("finite_diff_grad requires f64 inputs")

    def value():
        v = expr(*[Tensor(t.data) for t in inputs]).data
        if not np.all(np.isfinite(v)):
            raise NumericError("finite_diff_grad: non-finite value")
        return float(v.reshape(()))

    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


# ---- checkpoint container ----

_MAGIC = b"ICLM"
_FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, tensors):
    """Write named arrays to the versioned binary container.

    Layout: magic "ICLM", version u32, count u32; per tensor: name length
    u32 + UTF-8 name, dtype tag u8 (0=f32, 1=f64), rank u32, dims u64[],
    then raw little-endian scalars. All integers little-endian.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(_FORMAT_VERSION).tobytes())
        f.write(np.uint32(len(tensors)).tobytes())
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            nb = name.encode("utf-8")
            f.write(np.uint32(len(nb)).tobytes())
            f.write(nb)
            f.write(np.uint8(_DTYPE_TAGS[arr.dtype]).tobytes())
            f.write(np.uint32(arr.ndim).tobytes())
            f.write(np.asarray(arr.shape, dtype="<u8").tobytes())
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path):
    """Read a container written by save_checkpoint; returns {name: ndarray}."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version = int(np.frombuffer(take(4), dtype="<u4")[0])
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    count = int(np.frombuffer(take(4), dtype="<u4")[0])
    out = {}
    for _ in range(count):
        nlen = int(np.frombuffer(take(4), dtype="<u4")[0])
        name = take(nlen).decode("utf-8")
        tag = int(np.frombuffer(take(1), dtype="<u1")[0])
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: bad dtype tag {tag} for {name!r}")
        rank = int(np.frombuffer(take(4), dtype="<u4")[0])
        dims = np.frombuffer(take(8 * rank), dtype="<u8").astype(np.int64)
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("=")).copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return out
