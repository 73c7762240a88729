"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Computation is define-by-run: every primitive returns a new :class:`Tensor`
that remembers its parents and a closure mapping the upstream gradient to
gradients for those parents. :func:`backward` walks the recorded graph in
reverse topological order and accumulates gradients by summation.

Parameters are leaf tensors tagged with a parameter group. Tensors that do
not require gradients (constants, frozen parameters) are never visited.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from scipy.special import erf

PARAM_GROUPS = ("speaker_extractor", "layer_weights", "decoder", "frozen")


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, op="const", requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor owned by exactly one parameter group."""

    __slots__ = ("name", "group")

    def __init__(self, data, name, group):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(np.array(data, dtype=np.float64), op="param",
                         requires_grad=group != "frozen")
        self.name = name
        self.group = group

    def __repr__(self):
        return f"Parameter({self.name!r}, group={self.group}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op, data, parents, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by node '{op}'")
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op, requires_grad=False)
    return Tensor(data, parents, backward_fn, op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _node("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _node("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def neg(a):
    a = as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node("relu", a.data * mask, (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node("gelu", out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes.

    ``a`` is ``[..., n, k]`` and ``b`` is ``[..., k, m]``; 1-d operands are
    not accepted.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", out, (a, b), backward_fn)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _node("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return _node("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, old),))


def take(a, index, axis):
    """Select one slice along ``axis`` (the axis is dropped)."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def backward_fn(g):
        full = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _node("take", out, (a,), backward_fn)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node("concat", out, tensors,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum_over_axis(a, axis, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", out, (a,), backward_fn)


def mean_over_axis(a, axis, keepdims=False):
    a = as_tensor(a)
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _node("mean", out, (a,), backward_fn)


def total(a):
    """Sum of all elements, as a scalar tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _node("total", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.full(shape, float(g)),))


# ---------------------------------------------------------------------------
# normalisation, softmax, attention
# ---------------------------------------------------------------------------

def layer_norm(a, eps=1e-5):
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _node("layer_norm", y, (a,), backward_fn)


def _softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    a = as_tensor(a)
    y = _softmax(a.data, axis)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node("softmax", y, (a,), backward_fn)


def scaled_dot_product_attention(q, k, v, bias=None):
    """softmax(q k^T / sqrt(d) + bias) v over the last two axes.

    Shapes: q ``[..., Tq, d]``, k ``[..., Tk, d]``, v ``[..., Tk, dv]``.
    ``bias`` is an optional constant array broadcastable to ``[..., Tq, Tk]``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    c = 1.0 / math.sqrt(q.shape[-1])
    kt = np.swapaxes(k.data, -1, -2)
    scores = (q.data @ kt) * c
    if bias is not None:
        scores = scores + bias
    p = _softmax(scores, -1)
    out = p @ v.data

    def backward_fn(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _node("attention", out, (q, k, v), backward_fn)


# ---------------------------------------------------------------------------
# losses and gradient reversal
# ---------------------------------------------------------------------------

def l1_loss(pred, target):
    """Mean absolute error over all elements (scalar)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff) / n
    return _node("l1_loss", np.asarray(np.abs(diff).mean()), (pred, target),
                 lambda g: (g * sign, -g * sign))


def l2_distance_squared(a, b):
    """Squared euclidean distance over the last axis.

    Returns one value per leading index; a pair of vectors gives a scalar.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance_squared shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = (diff * diff).sum(axis=-1)

    def backward_fn(g):
        gd = 2.0 * np.expand_dims(g, -1) * diff
        return gd, -gd

    return _node("l2_distance_squared", out, (a, b), backward_fn)


def gradient_reversal(x, lam=1.0):
    """Identity forward; the backward pass multiplies the upstream gradient by ``-lam``."""
    lam = float(lam)
    if not math.isfinite(lam):
        raise NonFiniteError("gradient_reversal lambda is not finite")
    x = as_tensor(x)
    return _node("gradient_reversal", x.data, (x,), lambda g: (-lam * g,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt=None):
    """Gradients of a scalar ``loss``.

    Returns a dict mapping each reached :class:`Parameter` name to its
    gradient. When ``wrt`` (a sequence of tensors) is given, a list of
    gradients aligned with it is returned instead; unreached entries get
    zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"non-finite gradient flowing out of node '{node.op}'")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if wrt is not None:
        return [grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in wrt]
    return {n.name: grads[id(n)].reshape(n.shape)
            for n in _topological_order(loss) if isinstance(n, Parameter) and id(n) in grads}


def numeric_gradient(fn, x, eps=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


class Graph:
    """A named-input, named-output differentiable function plus its parameters.

    ``fn(params, **inputs)`` builds the graph on every call and returns a
    dict of output tensors. ``signature`` maps input names to shapes; a
    ``None`` entry in a shape matches any size.
    """

    def __init__(self, fn, signature, params=None):
        self.fn = fn
        self.signature = dict(signature)
        self.params = params if params is not None else ParamStore()

    def forward(self, inputs):
        if set(inputs) != set(self.signature):
            raise ShapeError(f"graph inputs {sorted(inputs)} != signature {sorted(self.signature)}")
        tensors = {}
        for name, expected in self.signature.items():
            t = as_tensor(inputs[name])
            if len(expected) != t.ndim or any(e is not None and e != s for e, s in zip(expected, t.shape)):
                raise ShapeError(f"input {name!r} has shape {t.shape}, expected {tuple(expected)}")
            tensors[name] = t
        outputs = self.fn(self.params, **tensors)
        for name, t in outputs.items():
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"non-finite graph output {name!r}")
        return outputs


def forward(graph, inputs):
    return graph.forward(inputs)


# ---------------------------------------------------------------------------
# parameter store + checkpoint container
# ---------------------------------------------------------------------------

class ParamStore(dict):
    """Ordered name -> :class:`Parameter` mapping."""

    def create(self, name, data, group):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(data, name, group)
        self[name] = p
        return p

    def group(self, tag):
        return {n: p for n, p in self.items() if p.group == tag}

    def trainable(self):
        return {n: p for n, p in self.items() if p.group != "frozen"}

    def arrays(self):
        return {n: p.data.copy() for n, p in self.items()}

    def load_arrays(self, arrays, strict=True):
        for name, arr in arrays.items():
            if name not in self:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r} in checkpoint")
                continue
            if arr.shape != self[name].shape:
                raise ShapeError(f"shape mismatch for {name}: {arr.shape} vs {self[name].shape}")
            self[name].data = arr.copy()


_MAGIC = b"CHVC1\n"


def save_container(path, arrays, groups=None):
    """Write ``name -> float64 array`` to a binary container plus text manifest.

    Binary layout (all integers little-endian): magic ``CHVC1\\n``, uint32
    entry count, then per entry: uint32 name length, UTF-8 name, uint32
    ndim, ndim x uint32 shape, raw little-endian float64 data in row-major
    order. The manifest ``<path>.manifest`` has one
    ``name<TAB>shape<TAB>group`` line per entry, shape written as
    ``d0xd1x...``.
    """
    path = Path(path)
    groups = groups or {}
    chunks = [_MAGIC, struct.pack("<I", len(arrays))]
    lines = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{shape}\t{groups.get(name, 'none')}\n")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".manifest").write_text("".join(lines), encoding="utf-8")


def load_container(path):
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint container")
    pos = len(_MAGIC)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint container")
    return arrays


def save_params(path, store):
    save_container(path, store.arrays(), {n: p.group for n, p in store.items()})
