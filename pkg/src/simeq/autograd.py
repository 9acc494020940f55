"""A small reverse-mode differentiation engine over numpy arrays.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy call.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy import sparse

_state = threading.local()


def active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the reflected Tensor operator

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)


class Node:
    __slots__ = ("name", "fwd", "bwd", "inputs", "output")

    def __init__(self, name, fwd, bwd, inputs, output):
        self.name = name
        self.fwd = fwd
        self.bwd = bwd
        self.inputs = inputs
        self.output = output


class Tape:
    """Records operations for one forward/backward pair."""

    def __init__(self, parameters=()):
        self.nodes: list[Node] = []
        self.parameters = list(parameters)

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()

    def backward(self, root: Tensor) -> dict:
        return backward(self, root)

    def replay(self) -> bool:
        """Re-run every recorded op from its leaf inputs; True iff all outputs match bitwise."""
        values = {}
        ok = True
        for node in self.nodes:
            args = [values.get(id(x), x.data) if isinstance(x, Tensor) else x for x in node.inputs]
            out = node.fwd(*args)
            values[id(node.output)] = out
            ok &= out.shape == node.output.data.shape and np.array_equal(out, node.output.data)
        return bool(ok)


def backward(tape: Tape, root: Tensor) -> dict:
    """Populate ``.grad`` on the tape's parameters; returns {id(param): grad}."""
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise ValueError("backward needs a scalar root tensor")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        arrays = [x.data if isinstance(x, Tensor) else x for x in node.inputs]
        in_grads = node.bwd(g, node.output.data, *arrays)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not isinstance(x, Tensor) or not x.requires_grad:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
    result = {}
    for p in tape.parameters:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.data.shape)
        result[id(p)] = p.grad
    return result


def _op(name, fwd, bwd, *inputs):
    arrays = [x.data if isinstance(x, Tensor) else x for x in inputs]
    out = Tensor(fwd(*arrays))
    tape = active_tape()
    if tape is not None and any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        out.requires_grad = True
        # only the tape points at nodes, so a dropped tape frees its graph without the cycle collector
        tape.nodes.append(Node(name, fwd, bwd, inputs, out))
    return out


def as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(x)


# --- elementwise ------------------------------------------------------------------------


def add(a, b):
    return _op(
        "add", np.add, lambda g, o, a, b: (unbroadcast(g, _shape(a)), unbroadcast(g, _shape(b))), a, b
    )


def sub(a, b):
    return _op(
        "sub", np.subtract, lambda g, o, a, b: (unbroadcast(g, _shape(a)), unbroadcast(-g, _shape(b))), a, b
    )


def mul(a, b):
    return _op(
        "mul",
        np.multiply,
        lambda g, o, a, b: (unbroadcast(g * b, _shape(a)), unbroadcast(g * a, _shape(b))),
        a,
        b,
    )


def div(a, b):
    return _op(
        "div",
        np.divide,
        lambda g, o, a, b: (unbroadcast(g / b, _shape(a)), unbroadcast(-g * a / (b * b), _shape(b))),
        a,
        b,
    )


def neg(a):
    return _op("neg", np.negative, lambda g, o, a: (-g,), a)


def power(a, p):
    p = float(p)
    return _op("pow", lambda a: a**p, lambda g, o, a: (g * p * a ** (p - 1),), a)


def exp(a):
    return _op("exp", np.exp, lambda g, o, a: (g * o,), a)


def log(a):
    return _op("log", np.log, lambda g, o, a: (g / a,), a)


def sqrt(a):
    return _op("sqrt", np.sqrt, lambda g, o, a: (np.where(o > 0, g * 0.5 / np.where(o > 0, o, 1.0), 0.0),), a)


def relu(a):
    return _op("relu", lambda a: np.maximum(a, 0.0), lambda g, o, a: (g * (a > 0),), a)


def clamp_min(a, floor: float):
    """max(a, floor) with the gradient routed to ``a`` wherever ``a >= floor``."""
    return _op("clamp_min", lambda a: np.maximum(a, floor), lambda g, o, a: (g * (a >= floor),), a)


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    return _op(
        "where",
        lambda a, b: np.where(mask, a, b),
        lambda g, o, a, b: (
            unbroadcast(np.where(mask, g, 0.0), _shape(a)),
            unbroadcast(np.where(mask, 0.0, g), _shape(b)),
        ),
        a,
        b,
    )


# --- reductions and shape ---------------------------------------------------------------


def _expand_grad(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(a % len(shape) for a in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    return _op(
        "sum",
        lambda a: np.sum(a, axis=axis, keepdims=keepdims),
        lambda g, o, a: (_expand_grad(g, a.shape, axis, keepdims),),
        a,
    )


def mean(a, axis=None, keepdims=False):
    shape = _shape(as_array(a))
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[ax] for ax in axes]))
    return _op(
        "mean",
        lambda a: np.mean(a, axis=axis, keepdims=keepdims),
        lambda g, o, a: (_expand_grad(g, a.shape, axis, keepdims) / count,),
        a,
    )


def max_(a, axis):
    """Max along one axis; ties go to the lowest index."""
    arr = as_array(a)
    idx = np.expand_dims(np.argmax(arr, axis=axis), axis)
    return squeeze(take_along_axis(a, idx, axis), axis)


def reshape(a, shape):
    return _op("reshape", lambda a: np.reshape(a, shape), lambda g, o, a: (g.reshape(a.shape),), a)


def squeeze(a, axis):
    return _op("squeeze", lambda a: np.squeeze(a, axis), lambda g, o, a: (g.reshape(a.shape),), a)


def expand_dims(a, axis):
    return _op("expand_dims", lambda a: np.expand_dims(a, axis), lambda g, o, a: (g.reshape(a.shape),), a)


def transpose(a, axes):
    inv = np.argsort(axes)
    return _op("transpose", lambda a: np.transpose(a, axes), lambda g, o, a: (np.transpose(g, inv),), a)


def broadcast_to(a, shape):
    shape = tuple(shape)
    return _op(
        "broadcast_to",
        lambda a: np.broadcast_to(a, shape).copy(),
        lambda g, o, a: (unbroadcast(g, a.shape),),
        a,
    )


def _has_array_index(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def _scatter_add(shape, key, g):
    """Adjoint of ``a[key]`` when ``key`` is a tuple of integer arrays on the leading axes."""
    lead = shape[: len(key)]
    rows = np.ravel_multi_index(np.broadcast_arrays(*key), lead).ravel()
    cols = np.arange(rows.size)
    scatter = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(int(np.prod(lead)), rows.size))
    return np.asarray(scatter @ g.reshape(rows.size, -1)).reshape(shape)


def getitem(a, key):
    def bwd(g, o, a):
        keys = key if isinstance(key, tuple) else (key,)
        if all(isinstance(k, np.ndarray) and k.dtype.kind in "iu" for k in keys):
            return (_scatter_add(a.shape, keys, g),)
        out = np.zeros_like(a)
        if _has_array_index(key):
            np.add.at(out, key, g)
        else:
            out[key] += g
        return (out,)

    return _op("getitem", lambda a: a[key], bwd, a)


def take_along_axis(a, idx, axis):
    """Gather with ``idx``; each gathered source element must be selected at most once."""
    idx = np.asarray(idx)

    def bwd(g, o, a):
        out = np.zeros_like(a)
        np.put_along_axis(out, idx, g, axis)
        return (out,)

    return _op("take_along_axis", lambda a: np.take_along_axis(a, idx, axis), bwd, a)


def concat(tensors, axis):
    sizes = [_shape(as_array(t))[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fwd(*arrays):
        return np.concatenate(arrays, axis=axis)

    def bwd(g, o, *arrays):
        return tuple(np.split(g, splits, axis=axis))

    return _op("concat", fwd, bwd, *tensors)


# --- contractions -----------------------------------------------------------------------


def channel_mix(w, v):
    """out[..., o, k] = sum_d w[o, d] * v[..., d, k] (the vector-neuron linear map)."""

    def bwd(g, o, w, v):
        d_out, d_in = w.shape
        g_rows = np.moveaxis(g, -2, 0).reshape(d_out, -1)
        v_rows = np.moveaxis(v, -2, 0).reshape(d_in, -1) if v.ndim > 2 else v
        if v.ndim > 2 and g.ndim > v.ndim:
            v_rows = np.moveaxis(np.broadcast_to(v, g.shape[:-2] + v.shape[-2:]), -2, 0).reshape(d_in, -1)
        return g_rows @ v_rows.T, unbroadcast(np.matmul(w.T, g), v.shape)

    return _op("channel_mix", np.matmul, bwd, w, v)


def linear(x, w, b=None):
    """Scalar dense layer: x[..., i] @ w[o, i].T + b[o]."""

    def fwd(x, w):
        return x @ w.T

    def bwd(g, o, x, w):
        gx = g @ w
        gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        return gx, gw

    out = _op("linear", fwd, bwd, x, w)
    return out if b is None else add(out, b)


def einsum(spec: str, a, b):
    """Two-operand einsum; every index of an operand must appear in the other operand or the output."""
    ins, out_spec = spec.replace(" ", "").split("->")
    a_spec, b_spec = ins.split(",")

    def grad_for(g, other, g_spec, other_spec, target_spec, target_shape):
        res = np.einsum(f"{g_spec},{other_spec}->{target_spec}", g, other)
        return unbroadcast(res, target_shape)

    def bwd(g, o, a, b):
        return (
            grad_for(g, b, out_spec, b_spec, a_spec, a.shape),
            grad_for(g, a, out_spec, a_spec, b_spec, b.shape),
        )

    return _op("einsum", lambda a, b: np.einsum(spec, a, b), bwd, a, b)


# --- composite primitives with dedicated gradients --------------------------------------


def vnorm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; gradient is defined as zero at the origin."""

    def fwd(a):
        return np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims))

    def bwd(g, o, a):
        n = o if keepdims else np.expand_dims(o, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gg * a / safe, 0.0),)

    return _op("vnorm", fwd, bwd, a)


def softmax(a, axis=-1):
    def fwd(a):
        z = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g, o, a):
        return (o * (g - np.sum(g * o, axis=axis, keepdims=True)),)

    return _op("softmax", fwd, bwd, a)


def vn_gate(f, o, b, eps: float):
    """Fused vector-neuron ReLU on rows: with w = f - o and u = b - o, keep f where
    <w, u> >= 0 (or |u| < eps), otherwise return f - (<w, u> / |u|^2) u."""

    def parts(f, o, b):
        u = b - o
        w = f - o
        dot = np.einsum("...k,...k->...", w, u)[..., None]
        sq = np.einsum("...k,...k->...", u, u)[..., None]
        off = (dot < 0) & (sq >= eps * eps)
        c = np.where(off, dot / np.where(off, sq, 1.0), 0.0)
        return u, w, sq, off, c

    def fwd(f, o, b):
        u, _, _, _, c = parts(f, o, b)
        return f - c * u

    def bwd(g, out, f, o, b):
        u, w, sq, off, c = parts(f, o, b)
        inv = np.where(off, 1.0 / np.where(off, sq, 1.0), 0.0)
        gu = np.einsum("...k,...k->...", g, u)[..., None] * inv
        g_w = -gu * u
        g_u = -c * g - gu * w + 2.0 * gu * c * u
        return g + g_w, -g_w - g_u, g_u

    return _op("vn_gate", fwd, bwd, f, o, b)


# --- checking ---------------------------------------------------------------------------


def gradcheck(fn, arrays, params=(), samples: int = 64, h: float = 1e-5, seed: int = 0) -> tuple[float, int]:
    """Compare reverse-mode gradients with central differences.

    ``fn`` maps one tensor per entry of ``arrays`` to a tensor of any shape, which is
    reduced to a scalar with a fixed random weighting. ``params`` are extra leaves
    (e.g. a module's parameters) that ``fn`` reads directly. Returns
    ``(relative error, coordinates checked)`` with the error taken as
    ||analytic - numeric|| / max(||analytic||, ||numeric||) over up to ``samples``
    coordinates drawn uniformly across all leaves.
    """
    rng = np.random.default_rng(seed)
    inputs = [Parameter(np.array(a, dtype=np.float64)) for a in arrays]
    leaves = inputs + list(params)
    with Tape(leaves) as tape:
        out = fn(*inputs)
        weights = rng.standard_normal(out.shape)
        root = sum_(out * weights)
    tape.backward(root)
    grads = [leaf.grad.reshape(-1).copy() for leaf in leaves]
    coords = [(i, j) for i, leaf in enumerate(leaves) for j in range(leaf.data.size)]
    pick = rng.choice(len(coords), size=min(samples, len(coords)), replace=False)

    def value():
        return float(np.sum(fn(*inputs).data * weights))

    analytic, numeric = [], []
    for c in pick:
        i, j = coords[c]
        leaf = leaves[i]
        original = leaf.data
        analytic.append(grads[i][j])
        vals = []
        for step in (h, -h):
            bumped = original.copy()
            bumped.reshape(-1)[j] += step
            leaf.data = bumped
            vals.append(value())
        leaf.data = original
        numeric.append((vals[0] - vals[1]) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom), len(pick)


# --- modules ----------------------------------------------------------------------------


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: expected shape {p.data.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())
