"""Reverse-mode automatic differentiation on a linear tape.

Every primitive accepts plain ``np.ndarray`` inputs or :class:`Var` handles.
When no input is a ``Var`` the primitive is plain numpy and nothing is
recorded, so model code runs unchanged with or without a tape.

    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = ad.sum(ad.mul(x, x))
    grads = tape.backward(y)
    grads[x]            # -> array([2., 2., 2.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch, UnknownNode
from .kernels import masked_softmax as _masked_softmax_kernel


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")
    # keep numpy from broadcasting over Var objects in ``ndarray + Var``
    __array_ufunc__ = None

    def __init__(self, tape, node_id, value):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

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

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass
class Entry:
    name: str
    fwd: Callable | None  # None marks a leaf
    vjp: Callable | None
    inputs: list  # Var ids (int) or constant arrays, in call order
    is_var: list
    kwargs: dict
    out: np.ndarray
    ctx: Any = None


class Gradients(dict):
    """Node-id keyed gradients that also accept :class:`Var` keys."""

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Var):
            key = key.id
        return super().__contains__(key)


@dataclass
class Tape:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def leaf(self, value, name="leaf") -> Var:
        value = np.asarray(value)
        self.entries.append(Entry(name, None, None, [], [], {}, value))
        return Var(self, len(self.entries) - 1, value)

    @property
    def leaf_ids(self):
        return [i for i, e in enumerate(self.entries) if e.fwd is None]

    def record(self, name, fwd, vjp, inputs, kwargs):
        vals, ids, is_var = [], [], []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise ValueError("mixing Vars from different tapes")
                vals.append(x.value)
                ids.append(x.id)
                is_var.append(True)
            else:
                vals.append(x)
                ids.append(x)
                is_var.append(False)
        out, ctx = fwd(*vals, **kwargs)
        self.entries.append(Entry(name, fwd, vjp, ids, is_var, kwargs, out, ctx))
        return Var(self, len(self.entries) - 1, out)

    def _values(self, entry, values):
        return [values[i] if v else i for i, v in zip(entry.inputs, entry.is_var)]

    def backward(self, seed, seed_grad=None) -> Gradients:
        """Vector-Jacobian product of ``seed`` against every leaf on the tape."""
        if isinstance(seed, Var) and seed.tape is not self:
            raise UnknownNode(f"{seed!r} belongs to another tape")
        seed_id = seed.id if isinstance(seed, Var) else seed
        if not isinstance(seed_id, (int, np.integer)) or not 0 <= seed_id < len(self.entries):
            raise UnknownNode(seed_id)
        out = self.entries[seed_id].out
        if seed_grad is None:
            seed_grad = np.ones_like(out)
        seed_grad = np.asarray(seed_grad, dtype=out.dtype)
        if seed_grad.shape != out.shape:
            raise ShapeMismatch(f"seed grad {seed_grad.shape} vs output {out.shape}")

        values = [e.out for e in self.entries]
        grads = {seed_id: seed_grad}
        for i in range(seed_id, -1, -1):
            e = self.entries[i]
            g = grads.get(i)
            if g is None or e.fwd is None:
                continue
            vals = self._values(e, values)
            parent_grads = e.vjp(g, e.ctx, *vals, **e.kwargs)
            for pid, isv, pg in zip(e.inputs, e.is_var, parent_grads):
                if not isv or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
            if i != seed_id:
                del grads[i]

        result = Gradients()
        for i in self.leaf_ids:
            result[i] = grads[i] if i in grads else np.zeros_like(self.entries[i].out)
        return result

    def replay(self, leaf_values=None):
        """Re-run every recorded op from the leaves; returns all node values.

        ``leaf_values`` maps leaf ids (or Vars) to replacement values.
        """
        overrides = {}
        for k, v in (leaf_values or {}).items():
            overrides[k.id if isinstance(k, Var) else k] = np.asarray(v)
        values = []
        for i, e in enumerate(self.entries):
            if e.fwd is None:
                values.append(overrides.get(i, e.out))
            else:
                out, _ = e.fwd(*self._values(e, values), **e.kwargs)
                values.append(out)
        return values


def _apply(name, fwd, vjp, inputs, **kwargs):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            tape = x.tape
            break
    if tape is None:
        return fwd(*inputs, **kwargs)[0]
    return tape.record(name, fwd, vjp, list(inputs), kwargs)


def value(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x):
    return np.shape(x)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    return _apply(
        "add",
        lambda a, b: (a + b, None),
        lambda g, _, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))),
        (a, b),
    )


def sub(a, b):
    return _apply(
        "sub",
        lambda a, b: (a - b, None),
        lambda g, _, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))),
        (a, b),
    )


def mul(a, b):
    return _apply(
        "mul",
        lambda a, b: (a * b, None),
        lambda g, _, a, b: (_unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))),
        (a, b),
    )


def div(a, b):
    def vjp(g, _, a, b):
        ga = g / b
        return _unbroadcast(ga, _shape(a)), _unbroadcast(-ga * a / b, _shape(b))

    return _apply("div", lambda a, b: (a / b, None), vjp, (a, b))


def square(a):
    return _apply("square", lambda a: (a * a, None), lambda g, _, a: (2.0 * g * a,), (a,))


def _sigmoid(x):
    # exp overflow saturates to 1/inf == 0, which is the correct limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x):
    def fwd(x):
        s = _sigmoid(x)
        return s, s

    return _apply("sigmoid", fwd, lambda g, s, x: (g * s * (1.0 - s),), (x,))


def silu(x):
    def fwd(x):
        s = _sigmoid(x)
        return x * s, s

    def vjp(g, s, x):
        return (g * (s + x * s * (1.0 - s)),)

    return _apply("silu", fwd, vjp, (x,))


# -- reductions and shape -----------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors np.sum
    def vjp(g, _, x, axis, keepdims):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply(
        "sum", lambda x, axis, keepdims: (np.sum(x, axis=axis, keepdims=keepdims), None),
        vjp, (x,), axis=axis, keepdims=keepdims,
    )


def mean(x, axis=None, keepdims=False):
    n = np.prod(_shape(x)) if axis is None else np.prod([_shape(x)[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape):
    return _apply(
        "reshape",
        lambda x, shape: (np.reshape(x, shape), None),
        lambda g, _, x, shape: (np.reshape(g, x.shape),),
        (x,), shape=tuple(shape),
    )


def transpose(x, axes):
    def vjp(g, _, x, axes):
        return (np.transpose(g, np.argsort(axes)),)

    return _apply("transpose", lambda x, axes: (np.transpose(x, axes), None), vjp, (x,), axes=tuple(axes))


def take_rows(table, ids):
    """Embedding lookup ``table[ids]`` with a scatter-add gradient."""

    def vjp(g, _, table, ids):
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g)
        return gt, None

    return _apply("take_rows", lambda t, ids: (t[ids], None), vjp, (table, np.asarray(ids)))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    def vjp(g, _, a, b):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("matmul", lambda a, b: (np.matmul(a, b), None), vjp, (a, b))


def _im2col(x, k):
    p = k // 2
    b, h, w, c = x.shape
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def conv2d(x, w):
    """'Same' convolution; ``x`` is (B, H, W, Cin), ``w`` is (k, k, Cin, Cout), k odd."""

    def fwd(x, w):
        k, _, cin, cout = w.shape
        if x.shape[-1] != cin:
            raise ShapeMismatch(f"conv input channels {x.shape[-1]} != {cin}")
        b, h, wd, _ = x.shape
        if k == 1:
            return x @ w[0, 0], None
        cols = _im2col(x, k)
        out = (cols @ w.reshape(k * k * cin, cout)).reshape(b, h, wd, cout)
        return out, cols

    def vjp(g, cols, x, w):
        k, _, cin, cout = w.shape
        b, h, wd, _ = x.shape
        if k == 1:
            gx = g @ w[0, 0].T
            gw = (x.reshape(-1, cin).T @ g.reshape(-1, cout)).reshape(w.shape)
            return gx, gw
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ w.reshape(k * k * cin, cout).T).reshape(b, h, wd, k, k, cin)
        p = k // 2
        gpad = np.zeros((b, h + 2 * p, wd + 2 * p, cin), dtype=g.dtype)
        for ky in range(k):
            for kx in range(k):
                gpad[:, ky:ky + h, kx:kx + wd, :] += gcols[:, :, :, ky, kx, :]
        return gpad[:, p:p + h, p:p + wd, :], gw

    return _apply("conv2d", fwd, vjp, (x, w))


# -- normalisation and attention ----------------------------------------------

def layernorm(x, eps=1e-5):
    """Normalise over the last axis (no affine part)."""

    def fwd(x, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return xhat, (xhat, inv)

    def vjp(g, ctx, x, eps):
        xhat, inv = ctx
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _apply("layernorm", fwd, vjp, (x,), eps=eps)


def masked_softmax(logits, mask=None):
    """Softmax over the last axis after adding an additive {0, -inf} mask."""

    def fwd(x, mask):
        p = _masked_softmax_kernel(x, mask)
        return p, p

    def vjp(g, p, x, mask):
        return p * (g - (g * p).sum(axis=-1, keepdims=True)), None

    return _apply("masked_softmax", fwd, vjp, (logits, mask))


def astype(x, dtype):
    return _apply(
        "astype",
        lambda x, dtype: (x.astype(dtype), None),
        lambda g, _, x, dtype: (g.astype(x.dtype),),
        (x,), dtype=np.dtype(dtype),
    )
