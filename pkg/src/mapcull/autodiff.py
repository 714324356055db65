"""Minimal reverse-mode differentiation over numpy arrays.

Every op computes its value eagerly and, when the tape is recording, appends
a closure that pushes the output gradient back to its inputs. ``backward``
replays the closures in reverse order once; a consumed tape cannot be reused.

Forward ops that contract rows (``rowmm``, ``attend``, ``weighted_sum``,
``masked_softmax``) use an accumulation order that depends only on the row
itself, so scoring a subset of rows gives bit-identical results to scoring all
of them.
"""

from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value, tape: "Tape | None" = None, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self._ops = []
        self.consumed = False

    def param(self, value) -> Var:
        return Var(value, self, requires_grad=self.record)

    def const(self, value) -> Var:
        return Var(value, self, requires_grad=False)

    def _push(self, out: Var, inputs, fn):
        if self.record and any(v.requires_grad for v in inputs):
            out.requires_grad = True
            self._ops.append((out, fn))
        return out

    def __len__(self):
        return len(self._ops)


def _tape(*vs) -> Tape:
    for v in vs:
        if isinstance(v, Var) and v.tape is not None:
            return v.tape
    return Tape(record=False)


def _lift(x, tape) -> Var:
    return x if isinstance(x, Var) else Var(x, tape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Var) -> None:
    """Accumulate d(loss)/d(param) into every recorded parameter's ``grad``."""
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if not tape.record:
        raise TapeError("tape was not recording")
    if loss.value.size != 1:
        raise TapeError("backward needs a scalar loss")
    tape.consumed = True
    loss.grad = np.ones_like(loss.value)
    for out, fn in reversed(tape._ops):
        if out.grad is not None:
            fn(out.grad)
    tape._ops.clear()


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Var:
    t = _tape(a, b)
    a, b = _lift(a, t), _lift(b, t)
    out = Var(a.value + b.value, t)

    def fn(g):
        a._acc(_unbroadcast(g, a.shape))
        b._acc(_unbroadcast(g, b.shape))
    return t._push(out, (a, b), fn)


def sub(a, b) -> Var:
    t = _tape(a, b)
    a, b = _lift(a, t), _lift(b, t)
    out = Var(a.value - b.value, t)

    def fn(g):
        a._acc(_unbroadcast(g, a.shape))
        b._acc(_unbroadcast(-g, b.shape))
    return t._push(out, (a, b), fn)


def mul(a, b) -> Var:
    t = _tape(a, b)
    a, b = _lift(a, t), _lift(b, t)
    out = Var(a.value * b.value, t)

    def fn(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g * a.value, b.shape))
    return t._push(out, (a, b), fn)


def scale(x: Var, c: float) -> Var:
    t = _tape(x)
    out = Var(x.value * c, t)
    return t._push(out, (x,), lambda g: x._acc(g * c))


def leaky_relu(x: Var, slope: float) -> Var:
    t = _tape(x)
    pos = x.value > 0
    out = Var(np.where(pos, x.value, slope * x.value), t)
    # Subgradient at 0 is the negative-side slope.
    return t._push(out, (x,), lambda g: x._acc(np.where(pos, g, slope * g)))


def sigmoid(x: Var) -> Var:
    t = _tape(x)
    v = x.value
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Var(s, t)
    return t._push(out, (x,), lambda g: x._acc(g * s * (1.0 - s)))


def log(x: Var) -> Var:
    t = _tape(x)
    out = Var(np.log(x.value), t)
    return t._push(out, (x,), lambda g: x._acc(g / x.value))


def clip(x: Var, lo: float, hi: float) -> Var:
    t = _tape(x)
    inside = (x.value >= lo) & (x.value <= hi)
    out = Var(np.clip(x.value, lo, hi), t)
    return t._push(out, (x,), lambda g: x._acc(np.where(inside, g, 0.0)))


def absolute(x: Var) -> Var:
    t = _tape(x)
    out = Var(np.abs(x.value), t)
    # Subgradient of |.| at 0 is 0.
    return t._push(out, (x,), lambda g: x._acc(g * np.sign(x.value)))


def total(x: Var) -> Var:
    t = _tape(x)
    out = Var(np.sum(x.value), t)
    return t._push(out, (x,), lambda g: x._acc(np.broadcast_to(g, x.shape)))


def mean(x: Var) -> Var:
    n = max(x.value.size, 1)
    return scale(total(x), 1.0 / n)


def reshape(x: Var, shape) -> Var:
    t = _tape(x)
    out = Var(x.value.reshape(shape), t)
    return t._push(out, (x,), lambda g: x._acc(g.reshape(x.shape)))


# -- structured ----------------------------------------------------------------

def _rows_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # One identical small product per row: independent of how many rows there are.
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    return np.matmul(x[:, None, :], w)[:, 0, :]


def rowmm(x: Var, w: Var) -> Var:
    """x @ w with row-independent accumulation; x is (n, a), w is (a, b)."""
    t = _tape(x, w)
    out = Var(_rows_matmul(x.value, w.value), t)

    def fn(g):
        if x.requires_grad:
            x._acc(g @ w.value.T)
        if w.requires_grad:
            w._acc(x.value.T @ g)
    return t._push(out, (x, w), fn)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    y = rowmm(x, w)
    return y if b is None else add(y, b)


def take(x: Var, idx: np.ndarray) -> Var:
    """Gather rows: out[...] = x[idx[...]]."""
    t = _tape(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Var(x.value[idx], t)

    def fn(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        x._acc(gx)
    return t._push(out, (x,), fn)


def masked_softmax(e: Var, mask: np.ndarray) -> Var:
    """Softmax over axis 1 of (n, S, H) logits; masked-out slots get weight 0."""
    t = _tape(e)
    m = mask[:, :, None]
    v = np.where(m, e.value, -np.inf)
    vmax = v[:, 0]
    for s in range(1, v.shape[1]):
        vmax = np.maximum(vmax, v[:, s])
    ex = np.where(m, np.exp(v - vmax[:, None]), 0.0)
    den = ex[:, 0].copy()
    for s in range(1, ex.shape[1]):
        den += ex[:, s]
    a = ex / den[:, None]
    out = Var(a, t)

    def fn(g):
        dot = (g * a).sum(axis=1, keepdims=True)
        e._acc(a * (g - dot))
    return t._push(out, (e,), fn)


def attend(alpha: Var, feats: Var) -> Var:
    """out[n, h, :] = sum_s alpha[n, s, h] * feats[n, s, :]."""
    t = _tape(alpha, feats)
    a, f = alpha.value, feats.value
    acc = a[:, 0, :, None] * f[:, 0, None, :]
    for s in range(1, a.shape[1]):
        acc = acc + a[:, s, :, None] * f[:, s, None, :]
    out = Var(acc, t)

    def fn(g):
        if alpha.requires_grad:
            alpha._acc(np.matmul(f, np.swapaxes(g, 1, 2)))
        if feats.requires_grad:
            feats._acc(np.matmul(a, g))
    return t._push(out, (alpha, feats), fn)


def weighted_sum(c: np.ndarray, feats: Var) -> Var:
    """out[n, :] = sum_s c[n, s] * feats[n, s, :] for constant weights c."""
    t = _tape(feats)
    f = feats.value
    acc = c[:, 0, None] * f[:, 0]
    for s in range(1, f.shape[1]):
        acc = acc + c[:, s, None] * f[:, s]
    out = Var(acc, t)
    return t._push(out, (feats,), lambda g: feats._acc(c[:, :, None] * g[:, None, :]))


def head_project(w: Var, a: Var, out_dim: int) -> Var:
    """u[:, h] = W_h a_h, where W_h = w[:, h*out_dim:(h+1)*out_dim]; w is (F, H*out_dim), a is (H, out_dim)."""
    t = _tape(w, a)
    n_in = w.shape[0]
    heads = a.shape[0]
    w3 = w.value.reshape(n_in, heads, out_dim)
    u = np.stack([w3[:, h, :] @ a.value[h] for h in range(heads)], axis=1)
    out = Var(u, t)

    def fn(g):
        if w.requires_grad:
            gw = g[:, :, None] * a.value[None, :, :]
            w._acc(gw.reshape(w.shape))
        if a.requires_grad:
            a._acc(np.stack([w3[:, h, :].T @ g[:, h] for h in range(heads)], axis=0))
    return t._push(out, (w, a), fn)


def restack_heads(w: Var, heads: int) -> Var:
    """(F, H*O) -> (H*F, O): row block h is W_h^T."""
    t = _tape(w)
    n_in, cols = w.shape
    o = cols // heads
    v = np.ascontiguousarray(w.value.reshape(n_in, heads, o).transpose(1, 0, 2).reshape(heads * n_in, o))
    out = Var(v, t)

    def fn(g):
        w._acc(g.reshape(heads, n_in, o).transpose(1, 0, 2).reshape(n_in, cols))
    return t._push(out, (w,), fn)
