"""Dense float64 matrices with tape-based reverse-mode differentiation.

Every value is a 2-D array. Ops run eagerly; inside ``with Tape() as tape``
they also append a node to the tape, and ``tape.backward(loss)`` walks the
nodes in reverse order, so each node is visited exactly once after all of its
consumers. No broadcasting except :func:`add_bias`.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import NonScalarLoss, ShapeMismatch

_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Var:
    __slots__ = ("value", "_grad", "parents", "backward_fn", "name")

    def __init__(self, value, name: str = ""):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeMismatch("Var", "2-D", arr.shape)
        self.value = arr
        self._grad: np.ndarray | None = None
        self.parents: tuple[Var, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64)
        else:
            self._grad += g

    def item(self) -> float:
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Var({self.name or 'unnamed'}, shape={self.shape})"


class Tape:
    """Records op nodes in execution order; single-threaded by design."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def backward(self, loss: Var) -> None:
        if loss.shape != (1, 1):
            raise NonScalarLoss(f"loss has shape {loss.shape}")
        for node in self.nodes:
            node._grad = None
        loss._grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node._grad is None:
                continue
            grads = node.backward_fn(node._grad)
            for parent, g in zip(node.parents, grads):
                if g is not None:
                    parent._accumulate(g)


def backward(loss: Var, tape: Tape) -> None:
    tape.backward(loss)


def _node(value: np.ndarray, parents: tuple[Var, ...], backward_fn) -> Var:
    out = Var.__new__(Var)
    out.value = value
    out._grad = None
    out.parents = parents
    out.backward_fn = backward_fn
    out.name = ""
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(out)
    return out


def _same_shape(op: str, a: Var, b: Var) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(op, a.shape, b.shape)


def matmul(a: Var, b: Var) -> Var:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Var, b: Var) -> Var:
    _same_shape("add", a, b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def add_bias(a: Var, bias: Var) -> Var:
    """Add a 1 x n row vector to every row of ``a``."""
    if bias.shape != (1, a.shape[1]):
        raise ShapeMismatch("add_bias", (1, a.shape[1]), bias.shape)
    return _node(a.value + bias.value, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def hadamard(a: Var, b: Var) -> Var:
    _same_shape("hadamard", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    s = _sigmoid(a.value)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def transpose(a: Var) -> Var:
    return _node(a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_rows(a: Var, b: Var) -> Var:
    """Stack ``a`` on top of ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch("concat_rows", a.shape, b.shape)
    n = a.shape[0]
    return _node(np.vstack([a.value, b.value]), (a, b), lambda g: (g[:n], g[n:]))


def select_row(a: Var, i: int) -> Var:
    rows = a.shape[0]
    if not -rows <= i < rows:
        raise ShapeMismatch("select_row", f"row index < {rows}", i)

    def back(g):
        full = np.zeros_like(a.value)
        full[i] = g[0]
        return (full,)

    return _node(a.value[i:i + 1].copy(), (a,), back)


def softmax_rows(a: Var) -> Var:
    p = _softmax(a.value)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (a,), back)


def mse_loss(pred: Var, target: Var) -> Var:
    """Mean of squared differences over all entries; ``target`` gets no gradient."""
    _same_shape("mse_loss", pred, target)
    diff = pred.value - target.value
    n = diff.size
    return _node(np.array([[np.mean(diff * diff)]]), (pred,),
                 lambda g: (g[0, 0] * 2.0 * diff / n,))


def softmax_cross_entropy(scores: Var, true_index: int) -> Var:
    """``-log softmax(scores)[true_index]`` for a 1 x n score row."""
    if scores.shape[0] != 1:
        raise ShapeMismatch("softmax_cross_entropy", "1 x n", scores.shape)
    n = scores.shape[1]
    if not 0 <= true_index < n:
        raise ShapeMismatch("softmax_cross_entropy", f"index < {n}", true_index)
    z = scores.value - scores.value.max()
    logsum = np.log(np.exp(z).sum())
    loss = logsum - z[0, true_index]
    p = np.exp(z - logsum)

    def back(g):
        d = p.copy()
        d[0, true_index] -= 1.0
        return (g[0, 0] * d,)

    return _node(np.array([[loss]]), (scores,), back)


def lstm(x: Var, w_in: Var, w_rec: Var, bias: Var, reverse: bool = False) -> Var:
    """Whole-sequence LSTM with zero initial state.

    ``x`` is T x d; ``w_in`` d x 4h, ``w_rec`` h x 4h and ``bias`` 1 x 4h hold
    the input, forget, output and candidate gates in that column order.
    Row t of the result is the hidden state after consuming row t, whichever
    direction the sweep runs.
    """
    hdim = w_rec.shape[0]
    if w_in.shape != (x.shape[1], 4 * hdim) or w_rec.shape != (hdim, 4 * hdim) \
            or bias.shape != (1, 4 * hdim):
        raise ShapeMismatch("lstm", (x.shape[1], 4 * hdim), (w_in.shape, w_rec.shape, bias.shape))
    pre = x.value @ w_in.value + bias.value
    if reverse:
        pre = pre[::-1].copy()
    hs, cs, gates = _lstm_forward(pre, w_rec.value)
    out = hs[1:]
    xv, wi, wr = x.value, w_in.value, w_rec.value

    def back(g):
        if reverse:
            g = g[::-1]
        d_pre, d_wr = _lstm_backward(np.ascontiguousarray(g), hs, cs, gates, wr)
        if reverse:
            d_pre = np.ascontiguousarray(d_pre[::-1])
        return (d_pre @ wi.T, xv.T @ d_pre, d_wr, d_pre.sum(axis=0, keepdims=True))

    value = out[::-1].copy() if reverse else out.copy()
    return _node(value, (x, w_in, w_rec, bias), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


@njit(cache=True)
def _lstm_forward(pre, w_rec):
    steps = pre.shape[0]
    h = w_rec.shape[0]
    hs = np.zeros((steps + 1, h))
    cs = np.zeros((steps + 1, h))
    gates = np.zeros((steps, 4 * h))
    for t in range(steps):
        z = gates[t]
        z[:] = pre[t]
        for k in range(h):
            hk = hs[t, k]
            for j in range(4 * h):
                z[j] += hk * w_rec[k, j]
        for j in range(3 * h):
            z[j] = 1.0 / (1.0 + np.exp(-z[j]))
        for j in range(3 * h, 4 * h):
            z[j] = np.tanh(z[j])
        for j in range(h):
            c = z[h + j] * cs[t, j] + z[j] * z[3 * h + j]
            cs[t + 1, j] = c
            hs[t + 1, j] = z[2 * h + j] * np.tanh(c)
    return hs, cs, gates


@njit(cache=True)
def _lstm_backward(d_out, hs, cs, gates, w_rec):
    steps = d_out.shape[0]
    h = w_rec.shape[0]
    d_pre = np.zeros((steps, 4 * h))
    dh_next = np.zeros(h)
    dc_next = np.zeros(h)
    for t in range(steps - 1, -1, -1):
        for j in range(h):
            i_g = gates[t, j]
            f_g = gates[t, h + j]
            o_g = gates[t, 2 * h + j]
            c_g = gates[t, 3 * h + j]
            tc = np.tanh(cs[t + 1, j])
            dh = d_out[t, j] + dh_next[j]
            dc = dh * o_g * (1.0 - tc * tc) + dc_next[j]
            d_pre[t, j] = dc * c_g * i_g * (1.0 - i_g)
            d_pre[t, h + j] = dc * cs[t, j] * f_g * (1.0 - f_g)
            d_pre[t, 2 * h + j] = dh * tc * o_g * (1.0 - o_g)
            d_pre[t, 3 * h + j] = dc * i_g * (1.0 - c_g * c_g)
            dc_next[j] = dc * f_g
        # dh_next = d_pre[t] @ w_rec.T
        for k in range(h):
            acc = 0.0
            for j in range(4 * h):
                acc += d_pre[t, j] * w_rec[k, j]
            dh_next[k] = acc
    d_wr = hs[:steps].T @ d_pre
    return d_pre, d_wr


def grad_check(f: Callable[[], Var], params: Sequence[Var], eps: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values each call.
    """
    with Tape() as tape:
        loss = f()
    for p in params:
        p.zero_grad()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = f().item()
            flat[idx] = orig - eps
            down = f().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = gflat[idx]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
