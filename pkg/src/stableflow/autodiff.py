"""Reverse-mode automatic differentiation on a flat tape of numpy values.

Every primitive below is a dispatching function: called on plain numpy
arrays it just computes the forward value, called with at least one
:class:`Node` argument it also records the operation on that node's tape.
Model code is therefore written once and runs identically (bit for bit) in
plain evaluation and under differentiation.

Conventions:
  - values are float64 numpy arrays (scalars are 0-d arrays),
  - a vjp is a closure mapping the output adjoint to one parent's adjoint
    contribution,
  - the tape is append-only, so node order is already topological.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalFailureError, ValidationError

__all__ = [
    "Tape", "Node", "backward", "grad_check",
    "add", "sub", "neg", "mul", "matmul", "tanh", "relu", "softplus", "exp",
    "reduce_sum", "softmax", "conv2d", "maxpool2", "concat", "reshape",
    "transpose", "slice_cols", "slice_vec", "gather_rows", "sigmoid_np",
    "softplus_inv",
]


class Tape:
    """Append-only record of one forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _register(self, node: "Node") -> int:
        node.id = len(self.nodes)
        self.nodes.append(node)
        return node.id

    def leaf(self, value) -> "Node":
        """Create a differentiable input node."""
        return Node(self, np.asarray(value, dtype=float), "leaf", (), ())

    def leaves(self):
        return [n for n in self.nodes if n.op == "leaf"]


class Node:
    """One recorded operation: forward value plus vjp closures per parent."""

    # Force numpy to defer binary ops to this class instead of broadcasting
    # element-wise over it.
    __array_ufunc__ = None

    __slots__ = ("tape", "value", "op", "parents", "vjps", "adjoint", "id")

    def __init__(self, tape, value, op, parents, vjps):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.adjoint = None
        tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, id={self.id})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("cannot mix nodes from different tapes")
    return tape


def _record(tape, value, op, args, vjps):
    """Create a node keeping only Node args as parents (constants are baked
    into the vjp closures)."""
    parents, kept = [], []
    for a, v in zip(args, vjps):
        if isinstance(a, Node):
            parents.append(a)
            kept.append(v)
    return Node(tape, value, op, tuple(parents), tuple(kept))


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(tape, out, "add", (a, b), (
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    ))


def neg(a):
    av = _val(a)
    out = -av
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, "neg", (a,), (lambda g: -g,))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(tape, out, "sub", (a, b), (
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape),
    ))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(tape, out, "mul", (a, b), (
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    ))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ContractError(f"matmul expects 2-d operands, got {av.shape} @ {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(tape, out, "matmul", (a, b), (
        lambda g: g @ bv.T,
        lambda g: av.T @ g,
    ))


# ---------------------------------------------------------------------------
# nonlinearities

def tanh(a):
    out = np.tanh(_val(a))
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, "tanh", (a,), (lambda g: g * (1.0 - out * out),))


def relu(a):
    av = _val(a)
    out = np.maximum(av, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, "relu", (a,), (lambda g: g * (av > 0.0),))


def sigmoid_np(x):
    """Numerically stable logistic function (plain numpy helper)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    av = _val(a)
    out = np.logaddexp(0.0, av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, "softplus", (a,), (lambda g: g * sigmoid_np(av),))


def softplus_inv(y: float) -> float:
    """Inverse of softplus on scalars; y must be positive."""
    if y <= 0:
        raise ValidationError("softplus_inv requires a positive argument")
    if y > 30:
        return float(y)
    return float(math.log(math.expm1(y)))


def exp(a):
    out = np.exp(_val(a))
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, "exp", (a,), (lambda g: g * out,))


# ---------------------------------------------------------------------------
# reductions and shape plumbing

def reduce_sum(a, axis=None, keepdims=False):
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _record(tape, out, "sum", (a,), (vjp,))


def softmax(a):
    """Softmax over the last axis, computed via log-sum-exp."""
    av = _val(a)
    m = av.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(av - m).sum(axis=-1, keepdims=True))
    out = np.exp(av - lse)
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _record(tape, out, "softmax-logsumexp", (a,), (vjp,))


def concat(parts: Sequence, axis: int):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[k], offsets[k + 1])
            return g[tuple(idx)]
        return vjp

    return _record(tape, out, "concat", tuple(parts),
                   tuple(make_vjp(k) for k in range(len(parts))))


def reshape(a, shape):
    av = _val(a)
    out = av.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, "reshape", (a,), (lambda g: g.reshape(av.shape),))


def transpose(a):
    av = _val(a)
    if av.ndim != 2:
        raise ContractError("transpose expects a 2-d operand")
    out = av.T
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, "transpose", (a,), (lambda g: g.T,))


def slice_cols(a, start, stop):
    av = _val(a)
    out = av[:, start:stop]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(av)
        full[:, start:stop] = g
        return full

    return _record(tape, out, "slice", (a,), (vjp,))


def slice_vec(a, start, stop):
    av = _val(a)
    if av.ndim != 1:
        raise ContractError("slice_vec expects a 1-d operand")
    out = av[start:stop]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(av)
        full[start:stop] = g
        return full

    return _record(tape, out, "slice", (a,), (vjp,))


def gather_rows(a, indices):
    """Select rows by index (duplicates allowed); adjoints scatter-add back."""
    av = _val(a)
    indices = np.asarray(indices, dtype=int)
    out = av[indices]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, indices, g)
        return full

    return _record(tape, out, "gather", (a,), (vjp,))


# ---------------------------------------------------------------------------
# convolution stack (valid padding, square kernels)

def _im2col(x, kh, kw):
    """(B,C,H,W) -> (B, C*kh*kw, H2*W2) patch matrix, H2=H-kh+1.

    The patch axis keeps the (channel, dy, dx) order used by
    ``kernel.reshape(out_channels, -1)``, and the layout is chosen so no
    transposes are needed anywhere in the conv forward/backward path.
    """
    b, c, h, w = x.shape
    h2, w2 = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, h2, w2), (s0, s1, s2, s3, s2, s3))
    return view.reshape(b, c * kh * kw, h2 * w2)


def conv2d(x, w, b):
    """Valid 2-d correlation: x (B,C,H,W), w (O,C,kh,kw), b (O,) -> (B,O,H2,W2)."""
    xv, wv, bv = _val(x), _val(w), _val(b)
    bs, c, h, ww = xv.shape
    oc, c2, kh, kw = wv.shape
    if c != c2:
        raise ContractError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    h2, w2 = h - kh + 1, ww - kw + 1
    cols = _im2col(xv, kh, kw)                       # (B, C*kh*kw, P)
    wmat = wv.reshape(oc, -1)                        # (O, C*kh*kw)
    out = (wmat @ cols + bv[:, None]).reshape(bs, oc, h2, w2)
    tape = _tape_of(x, w, b)
    if tape is None:
        return out

    def vjp_x(g):
        # Gradient w.r.t. the input is a full correlation of the padded
        # output gradient with spatially flipped, channel-swapped kernels.
        gp = np.zeros((bs, oc, h2 + 2 * (kh - 1), w2 + 2 * (kw - 1)))
        gp[:, :, kh - 1:kh - 1 + h2, kw - 1:kw - 1 + w2] = g.reshape(bs, oc, h2, w2)
        gcols = _im2col(gp, kh, kw)                          # (B, O*kh*kw, H*W)
        wflip = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)   # (C, O, kh, kw)
        return (wflip.reshape(c, -1) @ gcols).reshape(bs, c, h, ww)

    def vjp_w(g):
        gmat = g.reshape(bs, oc, h2 * w2)                    # (B, O, P)
        dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
        return dw.reshape(wv.shape)

    def vjp_b(g):
        return g.sum(axis=(0, 2, 3))

    return _record(tape, out, "conv2d", (x, w, b), (vjp_x, vjp_w, vjp_b))


def maxpool2(x):
    """2x2 max pooling with stride 2; spatial dims must be even.

    Ties route their gradient to the first maximal element of the window.
    """
    xv = _val(x)
    b, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ContractError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = xv.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h2, w2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        return dwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            b, c, h, w)

    return _record(tape, out, "maxpool", (x,), (vjp,))


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle

def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Populate adjoints from a scalar loss; returns {leaf id: gradient}.

    Leaves not reachable from the loss get zero gradients.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ContractError("loss must be a node on the given tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")

    adj: list[np.ndarray | None] = [None] * len(tape.nodes)
    adj[loss.id] = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = adj[node.id]
        if g is None:
            continue
        node.adjoint = g
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if adj[parent.id] is None:
                adj[parent.id] = np.zeros_like(parent.value)
            adj[parent.id] += contrib
    grads = {}
    for leaf in tape.leaves():
        g = adj[leaf.id]
        if g is None:
            g = np.zeros_like(leaf.value)
        leaf.adjoint = g
        grads[leaf.id] = g
    return grads


def grad_check(f: Callable, point, h: float = 1e-5) -> float:
    """Compare the taped gradient of ``f`` against central differences.

    ``f`` maps a 1-d vector (array or node) to a scalar. Returns the max over
    coordinates of |autodiff - central| / max(1, |central|).
    """
    if not (h > 0):
        raise ValidationError("finite-difference step must be positive")
    point = np.asarray(point, dtype=float).ravel()

    tape = Tape()
    p = tape.leaf(point)
    out = f(p)
    if not isinstance(out, Node):
        raise ContractError("function under grad_check must use its input")
    if out.value.size != 1:
        raise ContractError("grad_check target must be scalar-valued")
    auto = backward(tape, out)[p.id]

    worst = 0.0
    for j in range(point.size):
        step = np.zeros_like(point)
        step[j] = h
        fp = float(np.asarray(f(point + step)))
        fm = float(np.asarray(f(point - step)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalFailureError(
                f"non-finite evaluation during finite differences (coord {j})")
        central = (fp - fm) / (2.0 * h)
        err = abs(float(auto[j]) - central) / max(1.0, abs(central))
        worst = max(worst, err)
    if not np.all(np.isfinite(auto)):
        raise NumericalFailureError("non-finite autodiff gradient")
    return worst
