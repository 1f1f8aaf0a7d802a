"""Reverse-mode autodiff over float64 numpy payloads.

A :class:`Graph` records every operation as an append-only tape of
:class:`Value` nodes; ``backward`` replays the tape in reverse insertion
order, accumulating vector-Jacobian products into the leaves. Everything
runs in double precision and every op output is checked for NaN/Inf.

The op set is the minimal closure needed by the registration pipeline:
elementwise arithmetic, exp/log/sqrt/abs, (leaky) relu, sigmoid/softplus,
clamp, matmul/transpose/reshape/concat, row gather and neighbor-pair
gather, sum/mean/max reductions, softmax, layer norm, an l2 norm, and an
SVD-based orthogonal Procrustes solve with a hand-derived backward.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np


class NumericsError(Exception):
    """Base class for substrate failures."""


class DimensionError(NumericsError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(NumericsError):
    """An op produced NaN or Inf, which the substrate forbids."""


class ContractError(NumericsError):
    """An op precondition was violated (e.g. non-scalar loss)."""


class DegenerateGeometryError(NumericsError):
    """Cross-covariance is rank deficient; rotation is not determined."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    # fast path: a single reduction; a non-finite entry always poisons the
    # sum, and an overflowing-but-finite sum is re-checked elementwise
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """One node of the tape: a float64 array plus its provenance.

    Holds only a weak reference to its Graph so that dropping the Graph
    frees the whole tape by reference counting (no GC cycles).
    """

    __slots__ = ("_graph", "idx", "data", "parents", "_vjp", "trainable", "name", "grad")

    def __init__(self, graph, idx, data, parents, vjp, trainable=False, name=None):
        self._graph = weakref.ref(graph)
        self.idx = idx
        self.data = data
        self.parents = parents
        self._vjp = vjp
        self.trainable = trainable
        self.name = name
        self.grad = None

    @property
    def graph(self) -> "Graph":
        g = self._graph()
        if g is None:
            raise ContractError("the graph owning this value has been released")
        return g

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, contribution: np.ndarray) -> None:
        """Accumulate a contribution that may alias upstream arrays."""
        if self.grad is None:
            self.grad = np.array(contribution, dtype=np.float64)
        else:
            self.grad += contribution

    def _acc_owned(self, contribution: np.ndarray) -> None:
        """Accumulate a freshly allocated contribution without copying."""
        if self.grad is None:
            self.grad = contribution
        else:
            self.grad += contribution

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.data.shape}{tag})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.graph.constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.graph.constant(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __abs__(self):
        return absolute(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self, slope=0.1):
        return leaky_relu(self, slope)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def sum(self, axis=None, keepdims=False):
        return sum_reduce(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_reduce(self, axis, keepdims)

    def max(self, axis):
        return max_reduce(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


class Graph:
    """Append-only tape. Parent indices always precede their children."""

    def __init__(self):
        self.nodes: list[Value] = []
        self._params: dict[str, Value] = {}

    def _add(self, data, parents=(), vjp=None, trainable=False, name=None, op="leaf"):
        data = _as_f64(data)
        _check_finite(data, op)
        node = Value(self, len(self.nodes), data, tuple(parents), vjp, trainable, name)
        self.nodes.append(node)
        return node

    def leaf(self, data, name=None, trainable=False):
        return self._add(data, name=name, trainable=trainable)

    def constant(self, data):
        if isinstance(data, Value):
            if data.graph is not self:
                raise ContractError("value belongs to a different graph")
            return data
        return self._add(data)

    def param(self, name: str, data) -> Value:
        """Named trainable leaf; repeated requests return the same node."""
        node = self._params.get(name)
        if node is None:
            node = self._add(data, trainable=True, name=name, op="param")
            self._params[name] = node
        return node

    def backward(self, loss: Value) -> dict[str, np.ndarray]:
        """Reverse sweep from ``loss``; returns gradients per named parameter.

        Parameters never touched by the loss get zero gradients.
        """
        if loss.graph is not self:
            raise ContractError("loss belongs to a different graph")
        if loss.data.size != 1:
            raise ContractError("backward requires a scalar loss")
        upto = self.nodes[: loss.idx + 1]
        for node in upto:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(upto):
            if node.grad is not None and node._vjp is not None:
                node._vjp(node.grad)
        grads = {}
        for name, node in self._params.items():
            grads[name] = node.grad if node.grad is not None else np.zeros_like(node.data)
        return grads


def _coerce(a, b):
    if isinstance(a, Value):
        return a, a.graph.constant(b)
    if isinstance(b, Value):
        return b.graph.constant(a), b
    raise ContractError("at least one operand must be a Value")


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a, b = _coerce(a, b)
    out = a.graph._add(a.data + b.data, (a, b), None, op="add")

    def vjp(g):
        a._acc(_unbroadcast(g, a.data.shape))
        b._acc(_unbroadcast(g, b.data.shape))

    out._vjp = vjp
    return out


def sub(a, b):
    a, b = _coerce(a, b)
    out = a.graph._add(a.data - b.data, (a, b), None, op="sub")

    def vjp(g):
        a._acc(_unbroadcast(g, a.data.shape))
        b._acc_owned(_unbroadcast(-g, b.data.shape))

    out._vjp = vjp
    return out


def mul(a, b):
    a, b = _coerce(a, b)
    out = a.graph._add(a.data * b.data, (a, b), None, op="mul")

    def vjp(g):
        a._acc_owned(_unbroadcast(g * b.data, a.data.shape))
        b._acc_owned(_unbroadcast(g * a.data, b.data.shape))

    out._vjp = vjp
    return out


def div(a, b):
    a, b = _coerce(a, b)
    out = a.graph._add(a.data / b.data, (a, b), None, op="div")
    out_data = out.data

    def vjp(g):
        a._acc_owned(_unbroadcast(g / b.data, a.data.shape))
        b._acc_owned(_unbroadcast(-g * out_data / b.data, b.data.shape))

    out._vjp = vjp
    return out


def neg(a):
    out = a.graph._add(-a.data, (a,), None, op="neg")
    out._vjp = lambda g: a._acc_owned(-g)
    return out


def exp(a):
    out = a.graph._add(np.exp(a.data), (a,), None, op="exp")
    out_data = out.data
    out._vjp = lambda g: a._acc_owned(g * out_data)
    return out


def log(a):
    out = a.graph._add(np.log(a.data), (a,), None, op="log")
    out._vjp = lambda g: a._acc_owned(g / a.data)
    return out


def sqrt(a):
    out = a.graph._add(np.sqrt(a.data), (a,), None, op="sqrt")
    out_data = out.data
    out._vjp = lambda g: a._acc_owned(g * 0.5 / out_data)
    return out


def absolute(a):
    out = a.graph._add(np.abs(a.data), (a,), None, op="abs")
    out._vjp = lambda g: a._acc_owned(g * np.sign(a.data))
    return out


def pow_const(a, p: float):
    if isinstance(p, Value):
        raise ContractError("exponent must be a python scalar")
    out = a.graph._add(a.data**p, (a,), None, op="pow")
    out._vjp = lambda g: a._acc_owned(g * p * a.data ** (p - 1))
    return out


def relu(a):
    out = a.graph._add(np.maximum(a.data, 0.0), (a,), None, op="relu")
    out._vjp = lambda g: a._acc_owned(g * (a.data > 0))
    return out


def leaky_relu(a, slope: float = 0.1):
    out = a.graph._add(np.where(a.data > 0, a.data, slope * a.data), (a,), None, op="leaky_relu")
    out._vjp = lambda g: a._acc_owned(g * np.where(a.data > 0, 1.0, slope))
    return out


def sigmoid(a):
    # stable two-sided form
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = a.graph._add(s, (a,), None, op="sigmoid")
    out_data = out.data
    out._vjp = lambda g: a._acc_owned(g * out_data * (1.0 - out_data))
    return out


def softplus(a):
    x = a.data
    out = a.graph._add(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), (a,), None, op="softplus")

    def vjp(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        a._acc_owned(g * s)

    out._vjp = vjp
    return out


def clamp(a, lo: float, hi: float):
    out = a.graph._add(np.clip(a.data, lo, hi), (a,), None, op="clamp")
    out._vjp = lambda g: a._acc_owned(g * ((a.data >= lo) & (a.data <= hi)))
    return out


# -- linear algebra / structure ------------------------------------------


def matmul(a, b):
    a, b = _coerce(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = a.graph._add(a.data @ b.data, (a, b), None, op="matmul")

    def vjp(g):
        a._acc_owned(g @ b.data.T)
        b._acc_owned(a.data.T @ g)

    out._vjp = vjp
    return out


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-D operand")
    out = a.graph._add(a.data.T.copy(), (a,), None, op="transpose")
    out._vjp = lambda g: a._acc(g.T)
    return out


def bmm(a, b, transpose_b: bool = False):
    """Batched matmul over stacked 2-D operands: (h,m,k) @ (h,k,n)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError("bmm expects 3-D operands")
    bd = b.data.transpose(0, 2, 1) if transpose_b else b.data
    if a.data.shape[2] != bd.shape[1] or a.data.shape[0] != bd.shape[0]:
        raise DimensionError(f"bmm shapes disagree: {a.data.shape} @ {b.data.shape}")
    out = a.graph._add(np.matmul(a.data, bd), (a, b), None, op="bmm")

    def vjp(g):
        if transpose_b:
            a._acc_owned(np.matmul(g, b.data))
            b._acc_owned(np.matmul(g.transpose(0, 2, 1), a.data))
        else:
            a._acc_owned(np.matmul(g, b.data.transpose(0, 2, 1)))
            b._acc_owned(np.matmul(a.data.transpose(0, 2, 1), g))

    out._vjp = vjp
    return out


def split_heads(a, heads: int):
    """(m, h*dk) -> (h, m, dk), where head i owns column block i."""
    m, d = a.data.shape
    if d % heads != 0:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    dk = d // heads
    out = a.graph._add(a.data.reshape(m, heads, dk).transpose(1, 0, 2).copy(), (a,), None, op="split_heads")
    out._vjp = lambda g: a._acc_owned(g.transpose(1, 0, 2).reshape(m, d).copy())
    return out


def merge_heads(a):
    """(h, m, dk) -> (m, h*dk); inverse of :func:`split_heads`."""
    h, m, dk = a.data.shape
    out = a.graph._add(a.data.transpose(1, 0, 2).reshape(m, h * dk).copy(), (a,), None, op="merge_heads")
    out._vjp = lambda g: a._acc_owned(g.reshape(m, h, dk).transpose(1, 0, 2).copy())
    return out


def reshape(a, shape):
    out = a.graph._add(a.data.reshape(shape).copy(), (a,), None, op="reshape")
    out._vjp = lambda g: a._acc(g.reshape(a.data.shape))
    return out


def concat(values, axis: int = 0):
    values = list(values)
    if not values:
        raise ContractError("concat of nothing")
    g0 = values[0].graph
    values = [g0.constant(v) for v in values]
    out = g0._add(np.concatenate([v.data for v in values], axis=axis), tuple(values), None, op="concat")
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            v._acc(g[tuple(sl)])

    out._vjp = vjp
    return out


def gather_rows(a, idx):
    """out = a[idx] along axis 0; idx may be any integer array."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError("gather index out of range")
    out = a.graph._add(a.data[idx], (a,), None, op="gather")

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._acc_owned(buf)

    out._vjp = vjp
    return out


def neighbor_pairs(feat, center_idx, nbr_idx, diff: bool = True):
    """Edge tensor for graph convolutions, as a single tape node.

    Returns shape (m, k, 2w): rows ``concat(f[center_i], f[nbr_ij] - f[center_i])``
    when ``diff`` is set, else ``concat(f[center_i], f[nbr_ij])``.
    """
    center_idx = np.asarray(center_idx)
    nbr_idx = np.asarray(nbr_idx)
    f = feat.data
    m, k = nbr_idx.shape
    ctr = f[center_idx]  # (m, w)
    nbr = f[nbr_idx]  # (m, k, w)
    second = nbr - ctr[:, None, :] if diff else nbr
    out_data = np.concatenate([np.broadcast_to(ctr[:, None, :], (m, k, f.shape[1])), second], axis=2)
    out = feat.graph._add(out_data, (feat,), None, op="neighbor_pairs")

    def vjp(g):
        w = f.shape[1]
        g1 = g[:, :, :w]
        g2 = g[:, :, w:]
        buf = np.zeros_like(f)
        np.add.at(buf, nbr_idx, g2)
        ctr_grad = g1.sum(axis=1)
        if diff:
            ctr_grad = ctr_grad - g2.sum(axis=1)
        np.add.at(buf, center_idx, ctr_grad)
        feat._acc_owned(buf)

    out._vjp = vjp
    return out


def sum_reduce(a, axis=None, keepdims=False):
    out = a.graph._add(a.data.sum(axis=axis, keepdims=keepdims), (a,), None, op="sum")

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc_owned(np.broadcast_to(g, a.data.shape).copy())

    out._vjp = vjp
    return out


def mean_reduce(a, axis=None, keepdims=False):
    out = a.graph._add(a.data.mean(axis=axis, keepdims=keepdims), (a,), None, op="mean")
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc_owned(np.broadcast_to(g, a.data.shape) / count)

    out._vjp = vjp
    return out


def max_reduce(a, axis: int):
    """Max along ``axis``; the gradient routes to the first argmax."""
    out_data = a.data.max(axis=axis)
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = a.graph._add(out_data, (a,), None, op="max")

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, arg, np.expand_dims(g, axis), axis=axis)
        a._acc_owned(buf)

    out._vjp = vjp
    return out


def softmax(a, axis: int = -1):
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = a.graph._add(y, (a,), None, op="softmax")

    def vjp(g):
        a._acc_owned((g - (g * y).sum(axis=axis, keepdims=True)) * y)

    out._vjp = vjp
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    gain = x.graph.constant(gain)
    bias = x.graph.constant(bias)
    if gain.data.shape != (x.data.shape[-1],) or bias.data.shape != (x.data.shape[-1],):
        raise DimensionError("layer_norm gain/bias must match last-axis size")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = x.graph._add(xhat * gain.data + bias.data, (x, gain, bias), None, op="layer_norm")
    n = x.data.shape[-1]

    def vjp(g):
        dxhat = g * gain.data
        x._acc_owned(inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)))
        gain._acc_owned((g * xhat).reshape(-1, n).sum(axis=0))
        bias._acc_owned(g.reshape(-1, n).sum(axis=0))

    out._vjp = vjp
    return out


def row_normalize(a, n_real: int | None = None):
    """Divide the first ``n_real`` rows by their sums; later rows pass
    through untouched (used for slack rows that are never normalized
    along their own direction)."""
    m = a.data.shape[0]
    n_real = m if n_real is None else n_real
    s = a.data[:n_real].sum(axis=1, keepdims=True)
    out_data = a.data.copy()
    out_data[:n_real] /= s
    out = a.graph._add(out_data, (a,), None, op="row_normalize")
    top = out_data[:n_real]

    def vjp(g):
        buf = g.copy()
        gt = g[:n_real]
        buf[:n_real] = (gt - (gt * top).sum(axis=1, keepdims=True)) / s
        a._acc_owned(buf)

    out._vjp = vjp
    return out


def col_normalize(a, n_real: int | None = None):
    """Column counterpart of :func:`row_normalize`."""
    n = a.data.shape[1]
    n_real = n if n_real is None else n_real
    s = a.data[:, :n_real].sum(axis=0, keepdims=True)
    out_data = a.data.copy()
    out_data[:, :n_real] /= s
    out = a.graph._add(out_data, (a,), None, op="col_normalize")
    left = out_data[:, :n_real]

    def vjp(g):
        buf = g.copy()
        gl = g[:, :n_real]
        buf[:, :n_real] = (gl - (gl * left).sum(axis=0, keepdims=True)) / s
        a._acc_owned(buf)

    out._vjp = vjp
    return out


def sinkhorn_round(a, m_real: int, n_real: int):
    """One alternate-normalization round as a single tape node.

    Divides the first ``m_real`` rows by their sums, then the first
    ``n_real`` columns of the result by theirs; remaining (slack) entries
    ride along unnormalized. The backward chains the two steps' rules,
    reconstructing the intermediate from the output.
    """
    out_data = a.data.copy()
    r = out_data[:m_real].sum(axis=1, keepdims=True)
    out_data[:m_real] /= r
    c = out_data[:, :n_real].sum(axis=0, keepdims=True)
    out_data[:, :n_real] /= c
    out = a.graph._add(out_data, (a,), None, op="sinkhorn_round")

    def vjp(g):
        buf = g.copy()
        gl = g[:, :n_real]
        ol = out_data[:, :n_real]
        buf[:, :n_real] = (gl - (gl * ol).sum(axis=0, keepdims=True)) / c
        btop = out_data[:m_real].copy()
        btop[:, :n_real] *= c[0]
        sr = (buf[:m_real] * btop).sum(axis=1, keepdims=True)
        buf[:m_real] = (buf[:m_real] - sr) / r
        a._acc_owned(buf)

    out._vjp = vjp
    return out


def l2norm(a):
    """Euclidean norm of the flattened input; zero-safe backward."""
    nrm = float(np.sqrt((a.data**2).sum()))
    out = a.graph._add(nrm, (a,), None, op="l2norm")

    def vjp(g):
        if nrm > 0:
            a._acc_owned(g * a.data / nrm)

    out._vjp = vjp
    return out


def procrustes_rotation(h):
    """Optimal rotation from a 3x3 cross-covariance, det fixed to +1.

    Forward is the classic SVD solve ``R = V diag(1,1,det(VU^T)) U^T``; the
    backward propagates through the SVD treating the sign fix as constant.
    Raises :class:`DegenerateGeometryError` when the covariance has rank <= 1,
    in which case no rotation is determined by the correspondences.
    """
    if h.data.shape != (3, 3):
        raise DimensionError("procrustes_rotation expects a 3x3 matrix")
    u_m, s, vh = np.linalg.svd(h.data)
    v = vh.T
    # only true geometric degeneracy raises: collinear correspondences give
    # s[1]/s[0] at float-noise level, while collapsed-but-generic soft
    # correspondences keep a healthy ratio at a tiny absolute scale
    if s[0] <= 1e-300 or s[1] <= 1e-12 * s[0]:
        raise DegenerateGeometryError("cross-covariance rank <= 1 (collinear geometry)")
    d = np.sign(np.linalg.det(v @ u_m.T))
    dmat = np.diag([1.0, 1.0, d])
    r = v @ dmat @ u_m.T
    out = h.graph._add(r, (h,), None, op="procrustes_rotation")

    s2 = s**2
    num = s2[None, :] - s2[:, None]
    f = num / (num**2 + 1e-16)
    np.fill_diagonal(f, 0.0)
    smat = np.diag(s)

    def vjp(g):
        du = g.T @ v @ dmat
        dv = g @ u_m @ dmat
        term_u = f * (u_m.T @ du - du.T @ u_m)
        term_v = f * (v.T @ dv - dv.T @ v)
        h._acc_owned(u_m @ (term_u @ smat + smat @ term_v) @ v.T)

    out._vjp = vjp
    return out


# -- parameters -----------------------------------------------------------


class ParamStore:
    """Named float64 arrays with deterministic fan-based initialization."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, data) -> None:
        self._arrays[name] = _as_f64(data)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self._arrays.items() if k.startswith(prefix)}

    def add_linear(self, name: str, fan_in: int, fan_out: int, rng, bias: bool = True):
        """Uniform +-sqrt(6/(fan_in+fan_out)) weight, zero bias."""
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self[name + ".w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if bias:
            self[name + ".b"] = np.zeros(fan_out)

    def add_layer_norm(self, name: str, width: int):
        self[name + ".gain"] = np.ones(width)
        self[name + ".bias"] = np.zeros(width)

    def n_values(self) -> int:
        return sum(v.size for v in self._arrays.values())


def apply_linear(g: Graph, store: ParamStore, name: str, x: Value) -> Value:
    w = g.param(name + ".w", store[name + ".w"])
    y = matmul(x, w)
    bname = name + ".b"
    if bname in store:
        y = add(y, g.param(bname, store[bname]))
    return y


def apply_mlp2(g: Graph, store: ParamStore, name: str, x: Value, slope: float = 0.1) -> Value:
    """Two-layer pointwise perceptron with a leaky-relu in between."""
    h = leaky_relu(apply_linear(g, store, name + ".l1", x), slope)
    return apply_linear(g, store, name + ".l2", h)


def add_mlp2(store: ParamStore, name: str, fan_in: int, hidden: int, fan_out: int, rng):
    store.add_linear(name + ".l1", fan_in, hidden, rng)
    store.add_linear(name + ".l2", hidden, fan_out, rng)


# -- gradient verification -------------------------------------------------


@dataclass
class GradientReport:
    """Max relative error between analytic and central-difference gradients."""

    eps: float
    errors: dict[str, float]

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    def __str__(self):
        return f"GradientReport(eps={self.eps:g}, max_rel_error={self.max_rel_error:.3e}, worst={self.worst!r})"


def _rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def grad_check(builder, params: dict[str, np.ndarray], eps: float = 1e-5) -> GradientReport:
    """Compare analytic gradients of ``builder`` against central differences.

    ``builder(graph, values)`` must deterministically map named parameter
    Values to a scalar loss Value.
    """
    params = {k: _as_f64(v).copy() for k, v in params.items()}

    def run(p):
        g = Graph()
        vals = {k: g.param(k, v) for k, v in p.items()}
        loss = builder(g, vals)
        if loss.data.size != 1:
            raise ContractError("grad_check builder must return a scalar")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("non-finite loss during gradient probing")
        return g, loss

    g, loss = run(params)
    analytic = g.backward(loss)

    errors = {}
    for name, base in params.items():
        err = 0.0
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            _, lp = run(params)
            flat[i] = orig - eps
            _, lm = run(params)
            flat[i] = orig
            fd = (float(lp.data) - float(lm.data)) / (2 * eps)
            err = max(err, _rel_err(float(analytic[name].reshape(-1)[i]), fd))
        errors[name] = err
    return GradientReport(eps=eps, errors=errors)
