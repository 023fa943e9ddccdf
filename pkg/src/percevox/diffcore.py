"""Reverse-mode automatic differentiation over dense numpy arrays.

Single-threaded, deterministic: the same inputs always produce bitwise
identical forward values and gradients. Every operation validates its
output for non-finite values and raises :class:`NonFiniteError` instead
of letting NaN/inf propagate silently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr, op_name):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op_name}'")


def _unbroadcast(grad, shape):
    # reduce a gradient back to the shape it was broadcast from
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array node in a reverse-mode computation graph."""

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return stop_gradient(self)

    def backward(self):
        """Propagate gradients from this scalar to every reachable tensor.

        Gradients sum over all paths and accumulate across repeated calls
        until :meth:`zero_grad` is used.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.astype(node.data.dtype, copy=True)
            else:
                node.grad = node.grad + g.astype(node.data.dtype, copy=False)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return subtract(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return multiply(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.dtype))


class Parameter(Tensor):
    """A named trainable tensor. Names must be unique within one model."""

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return list(reversed(order))


def _make(data, parents, backward, op_name):
    _check_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def check_unique_names(params):
    seen = set()
    for p in params:
        if p.name in seen:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


def zero_grads(params):
    for p in params:
        p.zero_grad()


# primitive operations ----------------------------------------------------


def add(a, b):
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def subtract(a, b):
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "subtract")


def multiply(a, b):
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "multiply",
    )


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def square(a):
    data = a.data * a.data
    return _make(data, (a,), lambda g: (g * (2.0 * a.data),), "square")


def leaky_relu(a, alpha=0.1):
    data = np.where(a.data > 0, a.data, alpha * a.data)
    return _make(data, (a,), lambda g: (g * np.where(a.data > 0, 1.0, alpha),), "leaky_relu")


def tanh(a):
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),), "tanh")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def reshape(a, shape):
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, backward, "concat")


def slice_time(a, start, stop):
    """Rows start:stop along axis 0; gradient zero-pads back."""
    data = a.data[start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(data, (a,), backward, "slice_time")


def sum_(a, axis=None):
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(data), (a,), backward, "sum")


def mean(a, axis=None):
    data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False),)
        return ((np.broadcast_to(np.expand_dims(g, axis), a.shape) / count).astype(a.dtype, copy=False),)

    return _make(np.asarray(data), (a,), backward, "mean")


def stop_gradient(a):
    """Identity forward; contributes zero gradient backward."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def straight_through(z, q):
    """Quantization pass-through: forward is q's value bitwise, gradient
    flows to z with an identity Jacobian (and not to q)."""
    if z.shape != q.shape:
        raise ValueError(f"straight_through shape mismatch: {z.shape} vs {q.shape}")
    return _make(q.data, (z,), lambda g: (g,), "straight_through")


def embedding_lookup(table, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ValueError("embedding_lookup expects a 1-D index array")
    data = table.data[indices]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return (gt,)

    return _make(data, (table,), backward, "embedding_lookup")


def _im2col(x, kernel, stride):
    # x: (T, C) already padded -> (T_out, kernel*C)
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=0)  # (T-K+1, C, K)
    windows = windows[::stride]
    t_out = windows.shape[0]
    return windows.transpose(0, 2, 1).reshape(t_out, -1), t_out


def conv1d(x, w, stride=1, padding=0):
    """Temporal convolution. x: (T, C_in), w: (K, C_in, C_out).

    Output length is (T + 2*padding - K) // stride + 1.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError("conv1d expects x (T, C_in) and w (K, C_in, C_out)")
    kernel, c_in, c_out = w.data.shape
    if x.data.shape[1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input {x.data.shape[1]}, kernel {c_in}")
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    if xp.shape[0] < kernel:
        raise ValueError("conv1d input shorter than kernel after padding")
    cols, t_out = _im2col(xp, kernel, stride)
    w2 = w.data.reshape(kernel * c_in, c_out)
    data = cols @ w2

    def backward(g):
        gw = (cols.T @ g).reshape(kernel, c_in, c_out)
        gcols = (g @ w2.T).reshape(t_out, kernel, c_in)
        gxp = np.zeros_like(xp)
        for k in range(kernel):
            gxp[k : k + stride * t_out : stride] += gcols[:, k, :]
        gx = gxp[padding : gxp.shape[0] - padding] if padding else gxp
        return (gx, gw)

    return _make(data, (x, w), backward, "conv1d")


def transposed_conv1d(x, w, stride=1, padding=0):
    """Temporal transposed convolution (upsampling). x: (T, C_in), w: (K, C_in, C_out).

    Output length is (T - 1) * stride + K - 2*padding.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError("transposed_conv1d expects x (T, C_in) and w (K, C_in, C_out)")
    kernel, c_in, c_out = w.data.shape
    if x.data.shape[1] != c_in:
        raise ValueError(f"transposed_conv1d channel mismatch: input {x.data.shape[1]}, kernel {c_in}")
    t_in = x.data.shape[0]
    full_len = (t_in - 1) * stride + kernel
    full = np.zeros((full_len, c_out), dtype=np.result_type(x.dtype, w.dtype))
    for k in range(kernel):
        full[k : k + stride * t_in : stride] += x.data @ w.data[k]
    data = full[padding : full_len - padding] if padding else full

    def backward(g):
        gfull = np.pad(g, ((padding, padding), (0, 0))) if padding else g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for k in range(kernel):
            rows = gfull[k : k + stride * t_in : stride]
            gx += rows @ w.data[k].T
            gw[k] = x.data.T @ rows
        return (gx, gw)

    return _make(data, (x, w), backward, "transposed_conv1d")


def broadcast_time(vec, n_frames):
    """Repeat a (1, C) row vector down n_frames rows, differentiably."""
    ones = Tensor(np.ones((n_frames, 1), dtype=vec.dtype))
    return matmul(ones, vec)


# gradient verification ----------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float

    def __str__(self):
        return (
            f"max_rel_error={self.max_rel_error:.3e} at index {self.worst_index} "
            f"(analytic={self.analytic:.6e}, numeric={self.numeric:.6e})"
        )


def finite_difference_check(f, t, h=1e-5):
    """Compare reverse-mode gradients of scalar f(t) with central differences.

    Relative error per coordinate uses max(|analytic|, |numeric|, 1e-8) as
    denominator. Returns a GradCheckResult carrying the worst coordinate.
    Meaningful tolerances require t to be float64.
    """
    t.zero_grad()
    out = f(t)
    out.backward()
    analytic = t.grad.copy()

    numeric = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(t).data)
        flat[i] = orig - h
        lo = float(f(t).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradCheckResult(
        max_rel_error=float(rel[worst]),
        worst_index=worst,
        analytic=float(analytic[worst]),
        numeric=float(numeric[worst]),
    )
