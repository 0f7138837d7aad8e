"""Differentiable operations over :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to the gradients of its inputs. Broadcasting follows
numpy rules; gradients are summed back to the operand shapes.
"""

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


# -- elementwise unary --------------------------------------------------------

def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._result(out, (a,), backward, "power")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return Tensor._result(out, (a,), backward, "sqrt")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a):
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        return (g * np.exp(a.data - out),)

    return Tensor._result(out, (a,), backward, "softplus")


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return Tensor._result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def take_rows(a, indices):
    """Rows ``a[indices]`` along axis 0; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return Tensor._result(a.data[indices], (a,), backward, "take_rows")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tuple(tensors), backward, "concat")


# -- reductions ---------------------------------------------------------------

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._result(out, (a,), backward, "mean")


def var(a, axis=None, keepdims=False):
    """Biased (population) variance over ``axis``."""
    a = as_tensor(a)
    centered = a - mean(a, axis=axis, keepdims=True)
    return mean(centered * centered, axis=axis, keepdims=keepdims)


def global_avg_pool(x):
    """Mean over the spatial axes of an (N, C, H, W) tensor, giving (N, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    return mean(x, axis=(2, 3))


def _select(a, axis, mask, pick):
    a = as_tensor(a)
    fill = -np.inf if pick is np.argmax else np.inf
    values = a.data if mask is None else np.where(mask, a.data, fill)
    idx = pick(values, axis=axis)
    idx_e = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_e, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx_e, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._result(out, (a,), backward, "select"), idx


def max_select(a, axis=-1, mask=None):
    """Maximum along ``axis`` restricted to ``mask``; returns (values, indices).

    Ties resolve to the lowest index and the gradient reaches the selected
    element only. Rows whose mask is all False select index 0; callers are
    expected to validate masks first.
    """
    return _select(a, axis, mask, np.argmax)


def min_select(a, axis=-1, mask=None):
    """Minimum counterpart of :func:`max_select`."""
    return _select(a, axis, mask, np.argmin)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + bias
    return out


def dot(a, b, axis=-1):
    return sum(mul(a, b), axis=axis)


def l2_norm(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    return sqrt(sum(a * a, axis=axis, keepdims=keepdims))


def cosine_similarity(a, b, axis=-1):
    """Row-wise cosine; raises NumericError when either vector has zero norm."""
    return dot(a, b, axis=axis) / (l2_norm(a, axis=axis) * l2_norm(b, axis=axis))


def pairwise_distance(x):
    """Euclidean distance matrix between the rows of a (N, D) tensor.

    At coincident points the distance is not differentiable; the gradient
    there is taken to be zero.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"pairwise_distance expects (N, D), got {x.shape}")
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, g / dist, 0.0)
        w = w + w.T
        return (w.sum(axis=1)[:, None] * x.data - w @ x.data,)

    return Tensor._result(dist, (x,), backward, "pairwise_distance")


def log_softmax(logits, axis=-1):
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (logits,), backward, "log_softmax")


# -- convolution --------------------------------------------------------------

def conv2d(x, weight, stride=1, padding=1):
    """2-D cross-correlation of (N, C, H, W) input with (O, C, kh, kw) weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    # shifted copies stacked on the channel axis: (N, kh*kw*C, Ho*Wo), channel order (i, j, c)
    cols = np.concatenate(
        [xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] for i, j in offsets], axis=1
    ).reshape(n, kh * kw * c, ho * wo)
    w2d = weight.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = np.matmul(w2d, cols).reshape(n, o, ho, wo)

    def backward(g):
        gw = None
        gx = None
        g3 = g.reshape(n, o, ho * wo)
        if weight.requires_grad:
            gw2d = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw2d.reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = np.matmul(w2d.T, g3).reshape(n, kh * kw, c, ho, wo)
            gxp = np.zeros_like(xp)
            for k, (i, j) in enumerate(offsets):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, k]
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw

    return Tensor._result(np.ascontiguousarray(out), (x, weight), backward, "conv2d")


# -- fused normalization primitives --------------------------------------------

def standardize(x, axis, eps=1e-5, return_stats=False):
    """``(x - mean) / sqrt(var + eps)`` with biased variance over ``axis``.

    With ``return_stats`` the batch mean and variance (numpy, keepdims) are
    returned alongside the tensor.
    """
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    variance = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(variance + eps)
    xhat = centered * inv

    def backward(g):
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - g_mean - xhat * gx_mean),)

    out = Tensor._result(xhat, (x,), backward, "standardize")
    if return_stats:
        return out, mu, variance
    return out


def _channel_view(param, ndim):
    return param.reshape((1, -1) + (1,) * (ndim - 2))


def _channel_sum(g, ndim):
    return g.sum(axis=(0,) + tuple(range(2, ndim)))


def channel_affine(x, gamma, beta):
    """``x * gamma + beta`` with per-channel (axis 1) vectors ``gamma`` and ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channel_affine: {gamma.shape}/{beta.shape} do not match {c} channels")
    gv = _channel_view(gamma.data, x.ndim)
    out = x.data * gv + _channel_view(beta.data, x.ndim)

    def backward(g):
        gx = g * gv if x.requires_grad else None
        gg = _channel_sum(g * x.data, x.ndim) if gamma.requires_grad else None
        gb = _channel_sum(g, x.ndim) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), backward, "channel_affine")


def channel_mix(a, b, weight):
    """``weight * a + (1 - weight) * b`` with a per-channel (axis 1) ``weight``."""
    a, b, weight = as_tensor(a), as_tensor(b), as_tensor(weight)
    if a.shape != b.shape:
        raise ShapeError(f"channel_mix: shapes {a.shape} and {b.shape} differ")
    if weight.shape != (a.shape[1],):
        raise ShapeError(f"channel_mix: weight {weight.shape} does not match {a.shape[1]} channels")
    w = _channel_view(weight.data, a.ndim)
    out = w * a.data + (1.0 - w) * b.data

    def backward(g):
        ga = g * w if a.requires_grad else None
        gb = g * (1.0 - w) if b.requires_grad else None
        gw = _channel_sum(g * (a.data - b.data), a.ndim) if weight.requires_grad else None
        return ga, gb, gw

    return Tensor._result(out, (a, b, weight), backward, "channel_mix")
