"""Differentiable primitives over :class:`~vptlab.numerics.tensor.Tensor`.

Each function computes its forward value with numpy and, when any input
requires a gradient, records a closure that maps the output gradient to the
input gradients.
"""

from __future__ import annotations

import math

import numpy as np

from vptlab.errors import NumericError, ShapeError
from vptlab.numerics.tensor import Tensor

NEG_INF = -1e9  # additive mask value; exp() of it underflows to exactly 0


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = Tensor.wrap(a), Tensor.wrap(b)
    out = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = Tensor.wrap(a), Tensor.wrap(b)
    out = a.data - b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = Tensor.wrap(a), Tensor.wrap(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = Tensor.wrap(a), Tensor.wrap(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    return Tensor._from_op(out, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    return Tensor._from_op(out, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(a.dtype)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    sig = sig.astype(a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (g * sig,))


# reductions and shape ops ------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return Tensor._from_op(out, (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    out = np.swapaxes(a.data, i, j)
    return Tensor._from_op(out, (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(Tensor.wrap(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward)


# linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch-broadcast semantics on leading dims."""
    a, b = Tensor.wrap(a), Tensor.wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


# normalized exponentials -------------------------------------------------------


def _check_axis(a: Tensor, axis: int) -> None:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


def cross_entropy(logits: Tensor, targets, pad_id: int | None = None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[..., vocab]`` and ``targets`` an int array of the leading
    shape. Positions whose target equals ``pad_id`` are ignored.

    ``reduction="mean"`` averages over the non-pad positions.
    ``reduction="sequence"`` sums over the last target axis and averages over
    the remaining ones (per-sequence NLL, the ELBO reconstruction term).
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError("target id out of range")
    valid = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    nll = np.where(valid, -picked, 0.0)

    if reduction == "mean":
        denom = max(int(valid.sum()), 1)
        weights = valid / denom
    elif reduction == "sequence":
        n_seq = max(int(np.prod(targets.shape[:-1])), 1)
        weights = valid / n_seq
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.asarray((nll * weights).sum(), dtype=logits.dtype)
    if not np.isfinite(out):
        raise NumericError("cross-entropy is not finite")

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        grad = grad * (weights[..., None] * g)
        return (grad.astype(logits.dtype),)

    return Tensor._from_op(out, (logits,), backward)


# layers as functions -----------------------------------------------------------


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup; the gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError("token id out of vocabulary")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return Tensor._from_op(out, (weight,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gx = gb = gg = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each feature over all leading axes.

    In training mode the batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    feat = x.shape[-1]
    flat = x.data.reshape(-1, feat)
    m = flat.shape[0]
    if training:
        if m < 2:
            raise ShapeError("batch norm in training mode needs at least 2 rows")
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((flat - mu) * inv).astype(x.dtype)
    out = (xhat * gamma.data + beta.data).reshape(x.shape).astype(x.dtype)

    def backward(g):
        gf = g.reshape(-1, feat)
        gg = _unbroadcast((gf * xhat).sum(axis=0), gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(gf.sum(axis=0), beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = gf * gamma.data
            if training:
                gx = inv / m * (m * gh - gh.sum(axis=0) - xhat * (gh * xhat).sum(axis=0))
            else:
                gx = gh * inv
            gx = gx.reshape(x.shape).astype(x.dtype)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate) so eval needs no rescale."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,))


def gaussian_kl(mu_q: Tensor, sigma_q: Tensor, mu_p, sigma_p: float = 1.0) -> Tensor:
    """Elementwise KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) in nats."""
    if np.any(sigma_q.data <= 0):
        raise NumericError("posterior sigma must be strictly positive")
    mu_p = Tensor.wrap(mu_p)
    diff = sub(mu_q, mu_p)
    var_ratio = scale(square(sigma_q), 1.0 / sigma_p**2)
    term = add(var_ratio, scale(square(diff), 1.0 / sigma_p**2))
    term = sub(term, 1.0)
    term = sub(term, scale(log(sigma_q), 2.0))
    term = add(term, 2.0 * math.log(sigma_p))
    return scale(term, 0.5)
