"""Small reverse-mode autodiff over numpy arrays.

Only the operations the UNet needs exist here. Image tensors are NCHW.
Graphs are built eagerly: every op returns a :class:`Tensor` holding its
parents and a closure mapping the output gradient to parent gradients.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateMaskError, ShapeError


class Precision(enum.Enum):
    F32 = np.float32
    F64 = np.float64

    @property
    def dtype(self):
        return np.dtype(self.value)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def _same_precision(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed precisions in one graph: {sorted(str(d) for d in dtypes)}")


def _nhwc(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 2, 3, 1)


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation (no kernel flip) plus bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    _same_precision(*parents)
    s, p = stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, weight {weight.shape}")

    # Work channels-last; outputs are NCHW views over NHWC memory, so chained
    # convolutions never pay for a layout transpose.
    xp = _nhwc(x.data)
    if p:
        padded = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        padded[:, p : p + h, p : p + w, :] = xp
        xp = padded
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = _nchw(out.reshape(n, ho, wo, c_out))

    def backward(g):
        g2 = _nhwc(g).reshape(-1, c_out)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(c_out, k, k, c).transpose(0, 3, 1, 2))
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
            gx = _nchw(dxp[:, p : p + h, p : p + w, :] if p else dxp)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * positive,))


def upsample_nearest(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    n, c, h, w = x.shape
    xh = _nhwc(x.data)
    out = _nchw(np.broadcast_to(xh[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c))

    def backward(g):
        return (_nchw(_nhwc(g).reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))),)

    return _result(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels needs matching N, H, W: got {a.shape} and {b.shape}")
    _same_precision(a, b)
    ca = a.shape[1]
    out = _nchw(np.concatenate([_nhwc(a.data), _nhwc(b.data)], axis=3))
    return _result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)``; used to reduce tensors for gradient checks."""
    wts = np.asarray(weights, dtype=x.dtype)
    if wts.shape != x.shape:
        raise ShapeError(f"weights shape {wts.shape} does not match {x.shape}")
    return _result(np.asarray(np.sum(x.data * wts), dtype=x.dtype), (x,), lambda g: (g * wts,))


def _mask_array(mask, shape) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != tuple(shape):
        raise ShapeError(f"mask shape {m.shape} does not match {tuple(shape)}")
    m = m != 0
    if not m.any():
        raise DegenerateMaskError("mask selects no elements")
    return m


def masked_mse_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over elements where ``mask`` is nonzero."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"pred shape {pred.shape} does not match target {t.shape}")
    m = _mask_array(mask, pred.shape)
    count = int(m.sum())
    diff = np.where(m, pred.data - t, 0).astype(pred.dtype)
    loss = np.asarray(np.sum(diff * diff) / count, dtype=pred.dtype)
    return _result(loss, (pred,), lambda g: (g * (2.0 / count) * diff,))


def masked_mae(pred, target, mask) -> float:
    """Mean absolute error over mask-1 pixels, in the inputs' units (dB for dBm grids).

    The sum is correctly rounded, so the result does not depend on summation order.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"pred shape {p.shape} does not match target {t.shape}")
    m = _mask_array(mask, p.shape)
    return math.fsum(np.abs(p[m] - t[m]).tolist()) / int(m.sum())


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimState) -> OptimState:
    """One bias-corrected Adam update, in place; missing gradients count as zero."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ShapeError(f"Adam shape mismatch for parameter of shape {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype)
    return state


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               seed: int = 0, max_elements: int | None = None) -> float:
    """Worst element-wise relative error between analytic and central-difference gradients.

    Non-scalar outputs are reduced with fixed random weights first. Inputs
    must be F64. Relative error is ``|a - n| / max(|a|, |n|, 1e-12)``.
    ``max_elements`` checks a random subset of each input's entries.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ShapeError("grad_check requires F64 inputs")
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    def scalar() -> Tensor:
        out = fn(*inputs)
        return out if weights is None else weighted_sum(out, weights)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    scalar().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(scalar().data)
            flat[i] = orig - h
            fm = float(scalar().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
