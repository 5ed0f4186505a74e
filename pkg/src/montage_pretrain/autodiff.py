"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the handful of ops the toy backbone and the three objectives need.
Each op builds its output ``Tensor`` with a closure that maps the output
gradient to parent gradients; ``Tensor.backward`` replays them in reverse
topological order.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        extra = (", grad" if self.requires_grad else "") + (", " + self.name if self.name else "")
        return f"Tensor(shape={self.shape}{extra})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an upstream gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"upstream gradient shape {grad.shape} != output shape {self.shape}")

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)

        grads = {id(self): grad}
        for node in reversed(order):
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


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           name: str = "conv") -> Tensor:
    """Cross-correlation: x (N,C,H,W), w (O,C,k,k), b (O,) -> (N,O,Ho,Wo)."""
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected (N, C, H, W) input, got shape {x.shape}")
    n, c, h, wd = x.shape
    o, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"{name}: input has {c} channels but the kernel expects {wc}")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"{name}: input {h}x{wd} too small for kernel {kh}x{kw}")
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + wd] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gc[:, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at 0

    def backward(g):
        return (np.where(mask, g, 0.0),)

    return _result(np.maximum(x.data, 0.0), (x,), backward)


def avg_pool2d(x: Tensor, k: int = 2, name: str = "pool") -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"{name}: spatial size {h}x{w} is not divisible by pool size {k}")
    # strided slice sums beat reshape().mean() by a wide margin here
    out = np.zeros((n, c, h // k, w // k))
    for i in range(k):
        for j in range(k):
            out += x.data[:, :, i::k, j::k]
    out *= 1.0 / (k * k)

    def backward(g):
        gx = np.empty(x.shape)
        gk = g * (1.0 / (k * k))
        for i in range(k):
            for j in range(k):
                gx[:, :, i::k, j::k] = gk
        return (gx,)

    return _result(out, (x,), backward)


def region_pool(x: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted spatial pooling: x (N,C,h,w), weights (R,h,w) -> (N,R,C).

    Each weight map should sum to 1 (e.g. a region mask divided by its size).
    """
    if weights.shape[1:] != x.shape[2:]:
        raise ShapeError(f"pooling weights {weights.shape[1:]} do not match feature map {x.shape[2:]}")
    out = np.einsum("nchw,rhw->nrc", x.data, weights)

    def backward(g):
        return (np.einsum("nrc,rhw->nchw", g, weights),)

    return _result(out, (x,), backward)


def linear(v: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """v (..., Cin) against a (Cout, Cin[,1,1]) weight -> (..., Cout)."""
    wmat = w.data.reshape(w.shape[0], -1)
    if v.shape[-1] != wmat.shape[1]:
        raise ShapeError(f"linear: input has {v.shape[-1]} features, weight expects {wmat.shape[1]}")
    out = v.data @ wmat.T
    if b is not None:
        out = out + b.data

    def backward(g):
        flat_g = g.reshape(-1, g.shape[-1])
        flat_v = v.data.reshape(-1, v.shape[-1])
        gv = g @ wmat if v.requires_grad else None
        gw = (flat_g.T @ flat_v).reshape(w.shape) if w.requires_grad else None
        gb = flat_g.sum(axis=0) if b is not None and b.requires_grad else None
        return gv, gw, gb

    parents = (v, w) if b is None else (v, w, b)
    return _result(out, parents, backward)


def log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int) -> np.ndarray:
    return np.exp(log_softmax(z, axis))


def softmax_cross_entropy(logits: Tensor, target: np.ndarray, axis: int = 1) -> Tensor:
    """Per-element ``-sum_k target_k log softmax(logits)_k``; ``axis`` is reduced."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"target shape {target.shape} != logits shape {logits.shape}")
    lsm = log_softmax(logits.data, axis)
    out = -(target * lsm).sum(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        return (g * (np.exp(lsm) * target.sum(axis=axis, keepdims=True) - target),)

    return _result(out, (logits,), backward)


def weighted_sum(x: Tensor, coeff: np.ndarray) -> Tensor:
    """Scalar ``sum(x * coeff)`` with constant, broadcastable ``coeff``."""
    coeff = np.broadcast_to(np.asarray(coeff, dtype=np.float64), x.shape)

    def backward(g):
        return (g * coeff,)

    return _result(np.array((x.data * coeff).sum()), (x,), backward)
