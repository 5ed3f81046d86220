"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the demoireing networks need are provided. Every op
records a closure that maps the upstream gradient to gradients for its
inputs; ``backward`` walks the recorded graph once in reverse topological
order. Data is single precision unless a caller explicitly builds float64
tensors (the finite-difference checks do).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateStatisticsError, NonFiniteError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_EPS = 1e-6

_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording a graph (inference, frozen networks)."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=None)
    out.op = op
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, pad: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got x{x.shape} w{w.shape}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has C={x.shape[1]}, weight expects I={w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d needs square kernels, got {w.shape[2]}x{w.shape[3]}")
    k = w.shape[2]
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ShapeError(f"kernel {k}x{k} does not fit padded input {x.shape[2]}x{x.shape[3]} (pad {pad})")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match O={w.shape[0]}")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation, BCHW input and OIKK weights.

    Uses a patch matrix (im2col) and one matrix product; see ``conv2d_loop``
    for the explicit per-offset kernel used as a reference.
    """
    _check_conv(x, w, b, stride, pad)
    xd, wd = x.data, w.data
    B, C, H, W = xd.shape
    O, _, K, _ = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * K * K)
    w2 = wd.reshape(O, C * K * K)
    out = cols @ w2.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(wd.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, Ho, Wo, C, K, K)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(K):
                for j in range(K):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, _backward, "conv2d")


def conv2d_loop(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Forward-only reference: explicit accumulation over kernel offsets."""
    B, C, H, W = x.shape
    O, _, K, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    out = np.zeros((B, O, Ho, Wo), dtype=np.float64)
    for i in range(K):
        for j in range(K):
            patch = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride].astype(np.float64)
            out += np.einsum("oc,bchw->bohw", w[:, :, i, j].astype(np.float64), patch)
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out.astype(x.dtype)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormStats:
    """Running statistics plus the most recent batch statistics."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    last_mean: Optional[np.ndarray] = None
    last_var: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, channels: int) -> "BatchNormStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
               stats: Optional[BatchNormStats] = None) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects BCHW input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match C={C}")
    if stats is None:
        stats = BatchNormStats.zeros(C)
    xd = x.data
    eps = stats.eps
    shape = (1, C, 1, 1)

    if mode == "train":
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if n < 2:
            raise DegenerateStatisticsError(f"batch_norm train mode needs >= 2 values per channel, got {n}")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        stats.last_mean, stats.last_var = mean, var
        m = stats.momentum
        stats.running_mean = (m * stats.running_mean + (1 - m) * mean).astype(np.float32)
        stats.running_var = (m * stats.running_var + (1 - m) * var * (n / (n - 1))).astype(np.float32)
    elif mode == "infer":
        mean = stats.running_mean.astype(xd.dtype)
        var = stats.running_var.astype(xd.dtype)
    else:
        raise ContractError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if mode == "train":
                mg = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mgx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mg - xhat * mgx) * inv_std.reshape(shape)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), _backward, "batch_norm")


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.data.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh_act(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = (0.5 * (np.tanh(0.5 * x.data) + 1)).astype(x.data.dtype)
    return _result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add needs identical shapes, got {x.shape} and {y.shape}")
    return _result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    if x.ndim != 4 or y.ndim != 4 or x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeError(f"concat_channels needs matching B,H,W, got {x.shape} and {y.shape}")
    cx = x.shape[1]
    out = np.concatenate([x.data, y.data], axis=1)
    return _result(out, (x, y), lambda g: (g[:, :cx], g[:, cx:]), "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects BCHW, got {x.shape}")
    B, C, H, W = x.shape
    n = H * W

    def _backward(g):
        return (np.broadcast_to(g[:, :, None, None] / n, x.shape).astype(g.dtype),)

    return _result(x.data.mean(axis=(2, 3)), (x,), _backward, "avg_pool")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """(B, F) @ (O, F)^T + b."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shape mismatch: x{x.shape} w{w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def _backward(g):
        return g @ w.data, g.T @ x.data, (g.sum(axis=0) if b is not None else None)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, _backward, "linear")


# ---------------------------------------------------------------------------
# losses


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss needs identical shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size
    loss = np.asarray(np.mean(diff * diff, dtype=np.float64), dtype=diff.dtype)

    def _backward(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(diff.dtype), (-ga).astype(diff.dtype)

    return _result(loss, (a, b), _backward, "mse")


def bce_loss(p: Tensor, label) -> Tensor:
    """Binary cross entropy on probabilities, averaged over the batch.

    Each log argument is floored at ``PROB_EPS`` so the loss stays finite
    when a probability saturates; the gradient uses the floored value.
    """
    pd = p.data
    if np.any(~np.isfinite(pd)) or np.any(pd < 0) or np.any(pd > 1):
        raise ContractError("bce_loss probabilities must lie in [0, 1]")
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), pd.shape)
    if np.any((y != 0) & (y != 1)):
        raise ContractError("bce_loss labels must be 0 or 1")
    p64 = pd.astype(np.float64)
    pos = np.maximum(p64, PROB_EPS)
    neg = np.maximum(1.0 - p64, PROB_EPS)
    n = pd.size
    loss = -np.mean(y * np.log(pos) + (1 - y) * np.log(neg))

    def _backward(g):
        gp = -(y / pos - (1 - y) / neg) / n * float(g)
        return (gp.astype(pd.dtype),)

    return _result(np.asarray(loss, dtype=pd.dtype), (p,), _backward, "bce")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _key(p: Tensor, i: int):
    return p.name if p.name is not None else i


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ContractError(f"adam_step got {len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {_key(p, i)!r}")
        bad = ~np.isfinite(g)
        if bad.any():
            raise NonFiniteError(
                f"non-finite gradient in parameter {_key(p, i)!r}: {int(bad.sum())} of {g.size} entries")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        k = _key(p, i)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= step.astype(p.data.dtype)


class Adam:
    """Convenience wrapper binding a parameter list to an ``AdamState``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)
