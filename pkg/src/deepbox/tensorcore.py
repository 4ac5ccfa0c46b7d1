"""Dense layer kernels with exact backward passes, and SGD with momentum.

Activations are numpy arrays in ``N x C x H x W`` layout. Every kernel is a
pair of functions, ``*_forward`` returning its output plus whatever the
backward needs, and ``*_backward`` consuming that. :class:`Chain` strings the
kernels together for a fixed sequential net and keeps the tape.

Training runs in float32; gradient checks pass float64 arrays through the same
code. Setting ``DEEPBOX_DEBUG=1`` (or calling :func:`set_debug`) makes every
layer verify that its output is finite.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._kernels import col2im, maxpool_bwd, maxpool_fwd
from .errors import DimensionError, LabelError, StateError

_DEBUG = os.environ.get("DEEPBOX_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


def out_size(n: int, k: int, s: int, p: int = 0) -> int:
    return (n + 2 * p - k) // s + 1


# ---------------------------------------------------------------- convolution

def _im2col(xh: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of a channels-last array; columns ordered (ky, kx, c)."""
    n, _, _, c = xh.shape
    sn, sh, sw, sc = xh.strides
    win = as_strided(xh, shape=(n, ho, wo, k, k * c),
                     strides=(sn, s * sh, s * sw, sh, sc), writeable=False)
    return win.reshape(n * ho * wo, k * k * c)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlation of ``x`` (N,C,H,W) with filters ``w`` (F,C,k,k).

    Returns ``(y, cache)``; ``y`` has shape (N, F, Ho, Wo) with
    ``Ho = (H + 2*pad - k) // stride + 1``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv expects 4-d input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise DimensionError(f"weights {w.shape} do not fit input with {c} channels")
    if b.shape != (f,):
        raise DimensionError(f"bias shape {b.shape} != ({f},)")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise DimensionError(f"input {h}x{wd} (pad {pad}) smaller than kernel {k}")
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    xh = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=np.result_type(x, w))
    xh[:, pad:pad + h, pad:pad + wd, :] = x.transpose(0, 2, 3, 1)
    cols = _im2col(xh, k, stride, ho, wo)
    wm = w.transpose(0, 2, 3, 1).reshape(f, -1)
    y = cols @ wm.T
    y += b
    y = np.ascontiguousarray(y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    _check_finite("conv", y)
    return y, (cols, x.shape, w, stride, pad)


def conv2d_backward(dy: np.ndarray, cache, need_dx: bool = True):
    cols, x_shape, w, stride, pad = cache
    n, c, h, wd = x_shape
    f, _, k, _ = w.shape
    _, _, ho, wo = dy.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dy2.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dcols = (dy2 @ w.transpose(0, 2, 3, 1).reshape(f, -1)).reshape(n, ho, wo, k, k, c)
    dxh = col2im(dcols, stride, h + 2 * pad, wd + 2 * pad)
    dx = np.ascontiguousarray(dxh[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2))
    return dx, np.ascontiguousarray(dw), db


# ---------------------------------------------------------------- max pooling

def maxpool_forward(x: np.ndarray, k: int, s: int):
    """Max over k x k windows with stride s. Returns ``(y, argmax)``.

    ``argmax`` holds, per output cell, the flat offset ``i*k + j`` of the winning
    element inside its window (first maximum on ties).
    """
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise DimensionError(f"pool window {k} larger than input {h}x{w}")
    ho, wo = out_size(h, k, s), out_size(w, k, s)
    y, argmax = maxpool_fwd(np.ascontiguousarray(x), k, s, ho, wo)
    _check_finite("maxpool", y)
    return y, argmax


def maxpool_backward(dy: np.ndarray, argmax: np.ndarray, x_shape, k: int, s: int) -> np.ndarray:
    return maxpool_bwd(np.ascontiguousarray(dy), argmax, k, s, x_shape[2], x_shape[3])


# ------------------------------------------------------------- relu and fc

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.where(y > 0, dy, 0).astype(dy.dtype, copy=False)


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map of the flattened input: ``x.reshape(N, -1) @ w + b``; ``w`` is (in, out)."""
    x2 = x.reshape(x.shape[0], -1)
    if w.ndim != 2 or x2.shape[1] != w.shape[0]:
        raise DimensionError(f"fc input length {x2.shape[1]} does not match weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} != ({w.shape[1]},)")
    y = x2 @ w + b
    _check_finite("fc", y)
    return y


def fc_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, need_dx: bool = True):
    x2 = x.reshape(x.shape[0], -1)
    dw = x2.T @ dy
    db = dy.sum(axis=0)
    dx = (dy @ w.T).reshape(x.shape) if need_dx else None
    return dx, dw, db


# ------------------------------------------------------------------ softmax

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean two-class cross-entropy and its gradient with respect to ``logits``."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise DimensionError(f"expected (batch, 2) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise LabelError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise LabelError(f"labels must be 0 or 1, got {np.unique(labels).tolist()}")
    labels = labels.astype(np.intp)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad


# -------------------------------------------------------------------- chain

KINDS = ("conv", "maxpool", "relu", "fc", "softmax-xent")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    k: int = 1
    s: int = 1
    c: int = 1
    p: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.k < 1 or self.s < 1 or self.c < 1 or self.p < 0:
            raise ValueError(f"invalid layer hyperparameters in {self}")


class Chain:
    """A fixed sequence of layers sharing one parameter dict.

    Parameters are looked up as ``"<name>.w"`` / ``"<name>.b"``. The last
    forward pass is taped; :meth:`backward` consumes the tape.
    """

    def __init__(self, layers: Sequence[LayerSpec]):
        self.layers = list(layers)
        self._tape = None

    def forward(self, params: dict, x: np.ndarray, record: bool = True) -> np.ndarray:
        tape = []
        for layer in self.layers:
            if layer.kind == "conv":
                y, cache = conv2d_forward(x, params[layer.name + ".w"], params[layer.name + ".b"],
                                          layer.s, layer.p)
                tape.append(cache)
            elif layer.kind == "maxpool":
                y, argmax = maxpool_forward(x, layer.k, layer.s)
                tape.append((argmax, x.shape))
            elif layer.kind == "relu":
                y = relu_forward(x)
                tape.append(y)
            elif layer.kind == "fc":
                y = fc_forward(x, params[layer.name + ".w"], params[layer.name + ".b"])
                tape.append((x, params[layer.name + ".w"]))
            else:
                raise ValueError("softmax-xent terminates a net; apply softmax_xent to the logits")
            x = y
        self._tape = tape if record else None
        return x

    def backward(self, dout: np.ndarray, need_input_grad: bool = False):
        """Return ``(grads, dx)`` for the last recorded forward pass."""
        if self._tape is None:
            raise StateError("backward called before a recorded forward pass")
        grads = {}
        d = dout
        for idx in range(len(self.layers) - 1, -1, -1):
            layer, cache = self.layers[idx], self._tape[idx]
            need = need_input_grad or idx > 0
            if layer.kind == "conv":
                d, dw, db = conv2d_backward(d, cache, need_dx=need)
                grads[layer.name + ".w"], grads[layer.name + ".b"] = dw, db
            elif layer.kind == "maxpool":
                argmax, shape = cache
                d = maxpool_backward(d, argmax, shape, layer.k, layer.s)
            elif layer.kind == "relu":
                d = relu_backward(d, cache)
            elif layer.kind == "fc":
                xin, w = cache
                d, dw, db = fc_backward(d, xin, w, need_dx=need)
                grads[layer.name + ".w"], grads[layer.name + ".b"] = dw, db
        self._tape = None
        return grads, d


# ---------------------------------------------------------------------- sgd

@dataclass
class OptimState:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError(f"invalid optimizer hyperparameters lr={self.lr} "
                             f"momentum={self.momentum} weight_decay={self.weight_decay}")


def sgd_step(params: dict, grads: dict, state: OptimState, lr: float | None = None) -> dict:
    """Heavy-ball update, in place: ``v = mu*v - lr*(g + wd*w); w += v``."""
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        elif v.shape != w.shape:
            raise DimensionError(f"momentum buffer for {name} has shape {v.shape}, parameter {w.shape}")
        v *= state.momentum
        v -= lr * (g + state.weight_decay * w)
        w += v
    return params
