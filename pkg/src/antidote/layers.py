"""Layers with explicit forward/backward passes, SGD and the cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import ATTENTION, MaskCriterion, PruneMask, apply_mask, make_batch_mask
from .tensor import DTYPE, ShapeError, check_tensor4


class StateError(RuntimeError):
    """Backward called without the forward state it needs."""


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, k: int, padding: int, stride: int = 1) -> np.ndarray:
    """Patch matrix of shape (C, k, k, N, Ho, Wo) for a square kernel."""
    n, c, h, w = x.shape
    xp = _pad(x, padding)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            tap = xp[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
            cols[:, di, dj] = tap.transpose(1, 0, 2, 3)
    return cols


def col2im(dcols: np.ndarray, shape: tuple, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col` for stride 1; returns NCHW."""
    n, c, h, w = shape
    k = dcols.shape[1]
    ho, wo = dcols.shape[4:]
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + ho, dj:dj + wo] += dcols[:, di, dj]
    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   padding: int = 1, stride: int = 1, cols: Optional[np.ndarray] = None) -> np.ndarray:
    check_tensor4(x, "conv input")
    c_out, c_in, k, _ = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got {x.shape[1]}")
    if cols is None:
        cols = im2col(x, k, padding, stride)
    n, ho, wo = cols.shape[3:]
    out = weight.reshape(c_out, -1) @ cols.reshape(c_in * k * k, -1)
    out = out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3) + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    padding: int = 1, cols: Optional[np.ndarray] = None, need_dx: bool = True):
    """Gradients (dx, dw, db) of a stride-1 convolution; ``dx`` is None unless needed."""
    c_out, c_in, k, _ = weight.shape
    if cols is None:
        cols = im2col(x, k, padding)
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(c_out, -1)  # (F, NHW)
    dw = (cols.reshape(c_in * k * k, -1) @ g.T).T.reshape(weight.shape)
    db = g.sum(axis=1)
    dx = None
    if need_dx:
        dcols = (weight.reshape(c_out, -1).T @ g).reshape(cols.shape)
        dx = col2im(dcols, x.shape, padding).astype(x.dtype, copy=False)
    return dx, np.ascontiguousarray(dw, dtype=weight.dtype), db.astype(weight.dtype)


def conv2d_forward_masked(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                          channel_mask: np.ndarray, spatial_mask: np.ndarray,
                          padding: int = 1):
    """Stride-1 same-padding convolution that only visits kept inputs.

    Each kept input column scatters its contribution into the outputs it
    reaches, one kernel tap at a time. Masked channels and masked columns are
    never read. Returns ``(out, macs)`` where ``macs`` counts the
    multiply-accumulates charged: ``c_out * kept_channels * kept_columns * k * k``
    per sample, with border taps charged as if dense.
    """
    check_tensor4(x, "conv input")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got {c}")
    if 2 * padding != kh - 1 or kh != kw:
        raise ShapeError("masked convolution needs a square kernel with same padding")
    ch = np.asarray(channel_mask, dtype=bool).reshape(-1, c)
    sp = np.asarray(spatial_mask, dtype=bool).reshape(-1, h, w)
    if ch.shape[0] not in (1, n) or sp.shape[0] not in (1, n):
        raise ShapeError("mask batch does not match input batch")
    out = np.empty((n, c_out, h, w), dtype=x.dtype)
    macs = 0
    for s in range(n):
        cm = ch[s if ch.shape[0] > 1 else 0]
        sm = sp[s if sp.shape[0] > 1 else 0]
        kept_ch = np.flatnonzero(cm)
        ii, jj = np.nonzero(sm)
        acc = np.zeros((c_out, h, w), dtype=np.float64)
        cols = x[s][kept_ch][:, ii, jj]  # (kept_ch, kept_cols)
        for di in range(kh):
            oi = ii + padding - di
            for dj in range(kw):
                oj = jj + padding - dj
                ok = (oi >= 0) & (oi < h) & (oj >= 0) & (oj < w)
                tap = weight[:, kept_ch, di, dj] @ cols[:, ok]
                acc[:, oi[ok], oj[ok]] += tap
        out[s] = acc + bias.reshape(-1, 1, 1)
        macs += c_out * kept_ch.size * ii.size * kh * kw
    return out, macs


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, k: int = 3, padding: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.padding = k // 2 if padding is None else padding
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * k * k
        self.params["weight"] = (rng.standard_normal((c_out, c_in, k, k))
                                 * math.sqrt(2.0 / fan_in)).astype(DTYPE)
        self.params["bias"] = np.zeros(c_out, dtype=DTYPE)
        self.need_dx = True
        self._x = self._cols = None

    def forward(self, x):
        self._x = x
        self._cols = im2col(x, self.params["weight"].shape[2], self.padding)
        return conv2d_forward(x, self.params["weight"], self.params["bias"], self.padding,
                              cols=self._cols)

    def forward_masked(self, x, mask: PruneMask):
        self._x, self._cols = x, None
        return conv2d_forward_masked(x, self.params["weight"], self.params["bias"],
                                     mask.channel_mask, mask.spatial_mask, self.padding)

    def backward(self, grad):
        if self._x is None:
            raise StateError("conv backward before forward")
        dx, dw, db = conv2d_backward(self._x, self.params["weight"], grad, self.padding,
                                     cols=self._cols, need_dx=self.need_dx)
        self.grads["weight"], self.grads["bias"] = dw, db
        return dx if dx is not None else np.zeros_like(self._x)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._pos = x > 0
        return np.where(self._pos, x, 0).astype(x.dtype)

    def backward(self, grad):
        return np.where(self._pos, grad, 0).astype(grad.dtype)


class DynamicPrune(Layer):
    """Targeted-dropout / dynamic pruning layer.

    Keeps the top ``p_ch`` fraction of channels and ``p_sp`` fraction of
    spatial columns of every sample, ranked by ``criterion``. Backward
    multiplies by the cached mask; the mask selection itself carries no
    gradient.
    """

    kind = "dynprune"

    def __init__(self, p_ch: float = 1.0, p_sp: float = 1.0,
                 criterion: MaskCriterion = ATTENTION, enabled: bool = True):
        super().__init__()
        self.p_ch, self.p_sp = p_ch, p_sp
        self.criterion = criterion
        self.enabled = enabled
        self.fixed_mask: Optional[PruneMask] = None
        self.last_mask: Optional[PruneMask] = None
        self._calls = 0

    @property
    def active(self) -> bool:
        return self.enabled and (self.p_ch < 1.0 or self.p_sp < 1.0 or self.fixed_mask is not None)

    def reset_stream(self):
        self._calls = 0

    def forward(self, x):
        if not self.active:
            self.last_mask = None
            return x
        if self.fixed_mask is not None:
            mask = self.fixed_mask
        else:
            mask = make_batch_mask(x, self.p_ch, self.p_sp, self.criterion, stream=self._calls)
            self._calls += 1
        self.last_mask = mask
        return apply_mask(x, mask)

    def backward(self, grad):
        if not self.active:
            return grad
        if self.last_mask is None:
            raise StateError("dynprune backward without a cached mask")
        return apply_mask(grad, self.last_mask)


class MaxPool2x2(Layer):
    """2x2/stride-2 max pool; gradient goes to the first maximum in row-major order."""

    kind = "maxpool2x2"

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        self._arg = win.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self._shape
        g = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(g, self._arg[..., None], grad[..., None], axis=-1)
        g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return g.reshape(n, c, h, w)


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(grad / (h * w), self._shape).astype(grad.dtype)


class Dense(Layer):
    """Fully connected layer over the flattened input."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = (rng.standard_normal((n_out, n_in))
                                 * math.sqrt(1.0 / n_in)).astype(DTYPE)
        self.params["bias"] = np.zeros(n_out, dtype=DTYPE)

    def forward(self, x):
        self._shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        if self._x.shape[1] != self.params["weight"].shape[1]:
            raise ShapeError(f"dense expects {self.params['weight'].shape[1]} inputs, "
                             f"got {self._x.shape[1]}")
        return self._x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = (grad.T @ self._x).astype(self.params["weight"].dtype)
        self.grads["bias"] = grad.sum(axis=0).astype(self.params["bias"].dtype)
        return (grad @ self.params["weight"]).reshape(self._shape)


class SoftmaxCrossEntropy:
    """Mean softmax cross-entropy over the batch."""

    kind = "softmax-xent"

    def forward(self, logits: np.ndarray, labels: np.ndarray) -> float:
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self._prob = np.exp(logp)
        self._labels = np.asarray(labels)
        self._dtype = logits.dtype
        return float(-logp[np.arange(len(labels)), self._labels].mean())

    def backward(self) -> np.ndarray:
        g = self._prob.copy()
        g[np.arange(len(self._labels)), self._labels] -= 1.0
        return (g / len(self._labels)).astype(self._dtype)


def sgd_step(params: list, grads: list, lr: float) -> None:
    """In-place ``p -= lr * g`` over matching parameter/gradient lists."""
    for p, g in zip(params, grads):
        p -= np.asarray(lr * g, dtype=p.dtype)


@dataclass(frozen=True)
class CosineSchedule:
    lr0: float = 0.1
    total_steps: int = 1

    def __call__(self, step: int) -> float:
        return cosine_lr(self, step)


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    return 0.5 * schedule.lr0 * (1.0 + math.cos(math.pi * step / schedule.total_steps))
