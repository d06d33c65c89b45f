"""Forward and analytic backward passes for the layers of the segmentation net.

Tensors are plain ``numpy`` arrays laid out ``[batch, channel, row, col]``.
Every op preserves the floating dtype of its input, so the same code runs
in float32 for training and in float64 for finite-difference checks.
Convolutions compute in the input precision; weight gradients, batch norm
statistics and softmax reductions accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, MutableMapping, Sequence

import numpy as np


@dataclass
class ConvLayerParams:
    weights: np.ndarray  # [out_ch, in_ch, k, k]
    bias: np.ndarray  # [out_ch]
    dilation: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError(f"conv weights must be [out, in, k, k], got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        if int(self.dilation) < 1:
            raise ValueError("dilation must be >= 1")
        self.dilation = int(self.dilation)

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormParams":
        return cls(
            scale=np.ones(channels, dtype),
            shift=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )


def _acc_dtype(x: np.ndarray) -> np.dtype:
    return np.result_type(x.dtype, np.float32)


# ---------------------------------------------------------------------------
# Dilated valid convolution


def conv_output_size(n: int, kernel: int, dilation: int) -> int:
    return n - dilation * (kernel - 1)


def _check_conv(x: np.ndarray, p: ConvLayerParams) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"expected [batch, channel, row, col] input, got shape {x.shape}")
    if x.shape[1] != p.weights.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, layer expects {p.weights.shape[1]}")
    ho = conv_output_size(x.shape[2], p.kernel, p.dilation)
    wo = conv_output_size(x.shape[3], p.kernel, p.dilation)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"input {x.shape[2]}x{x.shape[3]} smaller than dilated kernel extent "
            f"{p.dilation * (p.kernel - 1) + 1}"
        )
    return ho, wo


class Workspace:
    """Reusable scratch buffers for one layer.

    Large fresh allocations dominate the cost of the convolution on a single
    core (page faults), so training keeps one workspace per layer.  With
    ``cache_cols`` the im2col matrix built in the forward pass is kept for
    the backward pass of the same input; otherwise it lives in the shared
    ``scratch`` and is rebuilt when needed.  Backward-only buffers always
    come from ``scratch`` when one is given.
    """

    def __init__(self, scratch: "Workspace | None" = None, cache_cols: bool = True):
        self._buffers: dict[str, np.ndarray] = {}
        self.cols_key = None
        self.scratch = scratch
        self.cache_cols = cache_cols

    def get(self, name: str, shape, dtype=np.float64) -> np.ndarray:
        buf = self._buffers.get(name)
        if buf is None or buf.shape != tuple(shape) or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._buffers[name] = buf
        return buf

    def view(self, name: str, shape, dtype=np.float64) -> np.ndarray:
        """An array of ``shape`` carved from a flat byte buffer that only grows."""
        dtype = np.dtype(dtype)
        n = int(np.prod(shape))
        buf = self._buffers.get(name)
        if buf is None or buf.size < n * dtype.itemsize:
            buf = np.empty(n * dtype.itemsize, dtype=np.uint8)
            self._buffers[name] = buf
        return buf[:n * dtype.itemsize].view(dtype).reshape(shape)

    def temp(self, name: str, shape, dtype=np.float64) -> np.ndarray:
        if self.scratch is not None:
            return self.scratch.view(name, shape, dtype)
        return self.get(name, shape, dtype)


def _cols_key(x: np.ndarray, p: "ConvLayerParams"):
    return (x.__array_interface__["data"][0], x.shape, x.dtype.str, p.kernel, p.dilation)


def _im2col(x: np.ndarray, k: int, d: int, ho: int, wo: int, ws: Workspace | None = None,
            name: str = "cols") -> np.ndarray:
    b, c = x.shape[:2]
    shape = (b, c, k, k, ho, wo)
    dt = _acc_dtype(x)
    if ws is None:
        cols = np.empty(shape, dtype=dt)
    elif name == "cols" and ws.cache_cols:
        cols = ws.get(name, shape, dt)
    else:
        cols = ws.temp(name, shape, dt)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i * d:i * d + ho, j * d:j * d + wo]
    return cols.reshape(b, c * k * k, ho * wo)


def _cols_for(x: np.ndarray, p: "ConvLayerParams", ho: int, wo: int, ws: Workspace | None) -> np.ndarray:
    key = _cols_key(x, p)
    if ws is not None and ws.cache_cols and ws.cols_key == key:
        b, c = x.shape[:2]
        return ws.get("cols", (b, c, p.kernel, p.kernel, ho, wo), _acc_dtype(x)).reshape(b, -1, ho * wo)
    cols = _im2col(x, p.kernel, p.dilation, ho, wo, ws)
    if ws is not None and ws.cache_cols:
        ws.cols_key = key
    return cols


def conv2d_forward(x: np.ndarray, p: ConvLayerParams, ws: Workspace | None = None) -> np.ndarray:
    """Valid (unpadded) dilated convolution plus per-channel bias."""
    ho, wo = _check_conv(x, p)
    if ws is not None:
        ws.cols_key = None
    dt = _acc_dtype(x)
    w2 = p.weights.reshape(p.weights.shape[0], -1).astype(dt)
    out = np.matmul(w2, _cols_for(x, p, ho, wo, ws))
    out += p.bias.astype(dt)[None, :, None]
    return out.reshape(x.shape[0], -1, ho, wo)


def conv2d_backward(x: np.ndarray, p: ConvLayerParams, grad_out: np.ndarray, ws: Workspace | None = None):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv2d_forward`.

    ``grad_x`` is the full convolution of ``grad_out`` with the flipped,
    channel-transposed kernel, computed as a valid convolution of the
    zero-padded gradient.
    """
    ho, wo = _check_conv(x, p)
    b = x.shape[0]
    co = p.weights.shape[0]
    if grad_out.shape != (b, co, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output {(b, co, ho, wo)}")
    k, d = p.kernel, p.dilation
    dt = _acc_dtype(x)
    g = grad_out.reshape(b, co, ho * wo).astype(dt, copy=False)
    cols = _cols_for(x, p, ho, wo, ws)
    grad_w = np.zeros((cols.shape[1], co))
    for i in range(b):
        grad_w += cols[i] @ g[i].T
    grad_w = grad_w.T.reshape(p.weights.shape)
    grad_b = g.sum(axis=(0, 2), dtype=np.float64)
    if ws is not None:
        ws.cols_key = None

    m = d * (k - 1)
    if m == 0:
        grad_x = np.matmul(p.weights[:, :, 0, 0].T.astype(dt), g)
    else:
        gp = ws.temp("gpad", (b, co, ho + 2 * m, wo + 2 * m), dt) if ws is not None else \
            np.empty((b, co, ho + 2 * m, wo + 2 * m), dt)
        gp.fill(0.0)
        gp[:, :, m:m + ho, m:m + wo] = grad_out
        flipped = p.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        h, w = x.shape[2:]
        gcols = _im2col(gp, k, d, h, w, ws, name="gcols")
        grad_x = np.matmul(flipped.reshape(x.shape[1], -1).astype(dt), gcols)
    wdt = p.weights.dtype
    return grad_x.reshape(x.shape).astype(dt, copy=False), grad_w.astype(wdt), grad_b.astype(wdt)


# ---------------------------------------------------------------------------
# Batch normalization


def _stats(x: np.ndarray):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    centered = x - mean.astype(x.dtype)[None, :, None, None]
    var = np.einsum("bchw,bchw->c", centered, centered, dtype=np.float64) / (x.size // x.shape[1])
    return mean, var


def _channel(v: np.ndarray, dtype) -> np.ndarray:
    return v.astype(dtype)[None, :, None, None]


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train") -> np.ndarray:
    """Per-channel normalization over (batch, row, col).

    In ``train`` mode the batch statistics are used and the running
    statistics are updated in place as ``m * running + (1 - m) * batch``.
    Statistics are accumulated in float64.
    """
    if x.shape[1] != p.scale.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, batch norm has {p.scale.shape[0]}")
    if mode == "train":
        mean, var = _stats(x)
        m = p.momentum
        p.running_mean[...] = m * p.running_mean + (1 - m) * mean
        p.running_var[...] = m * p.running_var + (1 - m) * var
    elif mode == "eval":
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dt = _acc_dtype(x)
    scale = p.scale.astype(np.float64) / np.sqrt(var + p.epsilon)
    shift = p.shift.astype(np.float64) - mean * scale
    out = x * _channel(scale, dt)
    out += _channel(shift, dt)
    return out


def batchnorm_backward(x: np.ndarray, p: BatchNormParams, grad_out: np.ndarray, mode: str = "train"):
    """Gradients ``(grad_x, grad_scale, grad_shift)``; batch statistics are recomputed from ``x``."""
    dt = _acc_dtype(x)
    if mode == "train":
        mean, var = _stats(x)
    else:
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    g = grad_out.astype(dt, copy=False)
    xhat = (x - _channel(mean, dt)) * _channel(inv, dt)
    grad_shift = g.sum(axis=(0, 2, 3), dtype=np.float64)
    grad_scale = np.einsum("bchw,bchw->c", g, xhat, dtype=np.float64)
    coef = p.scale.astype(np.float64) * inv
    if mode == "train":
        n = x.size // x.shape[1]
        grad_x = g * _channel(coef, dt)
        grad_x -= xhat * _channel(coef * grad_scale / n, dt)
        grad_x -= _channel(coef * grad_shift / n, dt)
    else:
        grad_x = g * _channel(coef, dt)
    wdt = p.scale.dtype
    return grad_x, grad_scale.astype(wdt), grad_shift.astype(wdt)


# ---------------------------------------------------------------------------
# Activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def _check_groups(groups: Sequence[Sequence[int]], channels: int) -> None:
    seen: set[int] = set()
    for group in groups:
        for c in group:
            if c in seen:
                raise ValueError(f"channel {c} appears in more than one softmax group")
            if not 0 <= c < channels:
                raise ValueError(f"channel {c} out of range for {channels} channels")
            seen.add(c)


def grouped_softmax(x: np.ndarray, groups: Sequence[Sequence[int]]) -> np.ndarray:
    """Softmax over the channel axis, applied independently within each group.

    Channels outside every group pass through unchanged.
    """
    _check_groups(groups, x.shape[1])
    out = x.astype(_acc_dtype(x), copy=True)
    for group in groups:
        idx = list(group)
        z = x[:, idx].astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=1, keepdims=True)
        out[:, idx] = z
    return out


def grouped_softmax_backward(y: np.ndarray, groups: Sequence[Sequence[int]], grad_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits given the softmax output ``y``."""
    grad = grad_out.astype(np.float64, copy=True)
    for group in groups:
        idx = list(group)
        yg = y[:, idx].astype(np.float64)
        gg = grad[:, idx]
        grad[:, idx] = yg * (gg - (gg * yg).sum(axis=1, keepdims=True))
    return grad.astype(y.dtype, copy=False)


# ---------------------------------------------------------------------------
# Parameter update


def sgd_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    no_decay: frozenset[str] | set[str] = frozenset(),
) -> None:
    """In-place ``p <- p - lr * (g + weight_decay * p)``; names in ``no_decay`` skip the decay term."""
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        if weight_decay and name not in no_decay:
            g = g + weight_decay * p
        p -= (lr * g).astype(p.dtype)
