"""Dilated fully-convolutional segmentation network and its snapshot file format.

Hidden layers are ``conv3x3(dilation) -> batch norm -> ReLU``; a 1x1 conv maps
to eight channels which are softmax-normalized in two groups of four:
channels 0-3 are ED (BG, RV, Myo, LV), channels 4-7 the same classes at ES.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import CLASS_NAMES
from .autodiff import (
    BatchNormParams,
    ConvLayerParams,
    Workspace,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    grouped_softmax,
    grouped_softmax_backward,
    relu,
    relu_backward,
)

SOFTMAX_GROUPS = ((0, 1, 2, 3), (4, 5, 6, 7))
SNAPSHOT_MAGIC = b"CINEDXSN"
SNAPSHOT_VERSION = 1
HIDDEN_KERNEL = 3


class SnapshotFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    dilations: tuple[int, ...] = (1, 1, 2, 4, 8, 16, 32, 1)
    hidden_width: int = 32
    in_channels: int = 2
    out_channels: int = 8
    init_seed: int = 0
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be a non-empty list of positive integers")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegNetConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def receptive_field(config: SegNetConfig, kernel: int = HIDDEN_KERNEL) -> int:
    """Side length of the input window seen by one output voxel."""
    return 1 + (kernel - 1) * sum(config.dilations)


@dataclass
class Model:
    config: SegNetConfig
    hidden: list[tuple[ConvLayerParams, BatchNormParams]]
    output: ConvLayerParams
    _cache: Optional[dict] = field(default=None, repr=False, compare=False)
    _workspaces: list = field(default_factory=list, repr=False, compare=False)
    # keep each layer's im2col matrix between forward and backward (memory for speed)
    cache_cols: bool = field(default=True, repr=False, compare=False)

    @property
    def margin(self) -> int:
        """Voxels lost per side by the valid convolutions."""
        return (receptive_field(self.config) - 1) // 2

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name, in a fixed order (live references)."""
        out = {}
        for i, (conv, bn) in enumerate(self.hidden):
            out[f"conv{i}.weights"] = conv.weights
            out[f"conv{i}.bias"] = conv.bias
            out[f"bn{i}.scale"] = bn.scale
            out[f"bn{i}.shift"] = bn.shift
        out["out.weights"] = self.output.weights
        out["out.bias"] = self.output.bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (_, bn) in enumerate(self.hidden):
            out[f"bn{i}.running_mean"] = bn.running_mean
            out[f"bn{i}.running_var"] = bn.running_var
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def no_decay(self) -> frozenset[str]:
        return frozenset(n for n in self.parameters() if n.startswith("bn"))

    def forward(self, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
        """Class probabilities ``[b, 8, H - rf + 1, W - rf + 1]`` for input ``[b, 2, H, W]``.

        ``train`` mode uses batch statistics, updates running statistics and
        keeps the activations needed by :meth:`backward`.
        """
        rf = receptive_field(self.config)
        if batch.ndim != 4 or batch.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected [b, {self.config.in_channels}, H, W] input, got {batch.shape}"
            )
        if min(batch.shape[2:]) < rf:
            raise ValueError(f"input {batch.shape[2]}x{batch.shape[3]} smaller than receptive field {rf}")
        keep = mode == "train"
        cache = {"inputs": [], "pre_bn": [], "probs": None}
        if keep and len(self._workspaces) != len(self.hidden) + 1:
            scratch = Workspace()
            self._workspaces = [Workspace(scratch, self.cache_cols) for _ in range(len(self.hidden) + 1)]
        ws = self._workspaces if keep else [None] * (len(self.hidden) + 1)
        h = batch
        for i, (conv, bn) in enumerate(self.hidden):
            z = conv2d_forward(h, conv, ws[i])
            if keep:
                cache["inputs"].append(h)
                cache["pre_bn"].append(z)
            h = relu(batchnorm_forward(z, bn, mode))
        logits = conv2d_forward(h, self.output, ws[-1])
        probs = grouped_softmax(logits, SOFTMAX_GROUPS)
        if keep:
            cache["inputs"].append(h)
            cache["probs"] = probs
            self._cache = cache
        else:
            self._cache = None
        return probs

    def backward(self, grad_probs: np.ndarray, mode: str = "train") -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Back-propagate from the last train-mode :meth:`forward`.

        Returns ``(grads by parameter name, gradient w.r.t. the input batch)``.
        """
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward(..., mode='train')")
        cache = self._cache
        ws = self._workspaces
        grads: dict[str, np.ndarray] = {}
        g = grouped_softmax_backward(cache["probs"], SOFTMAX_GROUPS, grad_probs)
        g, grads["out.weights"], grads["out.bias"] = conv2d_backward(
            cache["inputs"][-1], self.output, g, ws[-1])
        for i in range(len(self.hidden) - 1, -1, -1):
            conv, bn = self.hidden[i]
            g = relu_backward(cache["inputs"][i + 1], g)
            g, grads[f"bn{i}.scale"], grads[f"bn{i}.shift"] = batchnorm_backward(cache["pre_bn"][i], bn, g, mode)
            g, grads[f"conv{i}.weights"], grads[f"conv{i}.bias"] = conv2d_backward(
                cache["inputs"][i], conv, g, ws[i])
        self._cache = None
        return grads, g

    def copy(self) -> "Model":
        hidden = [
            (
                ConvLayerParams(c.weights.copy(), c.bias.copy(), c.dilation),
                BatchNormParams(b.scale.copy(), b.shift.copy(), b.running_mean.copy(),
                                b.running_var.copy(), b.momentum, b.epsilon),
            )
            for c, b in self.hidden
        ]
        out = ConvLayerParams(self.output.weights.copy(), self.output.bias.copy(), self.output.dilation)
        return Model(self.config, hidden, out)


def _he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def build(config: SegNetConfig = SegNetConfig(), input_extent: Optional[int] = None) -> Model:
    """Create a freshly initialized model.

    Conv weights are drawn from N(0, 2 / fan_in) with ``config.init_seed``;
    biases start at zero and batch norm at the identity transform.
    """
    rf = receptive_field(config)
    if input_extent is not None and rf > input_extent:
        raise ValueError(f"receptive field {rf} exceeds padded input extent {input_extent}")
    rng = np.random.default_rng(config.init_seed)
    hidden = []
    c_in = config.in_channels
    for d in config.dilations:
        w = _he_normal(rng, (config.hidden_width, c_in, HIDDEN_KERNEL, HIDDEN_KERNEL))
        conv = ConvLayerParams(w, np.zeros(config.hidden_width, np.float32), d)
        bn = BatchNormParams.identity(config.hidden_width, momentum=config.bn_momentum,
                                      epsilon=config.bn_epsilon)
        hidden.append((conv, bn))
        c_in = config.hidden_width
    w = _he_normal(rng, (config.out_channels, c_in, 1, 1))
    output = ConvLayerParams(w, np.zeros(config.out_channels, np.float32), 1)
    return Model(config, hidden, output)


def forward(model: Model, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
    return model.forward(batch, mode)


# ---------------------------------------------------------------------------
# Snapshot files: magic, u32 version, u32 header length, JSON header, then
# little-endian float32 blobs in header order.


def snapshot_bytes(model: Model, meta: Optional[dict] = None) -> bytes:
    state = model.state()
    header = {
        "config": model.config.to_dict(),
        "channel_order": {"ED": list(CLASS_NAMES), "ES": list(CLASS_NAMES)},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in state.items()],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<II", SNAPSHOT_VERSION, len(head)))
    buf.write(head)
    for a in state.values():
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def save_snapshot(model: Model, path, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(snapshot_bytes(model, meta))
    return path


def read_snapshot_header(raw: bytes) -> tuple[dict, int]:
    if raw[:len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise SnapshotFormatError("not a snapshot file (bad magic bytes)")
    pos = len(SNAPSHOT_MAGIC)
    if len(raw) < pos + 8:
        raise SnapshotFormatError("truncated snapshot header")
    version, head_len = struct.unpack_from("<II", raw, pos)
    if version != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    pos += 8
    if len(raw) < pos + head_len:
        raise SnapshotFormatError("truncated snapshot header")
    try:
        header = json.loads(raw[pos:pos + head_len])
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError(f"corrupt snapshot header: {exc}") from exc
    return header, pos + head_len


def load_snapshot(path) -> Model:
    raw = Path(path).read_bytes()
    header, pos = read_snapshot_header(raw)
    model = build(SegNetConfig.from_dict(header["config"]))
    state = model.state()
    names = [t["name"] for t in header["tensors"]]
    if names != list(state):
        raise SnapshotFormatError("snapshot tensors do not match the declared architecture")
    for t in header["tensors"]:
        target = state[t["name"]]
        if tuple(t["shape"]) != target.shape:
            raise SnapshotFormatError(f"{t['name']}: shape {t['shape']} != {list(target.shape)}")
        nbytes = target.size * 4
        if len(raw) < pos + nbytes:
            raise SnapshotFormatError(f"truncated snapshot at tensor {t['name']}")
        target[...] = np.frombuffer(raw, dtype="<f4", count=target.size, offset=pos).reshape(target.shape)
        pos += nbytes
    if pos != len(raw):
        raise SnapshotFormatError("trailing bytes after last tensor")
    return model
