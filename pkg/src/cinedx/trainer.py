"""Soft Dice loss, cyclic cosine learning rate, minibatch sampling and the SGD loop."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import sgd_step
from .segnet import Model, SegNetConfig, build, receptive_field
from .volume_io import CineStudy

log = logging.getLogger(__name__)

N_CLASSES = 4
N_OUT = 2 * N_CLASSES
DICE_EPS = 0.0  # softmax outputs are positive, so the denominator is never 0 in training


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 150_000
    cycle_M: int = 10_000
    alpha0: float = 0.2
    batch_size: int = 4
    patch: int = 151
    weight_decay: float = 5e-4
    snapshots_kept: int = 6
    rng_seed: int = 0
    dice_factor2: bool = False
    log_every: int = 1

    def __post_init__(self):
        if self.total_iters < 1 or self.cycle_M < 1:
            raise ValueError("total_iters and cycle_M must be positive")
        if self.total_iters % self.cycle_M:
            raise ValueError(f"cycle_M={self.cycle_M} must divide total_iters={self.total_iters}")
        if self.batch_size < 1 or self.patch < 1 or self.snapshots_kept < 1:
            raise ValueError("batch_size, patch and snapshots_kept must be positive")

    def pad_to(self, net: SegNetConfig) -> int:
        return self.patch + receptive_field(net) - 1

    def to_dict(self) -> dict:
        return asdict(self)


# Scaled-down settings that train in minutes on a single CPU core.
DESK_NET = SegNetConfig(dilations=(1, 1, 2, 4, 8, 16, 1), hidden_width=24)
DESK_TRAIN = TrainConfig(total_iters=600, cycle_M=100, patch=64, alpha0=2.0)


# ---------------------------------------------------------------------------
# Loss


def soft_dice(c_prob: np.ndarray, c_ref: np.ndarray, eps: float = DICE_EPS, factor2: bool = False) -> float:
    """``sum(R*A) / (sum(R) + sum(A) + eps)``; doubled when ``factor2`` is set.

    With the default ``eps = 0`` a perfect prediction scores exactly 0.5
    (1.0 with ``factor2``).
    """
    a = np.asarray(c_prob, dtype=np.float64)
    r = np.asarray(c_ref, dtype=np.float64)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {r.shape}")
    f = 2.0 if factor2 else 1.0
    denom = float(r.sum()) + float(a.sum()) + eps
    # a class absent from both reference and prediction contributes 0
    return f * float((r * a).sum()) / denom if denom > 0 else 0.0


def dice_loss_and_grad(probs: np.ndarray, refs: np.ndarray, eps: float = DICE_EPS,
                       factor2: bool = False) -> tuple[float, np.ndarray]:
    """``1 - mean_c Dice_c`` over all channels, each class pooled over the batch.

    Returns the loss and its gradient with respect to ``probs``.
    """
    if probs.shape != refs.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {refs.shape}")
    n_cls = probs.shape[1]
    axes = (0, 2, 3)
    inter = np.einsum("bchw,bchw->c", probs, refs, dtype=np.float64)
    denom = refs.sum(axis=axes, dtype=np.float64) + probs.sum(axis=axes, dtype=np.float64) + eps
    f = 2.0 if factor2 else 1.0
    live = denom > 0
    safe = np.where(live, denom, 1.0)
    dice = np.where(live, f * inter / safe, 0.0)
    loss = 1.0 - float(dice.mean())
    # d Dice_c / d A = f * (R * S - I) / S^2
    coef = np.where(live, -f / n_cls / safe, 0.0).astype(probs.dtype)[None, :, None, None]
    off = np.where(live, -f / n_cls * inter / safe ** 2, 0.0).astype(probs.dtype)[None, :, None, None]
    grad = refs * coef - off
    return loss, grad.astype(probs.dtype, copy=False)


def dice_loss(probs: np.ndarray, refs: np.ndarray, eps: float = DICE_EPS, factor2: bool = False) -> float:
    return dice_loss_and_grad(probs, refs, eps, factor2)[0]


# ---------------------------------------------------------------------------
# Learning-rate schedule


def cyclic_lr(t: int, alpha0: float, M: int) -> float:
    """Cosine annealing from ``alpha0`` towards 0 over each cycle of ``M`` iterations (``t`` from 1)."""
    if t < 1:
        raise ValueError("iterations are counted from 1")
    return alpha0 / 2.0 * (math.cos(math.pi * ((t - 1) % M) / M) + 1.0)


# ---------------------------------------------------------------------------
# Minibatches


def one_hot_pair(lab_ed: np.ndarray, lab_es: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Eight-channel one-hot reference ``[8, H, W]`` from an ED/ES label slice pair."""
    classes = np.arange(N_CLASSES)[:, None, None]
    return np.concatenate([lab_ed[None] == classes, lab_es[None] == classes]).astype(dtype)


def _extend_to(arr: np.ndarray, size: int) -> np.ndarray:
    """Zero-extend the last two axes symmetrically up to ``size``."""
    pads = [(0, 0)] * (arr.ndim - 2)
    for n in arr.shape[-2:]:
        extra = max(0, size - n)
        pads.append((extra // 2, extra - extra // 2))
    return np.pad(arr, pads) if any(p != (0, 0) for p in pads) else arr


def _training_pairs(studies: Sequence[CineStudy]) -> list[tuple[int, int]]:
    pairs = []
    for i, st in enumerate(studies):
        if st.reference_labels is None:
            raise ValueError(f"{st.patient_id}: training studies need reference labels")
        pairs.extend((i, s) for s in range(st.ed.data.shape[0]))
    if not pairs:
        raise ValueError("empty training set")
    return pairs


def sample_minibatch(studies: Sequence[CineStudy], rng: np.random.Generator, batch_size: int = 4,
                     patch: int = 151, margin: int = 65,
                     pairs: Optional[list[tuple[int, int]]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(inputs [b, 2, patch + 2*margin, ...], one-hot refs [b, 8, patch, patch])``.

    Each sample picks a (study, slice) pair uniformly, crops a random
    ``patch`` window (slices smaller than the patch are zero-extended
    first), surrounds it with ``margin`` voxels of context from the
    reflect-padded slice, and rotates input and reference by the same
    random multiple of 90 degrees.  ``studies`` must already be preprocessed.
    """
    if pairs is None:
        pairs = _training_pairs(studies)
    side = patch + 2 * margin
    x = np.empty((batch_size, 2, side, side), dtype=np.float32)
    y = np.empty((batch_size, N_OUT, patch, patch), dtype=np.float32)
    for b in range(batch_size):
        si, sl = pairs[int(rng.integers(len(pairs)))]
        st = studies[si]
        img = _extend_to(np.stack([st.ed.data[sl], st.es.data[sl]]), patch)
        lab = _extend_to(np.stack([st.reference_labels[0].labels[sl], st.reference_labels[1].labels[sl]]), patch)
        r0 = int(rng.integers(img.shape[1] - patch + 1))
        c0 = int(rng.integers(img.shape[2] - patch + 1))
        k = int(rng.integers(4))
        padded = np.pad(img, ((0, 0), (margin, margin), (margin, margin)), mode="reflect")
        win = padded[:, r0:r0 + side, c0:c0 + side]
        ref = one_hot_pair(lab[0, r0:r0 + patch, c0:c0 + patch], lab[1, r0:r0 + patch, c0:c0 + patch])
        x[b] = np.rot90(win, k, axes=(1, 2))
        y[b] = np.rot90(ref, k, axes=(1, 2))
    return x, y


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class Snapshot:
    iteration: int
    model: Model


def train(studies: Sequence[CineStudy], net_config: SegNetConfig, train_config: TrainConfig,
          log_path=None, progress: Optional[Callable[[int, float, float], None]] = None) -> list[Snapshot]:
    """Run SGD with the cyclic learning rate; return the last ``snapshots_kept`` snapshots.

    A snapshot is taken at every iteration ``t`` with ``t % cycle_M == 0``,
    i.e. just before the learning rate jumps back to ``alpha0``.
    """
    tc = train_config
    model = build(net_config, input_extent=tc.pad_to(net_config))
    pairs = _training_pairs(studies)
    rng = np.random.default_rng(tc.rng_seed)
    margin = model.margin
    no_decay = model.no_decay()
    kept: deque[Snapshot] = deque(maxlen=tc.snapshots_kept)

    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "lr", "loss"])
    try:
        for t in range(1, tc.total_iters + 1):
            lr = cyclic_lr(t, tc.alpha0, tc.cycle_M)
            x, ref = sample_minibatch(studies, rng, tc.batch_size, tc.patch, margin, pairs)
            probs = model.forward(x, "train")
            loss, g = dice_loss_and_grad(probs, ref, factor2=tc.dice_factor2)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss became non-finite at iteration {t}")
            grads, _ = model.backward(g)
            sgd_step(model.parameters(), grads, lr, tc.weight_decay, no_decay)
            if writer is not None and (t % tc.log_every == 0 or t == tc.total_iters):
                writer.writerow([t, repr(lr), repr(loss)])
            if progress is not None:
                progress(t, lr, loss)
            if t % tc.cycle_M == 0:
                kept.append(Snapshot(t, model.copy()))
                log.info("snapshot at iteration %d (loss %.4f)", t, loss)
    finally:
        if fh is not None:
            fh.close()
    return list(kept)
