"""Ensemble segmentation of whole studies and connected-component clean-up."""

from __future__ import annotations

import hashlib
from dataclasses import replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .segnet import Model, snapshot_bytes
from .trainer import N_CLASSES
from .volume_io import CineStudy, LabelMap

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def largest_cc_6(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest face-connected component of a 3-D binary mask.

    Ties go to the component whose first voxel in C order comes first.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_SIX_CONNECTED)
    if n <= 1:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    # ndimage numbers components in raster order of their first voxel
    return labels == int(np.argmax(sizes))


def postprocess_largest_cc(labels: LabelMap) -> LabelMap:
    """Apply :func:`largest_cc_6` per foreground class; dropped voxels become background."""
    out = labels.labels.copy()
    for c in range(1, N_CLASSES):
        mask = out == c
        if mask.any():
            out[mask & ~largest_cc_6(mask)] = 0
    return LabelMap(out, labels.spacing_mm)


def average_probs(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of probability volumes, summed in the given order in float64."""
    if not maps:
        raise ValueError("need at least one probability map")
    acc = np.zeros(maps[0].shape, dtype=np.float64)
    for m in maps:
        if m.shape != acc.shape:
            raise ValueError(f"probability map shapes differ: {m.shape} vs {acc.shape}")
        acc += m
    return (acc / len(maps)).astype(np.float32)


def snapshot_id(model: Model) -> str:
    return hashlib.sha256(snapshot_bytes(model)).hexdigest()


def predict_probs(model: Model, study: CineStudy, chunk: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Per-phase probability volumes ``[slices, 4, rows, cols]`` from one model (eval mode)."""
    m = model.margin
    x = np.stack([study.ed.data, study.es.data], axis=1)
    x = np.pad(x, ((0, 0), (0, 0), (m, m), (m, m)), mode="reflect")
    out = np.empty((x.shape[0], 2 * N_CLASSES) + study.ed.data.shape[1:], dtype=np.float32)
    for s in range(0, x.shape[0], chunk):
        out[s:s + chunk] = model.forward(x[s:s + chunk], "eval")
    return out[:, :N_CLASSES], out[:, N_CLASSES:]


def segment_study(snapshots: Sequence[Model], study: CineStudy, return_probs: bool = False):
    """Ensemble segmentation of a preprocessed study.

    Every aligned ED/ES slice pair is reflect-padded by the network margin
    and run through every snapshot; the per-phase probabilities are averaged
    (in an order fixed by snapshot content, so the result depends only on
    the multiset of snapshots), arg-maxed, and cleaned up by
    :func:`postprocess_largest_cc`.

    Returns ``(labels_ed, labels_es)`` or, with ``return_probs``,
    ``(labels_ed, labels_es, probs_ed, probs_es)``.
    """
    if not snapshots:
        raise ValueError("need at least one snapshot")
    # the init seed is not part of the architecture
    configs = {replace(m.config, init_seed=0) for m in snapshots}
    if len(configs) != 1:
        raise ValueError("snapshots in an ensemble must share one architecture")
    ordered = sorted(snapshots, key=snapshot_id)
    per_model = [predict_probs(m, study) for m in ordered]
    probs_ed = average_probs([p[0] for p in per_model])
    probs_es = average_probs([p[1] for p in per_model])
    spacing = study.ed.spacing_mm
    labels = []
    for probs in (probs_ed, probs_es):
        hard = np.argmax(probs, axis=1).astype(np.uint8)
        labels.append(postprocess_largest_cc(LabelMap(hard, spacing)))
    if return_probs:
        return labels[0], labels[1], probs_ed, probs_es
    return labels[0], labels[1]
