"""Overlap, surface distance, volumetry and agreement statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume_io import LabelMap

MYO_DENSITY_G_PER_ML = 1.05
STRUCTURES = {"RV": 1, "Myo": 2, "LV": 3}

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given input (empty mask, zero variance, EDV = 0)."""


def dice_coef(a: np.ndarray, b: np.ndarray) -> float:
    """``2|A&B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbour (outside the grid counts)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~eroded


def _directed(src: np.ndarray, dst: np.ndarray, tree: cKDTree) -> float:
    d_nn, _ = tree.query(src, k=1)
    worst = 0.0
    # re-evaluate every tied candidate with the plain formula so the result
    # does not depend on the tree's internal arithmetic
    candidates = tree.query_ball_point(src, d_nn * (1 + 1e-9) + 1e-12)
    for p, idx in zip(src, candidates):
        diff = dst[idx] - p
        best = float(np.sqrt((diff * diff).sum(axis=1)).min())
        if best > worst:
            worst = best
    return worst


def hausdorff_mm(a: np.ndarray, b: np.ndarray, spacing: Sequence[float]) -> float:
    """Symmetric Hausdorff distance between the boundary voxel centres of two 3-D masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetricError("Hausdorff distance is undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary_voxels(a)) * sp
    pb = np.argwhere(boundary_voxels(b)) * sp
    return max(_directed(pa, pb, cKDTree(pb)), _directed(pb, pa, cKDTree(pa)))


@dataclass
class StructureQuantification:
    lv_edv: float
    lv_esv: float
    rv_edv: float
    rv_esv: float
    myo_edv: float
    myo_esv: float
    myo_mass_ed: float
    myo_mass_es: float
    lv_ef: float
    rv_ef: float
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def volume_ml(count: int, spacing: Sequence[float]) -> float:
    """Volume of ``count`` voxels, using decimal arithmetic on the spacing values."""
    vox = Decimal(1)
    for s in spacing:
        vox *= Decimal(repr(float(s)))
    return float(Decimal(int(count)) * vox / Decimal(1000))


def ejection_fraction(edv: float, esv: float) -> float:
    if edv <= 0:
        raise UndefinedMetricError("ejection fraction is undefined for EDV = 0")
    return 100.0 * (edv - esv) / edv


def quantify(labels_ed: LabelMap | np.ndarray, labels_es: LabelMap | np.ndarray,
             spacing: Sequence[float] | None = None,
             density: float = MYO_DENSITY_G_PER_ML) -> StructureQuantification:
    """Volumes (ml), myocardial mass (g) and ejection fractions (%) from an ED/ES pair."""
    if isinstance(labels_ed, LabelMap):
        spacing = spacing or labels_ed.spacing_mm
        labels_ed = labels_ed.labels
    if isinstance(labels_es, LabelMap):
        labels_es = labels_es.labels
    if spacing is None:
        raise ValueError("spacing is required for raw label arrays")
    vol = {}
    for phase, lab in (("ed", labels_ed), ("es", labels_es)):
        for name, c in STRUCTURES.items():
            vol[f"{name.lower()}_{phase}v"] = volume_ml(int((np.asarray(lab) == c).sum()), spacing)
    q = StructureQuantification(
        lv_edv=vol["lv_edv"], lv_esv=vol["lv_esv"],
        rv_edv=vol["rv_edv"], rv_esv=vol["rv_esv"],
        myo_edv=vol["myo_edv"], myo_esv=vol["myo_esv"],
        myo_mass_ed=vol["myo_edv"] * density, myo_mass_es=vol["myo_esv"] * density,
        lv_ef=ejection_fraction(vol["lv_edv"], vol["lv_esv"]),
        rv_ef=ejection_fraction(vol["rv_edv"], vol["rv_esv"]),
    )
    for name in ("lv", "rv"):
        if getattr(q, f"{name}_esv") > getattr(q, f"{name}_edv"):
            q.flags.append(f"{name}_esv_exceeds_edv")
    return q


@dataclass
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    sd: float


def bland_altman(pairs: Sequence[tuple[float, float]]) -> BlandAltman:
    """Agreement of ``(reference, automatic)`` pairs; differences are automatic - reference."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        raise UndefinedMetricError("Bland-Altman needs at least one pair")
    d = arr[:, 1] - arr[:, 0]
    bias = float(d.mean())
    sd = float(d.std(ddof=1)) if len(d) > 1 else 0.0
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd, sd)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length sequences of at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float((xc * xc).sum())
    syy = float((yc * yc).sum())
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("correlation is undefined for a constant series")
    r = float((xc * yc).sum()) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def confusion_and_accuracy(true_labels: Sequence, predicted_labels: Sequence,
                           classes: Sequence) -> tuple[np.ndarray, float]:
    """Confusion matrix (rows = reference, columns = prediction) and overall accuracy."""
    index = {c: i for i, c in enumerate(classes)}
    if len(true_labels) != len(predicted_labels):
        raise ValueError("label sequences differ in length")
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        cm[index[t], index[p]] += 1
    n = int(cm.sum())
    return cm, (float(np.trace(cm)) / n if n else 0.0)


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
