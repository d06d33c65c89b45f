"""Study directories on disk, plus in-plane resampling and intensity normalization.

A study directory holds ``meta.json`` and one raw file per array::

    meta.json        patient metadata, per-phase shape/spacing/file names
    ed.raw, es.raw   little-endian float32, C order [slice, row, col]
    ed_labels.raw    unsigned 8-bit labels, same layout (optional)
    es_labels.raw

Label-only directories (segmentation outputs) use the same ``meta.json``
schema with ``"image": null``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
META_NAME = "meta.json"
PHASES = ("ED", "ES")
N_LABELS = 4

_F32 = np.dtype("<f4")
_U8 = np.dtype("u1")


class StudyFormatError(ValueError):
    """Raised when a study directory is missing files or violates the format."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise StudyFormatError(f"spacing must be three positive reals, got {spacing}")
    return spacing


@dataclass
class CineVolume:
    """One cardiac phase: intensities on a [slices, rows, cols] grid."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    phase: str = "ED"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise StudyFormatError(f"volume must be a non-empty 3-D grid, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise StudyFormatError("volume contains non-finite values")
        self.spacing_mm = _check_spacing(self.spacing_mm)
        if self.phase not in PHASES:
            raise StudyFormatError(f"unknown phase {self.phase!r}")


@dataclass
class LabelMap:
    """Integer labels {0=BG, 1=RV, 2=Myo, 3=LV} on a [slices, rows, cols] grid."""

    labels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise StudyFormatError(f"label map must be 3-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= N_LABELS):
            raise StudyFormatError(
                f"label values must lie in 0..{N_LABELS - 1}, found {int(labels.min())}..{int(labels.max())}"
            )
        self.labels = labels.astype(np.uint8)
        self.spacing_mm = _check_spacing(self.spacing_mm)


@dataclass
class CineStudy:
    """A patient: paired ED/ES volumes, metadata, optional reference labels."""

    patient_id: str
    ed: CineVolume
    es: CineVolume
    weight_kg: float
    height_cm: float
    reference_labels: Optional[tuple[LabelMap, LabelMap]] = None
    diagnosis: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.weight_kg > 0 and self.height_cm > 0):
            raise StudyFormatError(f"{self.patient_id}: weight and height must be positive")
        if self.ed.data.shape[0] != self.es.data.shape[0]:
            raise StudyFormatError(f"{self.patient_id}: ED and ES slice counts differ")
        if self.ed.spacing_mm != self.es.spacing_mm:
            raise StudyFormatError(f"{self.patient_id}: ED and ES spacing differ")
        if self.reference_labels is not None:
            for vol, lab in zip((self.ed, self.es), self.reference_labels):
                if lab.labels.shape != vol.data.shape:
                    raise StudyFormatError(
                        f"{self.patient_id}: {vol.phase} labels {lab.labels.shape} "
                        f"do not match volume {vol.data.shape}"
                    )


# ---------------------------------------------------------------------------
# Disk format


def _read_raw(path: Path, dtype: np.dtype, shape: Sequence[int]) -> np.ndarray:
    if not path.is_file():
        raise StudyFormatError(f"missing raw file {path}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise StudyFormatError(
            f"{path.name}: size mismatch, header implies {expected} bytes but file has {actual}"
        )
    return np.fromfile(path, dtype=dtype).reshape(shape)


def _write_raw(path: Path, array: np.ndarray, dtype: np.dtype) -> None:
    path.write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_meta(path: Path) -> dict:
    meta_path = Path(path) / META_NAME
    if not meta_path.is_file():
        raise StudyFormatError(f"missing {META_NAME} in {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise StudyFormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise StudyFormatError(
            f"{meta_path}: unsupported format_version {meta.get('format_version')!r}"
        )
    for phase in PHASES:
        if phase not in meta.get("phases", {}):
            raise StudyFormatError(f"{meta_path}: no entry for phase {phase}")
    return meta


def _write_meta(path: Path, meta: dict) -> None:
    (path / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def save_study(study: CineStudy, path) -> Path:
    """Write ``study`` to directory ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    phases = {}
    labels = study.reference_labels or (None, None)
    for vol, lab in zip((study.ed, study.es), labels):
        stem = vol.phase.lower()
        entry = {
            "shape": list(vol.data.shape),
            "spacing_mm": list(vol.spacing_mm),
            "image": f"{stem}.raw",
            "labels": None,
        }
        _write_raw(path / entry["image"], vol.data, _F32)
        if lab is not None:
            entry["labels"] = f"{stem}_labels.raw"
            _write_raw(path / entry["labels"], lab.labels, _U8)
        phases[vol.phase] = entry
    meta = {
        "format_version": FORMAT_VERSION,
        "patient_id": study.patient_id,
        "weight_kg": study.weight_kg,
        "height_cm": study.height_cm,
        "diagnosis": study.diagnosis,
        "extra": study.extra,
        "phases": phases,
    }
    _write_meta(path, meta)
    return path


def load_study(path) -> CineStudy:
    """Read and validate a study directory written by :func:`save_study`."""
    path = Path(path)
    meta = _read_meta(path)
    vols, labs = {}, {}
    for phase in PHASES:
        entry = meta["phases"][phase]
        shape = tuple(int(s) for s in entry["shape"])
        spacing = _check_spacing(entry["spacing_mm"])
        if not entry.get("image"):
            raise StudyFormatError(f"{path}: phase {phase} has no image file")
        vols[phase] = CineVolume(_read_raw(path / entry["image"], _F32, shape), spacing, phase)
        if entry.get("labels"):
            labs[phase] = LabelMap(_read_raw(path / entry["labels"], _U8, shape), spacing)
    reference = None
    if labs:
        if len(labs) != 2:
            raise StudyFormatError(f"{path}: reference labels present for only one phase")
        reference = (labs["ED"], labs["ES"])
    return CineStudy(
        patient_id=str(meta["patient_id"]),
        ed=vols["ED"],
        es=vols["ES"],
        weight_kg=float(meta["weight_kg"]),
        height_cm=float(meta["height_cm"]),
        reference_labels=reference,
        diagnosis=meta.get("diagnosis"),
        extra=meta.get("extra") or {},
    )


def save_labels(path, patient_id: str, labels_ed: LabelMap, labels_es: LabelMap,
                probs: Optional[tuple[np.ndarray, np.ndarray]] = None) -> Path:
    """Write a label-only study directory; ``probs`` adds [slices, 4, rows, cols] float32 dumps."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    phases = {}
    for i, (phase, lab) in enumerate(zip(PHASES, (labels_ed, labels_es))):
        stem = phase.lower()
        entry = {
            "shape": list(lab.labels.shape),
            "spacing_mm": list(lab.spacing_mm),
            "image": None,
            "labels": f"{stem}_labels.raw",
        }
        _write_raw(path / entry["labels"], lab.labels, _U8)
        if probs is not None:
            entry["probs"] = f"{stem}_probs.raw"
            entry["probs_shape"] = list(probs[i].shape)
            _write_raw(path / entry["probs"], probs[i], _F32)
        phases[phase] = entry
    _write_meta(path, {"format_version": FORMAT_VERSION, "patient_id": patient_id, "phases": phases})
    return path


def load_labels(path) -> tuple[str, LabelMap, LabelMap]:
    """Return ``(patient_id, ED labels, ES labels)`` from a study or label-only directory."""
    path = Path(path)
    meta = _read_meta(path)
    out = []
    for phase in PHASES:
        entry = meta["phases"][phase]
        if not entry.get("labels"):
            raise StudyFormatError(f"{path}: phase {phase} has no label file")
        shape = tuple(int(s) for s in entry["shape"])
        out.append(LabelMap(_read_raw(path / entry["labels"], _U8, shape), entry["spacing_mm"]))
    return str(meta["patient_id"]), out[0], out[1]


def load_probs(path) -> tuple[np.ndarray, np.ndarray]:
    """Read the optional probability dumps of a label-only directory."""
    path = Path(path)
    meta = _read_meta(path)
    out = []
    for phase in PHASES:
        entry = meta["phases"][phase]
        if not entry.get("probs"):
            raise StudyFormatError(f"{path}: phase {phase} has no probability dump")
        out.append(_read_raw(path / entry["probs"], _F32, entry["probs_shape"]))
    return out[0], out[1]


def list_study_dirs(root) -> list[Path]:
    """Sorted subdirectories of ``root`` that contain a ``meta.json``."""
    root = Path(root)
    if not root.is_dir():
        raise StudyFormatError(f"not a directory: {root}")
    return sorted(p for p in root.iterdir() if (p / META_NAME).is_file())


# ---------------------------------------------------------------------------
# Preprocessing


def _resampled_size(n: int, spacing: float, target: float) -> int:
    return max(1, int(math.floor(n * spacing / target + 0.5)))


def _source_coords(n_out: int, n_in: int, spacing: float, target: float) -> np.ndarray:
    # pixel centres aligned so the physical extent is preserved; edges replicate
    s = (np.arange(n_out, dtype=np.float64) + 0.5) * (target / spacing) - 0.5
    return np.clip(s, 0.0, n_in - 1)


def _linear_axis(data: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, data.shape[axis] - 1)
    frac = coords - lo
    shape = [1] * data.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    return a + (b - a) * frac


def resample_inplane(vol: CineVolume, target_mm: float = 1.4) -> CineVolume:
    """Bilinear in-plane resampling of every slice to ``target_mm`` spacing.

    The output grid has ``round(n * spacing / target_mm)`` rows/cols; the
    slice axis is left alone.
    """
    if not target_mm > 0:
        raise ValueError("target_mm must be positive")
    z, y, x = vol.spacing_mm
    _, rows, cols = vol.data.shape
    rows_out = _resampled_size(rows, y, target_mm)
    cols_out = _resampled_size(cols, x, target_mm)
    data = vol.data.astype(np.float64)
    data = _linear_axis(data, _source_coords(rows_out, rows, y, target_mm), axis=1)
    data = _linear_axis(data, _source_coords(cols_out, cols, x, target_mm), axis=2)
    return CineVolume(data.astype(np.float32), (z, float(target_mm), float(target_mm)), vol.phase)


def resample_labels(lab: LabelMap, target_mm: float = 1.4) -> LabelMap:
    """Nearest-neighbour counterpart of :func:`resample_inplane` for label maps."""
    if not target_mm > 0:
        raise ValueError("target_mm must be positive")
    z, y, x = lab.spacing_mm
    _, rows, cols = lab.labels.shape
    ri = np.floor(_source_coords(_resampled_size(rows, y, target_mm), rows, y, target_mm) + 0.5)
    ci = np.floor(_source_coords(_resampled_size(cols, x, target_mm), cols, x, target_mm) + 0.5)
    out = lab.labels[:, ri.astype(np.intp)][:, :, ci.astype(np.intp)]
    return LabelMap(out, (z, float(target_mm), float(target_mm)))


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile at rank ``q/100 * (n - 1)`` of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0 <= q <= 100:
        raise ValueError(f"q must lie in [0, 100], got {q}")
    pos = q / 100.0 * (v.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (v[hi] - v[lo]) * (pos - lo))


def normalize_intensity(vol: CineVolume, low_q: float = 5.0, high_q: float = 95.0) -> CineVolume:
    """Map the volume's 5th..95th percentile range onto [0, 1], clamping outside it.

    A volume whose two percentiles coincide maps to all zeros.
    """
    p_lo = percentile(vol.data, low_q)
    p_hi = percentile(vol.data, high_q)
    if p_hi <= p_lo:
        return replace(vol, data=np.zeros_like(vol.data))
    out = (vol.data.astype(np.float64) - p_lo) / (p_hi - p_lo)
    return replace(vol, data=np.clip(out, 0.0, 1.0).astype(np.float32))


def preprocess_study(study: CineStudy, target_mm: float = 1.4) -> CineStudy:
    """Resample both phases (and reference labels) in-plane, then normalize intensities."""
    ed = normalize_intensity(resample_inplane(study.ed, target_mm))
    es = normalize_intensity(resample_inplane(study.es, target_mm))
    refs = None
    if study.reference_labels is not None:
        refs = tuple(resample_labels(lab, target_mm) for lab in study.reference_labels)
    return replace(study, ed=ed, es=es, reference_labels=refs)
