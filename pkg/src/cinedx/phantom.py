"""Synthetic ED/ES short-axis studies with exact analytic volumes.

Each slice holds an LV disk, a concentric myocardial annulus and an RV
crescent (an RV disk minus the epicardial disk), inside a body ellipse
with a bright fat rim.  All radii on a slice are scaled by the same taper
factor, so volume ratios and ejection fractions equal the sampled targets
exactly; voxelization is the only source of error.

The geometry bands are made up to give the five classes the qualitative
separations seen clinically (low LV EF for DCM/MINF, thick myocardium for
HCM, large RV for RVA); they are not meant to be anatomically realistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import DIAGNOSES
from .volume_io import CineStudy, CineVolume, LabelMap

INTENSITY = {"air": 0.1, "body": 0.25, "fat": 0.9, "myo": 0.4, "cavity": 0.8}


@dataclass(frozen=True)
class PhantomPreset:
    """Sampling bands for one diagnostic class (lengths in mm, fractions in [0, 1])."""

    tag: str
    lv_radius_ed: tuple[float, float]
    lv_ef: tuple[float, float]
    myo_thickness_ed: tuple[float, float]
    rv_lv_ratio_ed: tuple[float, float]
    rv_ef: tuple[float, float]
    noise_sd: float = 0.05
    n_slices: int = 8
    slice_mm: float = 10.0
    inplane_mm: tuple[float, float] = (1.37, 1.68)
    fov_mm: float = 200.0
    apex_taper: float = 0.5

    def __post_init__(self):
        for name in ("lv_radius_ed", "lv_ef", "myo_thickness_ed", "rv_lv_ratio_ed", "rv_ef", "inplane_mm"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{self.tag}: band {name}={lo, hi} must satisfy 0 < lo <= hi")
        if self.lv_ef[1] >= 1 or self.rv_ef[1] >= 1:
            raise ValueError(f"{self.tag}: ejection fractions must stay below 1")
        if self.n_slices < 1 or self.slice_mm <= 0 or not 0 < self.apex_taper <= 1:
            raise ValueError(f"{self.tag}: invalid slice geometry")
        if self.noise_sd < 0:
            raise ValueError(f"{self.tag}: noise_sd must be >= 0")


PRESETS = {
    "NOR": PhantomPreset("NOR", (24, 27), (0.58, 0.70), (8, 9.5), (0.85, 1.15), (0.45, 0.60)),
    "DCM": PhantomPreset("DCM", (30, 34), (0.10, 0.25), (5, 6.5), (0.60, 0.85), (0.25, 0.45)),
    "HCM": PhantomPreset("HCM", (20, 23), (0.68, 0.80), (13, 15), (0.90, 1.25), (0.50, 0.65)),
    "MINF": PhantomPreset("MINF", (27, 31), (0.30, 0.42), (8, 9.5), (0.60, 0.85), (0.35, 0.50)),
    "RVA": PhantomPreset("RVA", (22, 26), (0.58, 0.70), (8, 9.5), (1.60, 2.10), (0.20, 0.40)),
}


def lens_area(r1: float, r2: float, d: float) -> float:
    """Area of the intersection of two disks with radii ``r1``, ``r2`` and centre distance ``d``."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    k = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    return a1 + a2 - k


RV_OFFSET = 0.4  # RV disk centre sits this fraction of its radius outside the epicardium


def crescent_area(rv_radius: float, epi_radius: float) -> float:
    d = epi_radius + RV_OFFSET * rv_radius
    return math.pi * rv_radius ** 2 - lens_area(rv_radius, epi_radius, d)


def solve_rv_radius(target_area: float, epi_radius: float) -> float:
    """RV disk radius whose crescent (outside the epicardium) has ``target_area``."""
    lo, hi = 0.0, 10.0 * (epi_radius + math.sqrt(target_area))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if crescent_area(mid, epi_radius) < target_area:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PhaseGeometry:
    lv_radius: float
    epi_radius: float
    rv_radius: float

    @property
    def rv_distance(self) -> float:
        return self.epi_radius + RV_OFFSET * self.rv_radius

    def areas(self) -> dict[str, float]:
        return {
            "lv": math.pi * self.lv_radius ** 2,
            "myo": math.pi * (self.epi_radius ** 2 - self.lv_radius ** 2),
            "rv": crescent_area(self.rv_radius, self.epi_radius),
        }

    def scaled(self, f: float) -> "PhaseGeometry":
        return PhaseGeometry(self.lv_radius * f, self.epi_radius * f, self.rv_radius * f)


def sample_geometry(preset: PhantomPreset, rng: np.random.Generator) -> dict:
    u = lambda band: float(rng.uniform(*band))  # noqa: E731
    r_ed = u(preset.lv_radius_ed)
    lv_ef = u(preset.lv_ef)
    t_ed = u(preset.myo_thickness_ed)
    ratio = u(preset.rv_lv_ratio_ed)
    rv_ef = u(preset.rv_ef)
    epi_ed = r_ed + t_ed
    r_es = r_ed * math.sqrt(1.0 - lv_ef)
    # myocardium is incompressible: same annulus area at ES
    epi_es = math.sqrt(r_es ** 2 + epi_ed ** 2 - r_ed ** 2)
    rv_area_ed = ratio * math.pi * r_ed ** 2
    ed = PhaseGeometry(r_ed, epi_ed, solve_rv_radius(rv_area_ed, epi_ed))
    es = PhaseGeometry(r_es, epi_es, solve_rv_radius((1.0 - rv_ef) * rv_area_ed, epi_es))
    return {
        "ED": ed,
        "ES": es,
        "rv_angle": float(rng.uniform(math.radians(160), math.radians(200))),
        "center_jitter": rng.uniform(-4.0, 4.0, size=2),
    }


def taper_factors(preset: PhantomPreset) -> np.ndarray:
    n = preset.n_slices
    s = np.arange(n) / max(n - 1, 1)
    return 1.0 - (1.0 - preset.apex_taper) * s ** 2


def analytic_volumes(geom: dict, preset: PhantomPreset) -> dict[str, float]:
    """Exact disk-stack volumes (ml) and ejection fractions (%) of a sampled geometry."""
    taper2 = float((taper_factors(preset) ** 2).sum())
    out = {}
    for phase in ("ED", "ES"):
        for name, area in geom[phase].areas().items():
            out[f"{name}_{phase.lower()}v"] = area * taper2 * preset.slice_mm / 1000.0
    out["lv_ef"] = 100.0 * (out["lv_edv"] - out["lv_esv"]) / out["lv_edv"]
    out["rv_ef"] = 100.0 * (out["rv_edv"] - out["rv_esv"]) / out["rv_edv"]
    return out


def _render_slice(g: PhaseGeometry, yy: np.ndarray, xx: np.ndarray, center, angle: float,
                  body_axes, fat_mm: float) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = center
    d_lv = np.hypot(yy - cy, xx - cx)
    ry = cy + g.rv_distance * math.sin(angle)
    rx = cx + g.rv_distance * math.cos(angle)
    d_rv = np.hypot(yy - ry, xx - rx)
    lv = d_lv <= g.lv_radius
    myo = (d_lv <= g.epi_radius) & ~lv
    rv = (d_rv <= g.rv_radius) & (d_lv > g.epi_radius)

    fy, fx = yy.mean(), xx.mean()
    a, b = body_axes
    e = ((xx - fx) / a) ** 2 + ((yy - fy) / b) ** 2
    e_inner = ((xx - fx) / (a - fat_mm)) ** 2 + ((yy - fy) / (b - fat_mm)) ** 2
    img = np.full(yy.shape, INTENSITY["air"])
    img[e <= 1] = INTENSITY["fat"]
    img[e_inner <= 1] = INTENSITY["body"]
    img[myo] = INTENSITY["myo"]
    img[lv | rv] = INTENSITY["cavity"]

    lab = np.zeros(yy.shape, np.uint8)
    lab[rv] = 1
    lab[myo] = 2
    lab[lv] = 3
    return img, lab


def generate_study(preset: PhantomPreset, rng: np.random.Generator, patient_id: Optional[str] = None,
                   spacing_mm: Optional[float] = None) -> CineStudy:
    """Sample and render one study; analytic volumes are stored in ``study.extra['truth']``."""
    geom = sample_geometry(preset, rng)
    sp = float(rng.uniform(*preset.inplane_mm)) if spacing_mm is None else float(spacing_mm)
    n = max(8, int(round(preset.fov_mm / sp)))
    coords = (np.arange(n) + 0.5) * sp
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    fov = n * sp
    body_axes = (float(rng.uniform(84, 90)), float(rng.uniform(72, 78)))
    fat_mm = float(rng.uniform(6, 8))
    ed_epi, ed_rv = geom["ED"].epi_radius, geom["ED"].rv_radius
    # centre the LV + RV complex in the field of view
    span_left = geom["ED"].rv_distance + ed_rv
    shift = 0.5 * (span_left - ed_epi)
    ang = geom["rv_angle"]
    center = (fov / 2 - shift * math.sin(ang) + geom["center_jitter"][0],
              fov / 2 - shift * math.cos(ang) + geom["center_jitter"][1])

    vols, labs = {}, {}
    for phase in ("ED", "ES"):
        imgs, slabs = [], []
        for f in taper_factors(preset):
            img, lab = _render_slice(geom[phase].scaled(f), yy, xx, center, ang, body_axes, fat_mm)
            imgs.append(img)
            slabs.append(lab)
        data = np.stack(imgs)
        if preset.noise_sd > 0:
            data = data + rng.normal(0.0, preset.noise_sd, size=data.shape)
        spacing = (preset.slice_mm, sp, sp)
        vols[phase] = CineVolume(data.astype(np.float32), spacing, phase)
        labs[phase] = LabelMap(np.stack(slabs), spacing)

    truth = analytic_volumes(geom, preset)
    return CineStudy(
        patient_id=patient_id or f"phantom_{preset.tag}",
        ed=vols["ED"],
        es=vols["ES"],
        weight_kg=float(np.clip(rng.normal(78, 12), 45, 130)),
        height_cm=float(np.clip(rng.normal(172, 9), 150, 200)),
        reference_labels=(labs["ED"], labs["ES"]),
        diagnosis=preset.tag,
        extra={"phantom": True, "truth": truth},
    )


def generate_cohort(n_per_class: int, seed: int = 0, presets: Optional[dict] = None,
                    **overrides) -> list[CineStudy]:
    """``n_per_class`` studies per class, each with its own seed spawned from ``seed``.

    ``overrides`` replace preset fields for every class (e.g. ``noise_sd=0``).
    """
    if n_per_class < 0:
        raise ValueError("n_per_class must be >= 0")
    presets = presets or PRESETS
    children = np.random.SeedSequence(seed).spawn(n_per_class * len(DIAGNOSES))
    studies = []
    k = 0
    for tag in DIAGNOSES:
        preset = replace(presets[tag], **overrides) if overrides else presets[tag]
        for i in range(n_per_class):
            rng = np.random.default_rng(children[k])
            k += 1
            studies.append(generate_study(preset, rng, patient_id=f"{tag}_{i:03d}"))
    return studies
