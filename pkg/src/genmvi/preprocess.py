"""Brain mask, ROI construction and MTsat-to-MTMVI scaling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .volume import LabelVolume, Mask, Volume, mask_from_labels, mean_over_mask

log = logging.getLogger(__name__)

BAP_THRESHOLD = 0.95
TISSUE_GROUPS = ("cGM", "sGM", "WM", "CC")
# CC labels belong to the white-matter tissue class
PARENT = {"cGM": "cGM", "sGM": "sGM", "WM": "WM", "CC": "WM"}
MIN_LOCAL_ROI_VOXELS = 5


@dataclass(frozen=True)
class RoiSet:
    roi_cgm: Mask
    roi_sgm: Mask
    roi_wm: Mask
    roi_wb: Mask
    roi_cc: Mask
    local_rois: dict[str, Mask] = field(default_factory=dict)
    local_region: dict[str, str] = field(default_factory=dict)
    dropped: tuple[str, ...] = ()
    erosion_applied: bool = True

    def tissue(self, name: str) -> Mask:
        return {"cGM": self.roi_cgm, "sGM": self.roi_sgm, "WM": self.roi_wm,
                "WB": self.roi_wb, "CC": self.roi_cc}[name]


@dataclass(frozen=True)
class ScaleResult:
    c: float
    wm_mean_symvf: float
    wm_mean_mtsat: float

    def to_json(self) -> dict:
        return {"c": self.c, "wm_mean_symvf": self.wm_mean_symvf, "wm_mean_mtsat": self.wm_mean_mtsat}


def brain_mask(bap: Volume) -> Mask:
    """Voxels whose brain-area probability is strictly above 0.95."""
    d = bap.data
    if d.min() < 0 or d.max() > 1:
        raise ValueError("brain-area probabilities must lie in [0, 1]")
    return Mask(d > BAP_THRESHOLD)


def erode8(m: Mask) -> Mask:
    """One in-plane erosion with the 3x3 (eight-connected) structuring element.

    A voxel survives only if it and its eight in-plane neighbours are set;
    anything outside the image counts as unset, so border voxels never survive.
    """
    b = m.bits
    nz, ny, nx = b.shape
    p = np.zeros((nz, ny + 2, nx + 2), dtype=bool)
    p[:, 1:-1, 1:-1] = b
    out = np.ones_like(b)
    for dy in range(3):
        for dx in range(3):
            out &= p[:, dy:dy + ny, dx:dx + nx]
    return Mask(out)


def group_of(name: str) -> str:
    return name.split(":", 1)[0]


def build_roiset(labels: LabelVolume, brain: Mask, min_voxels: int = MIN_LOCAL_ROI_VOXELS) -> RoiSet:
    """Tissue, whole-brain, corpus-callosum and cleaned local ROIs.

    Legend names are ``<group>`` or ``<group>:<part>`` with group one of
    cGM, sGM, WM, CC.
    """
    if labels.shape != brain.shape:
        raise ValueError("labels and brain mask shapes differ")
    by_group: dict[str, list[int]] = {g: [] for g in TISSUE_GROUPS}
    for lab, name in labels.legend.items():
        g = group_of(name)
        if lab != 0 and g in by_group:
            by_group[g].append(lab)
    missing = [g for g, labs in by_group.items() if not labs]
    if missing:
        raise ValueError(f"legend has no labels for {missing}")

    def tissue(*groups):
        labs = [lab for g in groups for lab in by_group[g]]
        return mask_from_labels(labels, labs) & brain

    roi_cgm = erode8(tissue("cGM"))
    roi_sgm = erode8(tissue("sGM"))
    roi_wm = erode8(tissue("WM", "CC"))
    roi_wb = roi_cgm | roi_sgm | roi_wm
    roi_cc = mask_from_labels(labels, by_group["CC"]) & roi_wm
    parents = {"cGM": roi_cgm, "sGM": roi_sgm, "WM": roi_wm}

    local, region, dropped = {}, {}, []
    for lab in sorted(labels.legend):
        name = labels.legend[lab]
        g = group_of(name)
        if lab == 0 or g not in PARENT:
            continue
        m = mask_from_labels(labels, [lab]) & parents[PARENT[g]]
        if m.count() < min_voxels:
            log.info("dropping local ROI %s: %d voxels after erosion", name, m.count())
            dropped.append(name)
            continue
        local[name] = m
        region[name] = PARENT[g]
    return RoiSet(roi_cgm, roi_sgm, roi_wm, roi_wb, roi_cc, local, region, tuple(dropped))


def scale_mtsat(mtsat: Volume, symvf: Volume, roi_wm: Mask) -> tuple[Volume, ScaleResult]:
    """Scale MTsat by one constant so its ROI_WM mean equals that of SyMVF."""
    if roi_wm.count() == 0:
        raise ValueError("ROI_WM is empty")
    m_sy = mean_over_mask(symvf, roi_wm)
    m_mt = mean_over_mask(mtsat, roi_wm)
    if not m_mt > 0:
        raise ValueError(f"white-matter MTsat mean must be positive, got {m_mt}")
    c = m_sy / m_mt
    return mtsat.scaled(c, "MTMVI"), ScaleResult(c, m_sy, m_mt)
