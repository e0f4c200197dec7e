"""Synthetic pre-registered subjects with a known myelin ground truth.

Each slice holds an elliptical brain: an outer cortical ribbon of wavy
thickness, white matter inside it, two deep grey-matter blobs and a
corpus-callosum-like bridge. Relaxometry (R1, R2, PD) is drawn per tissue.
True myelin is the pixel-wise SyMVF stand-in plus a per-tissue offset plus a
context term that grows with depth into white matter. The context term is
invisible to any pixel-wise map, which is what the CNN is meant to recover.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Subject, Volume

TISSUES = {0: "background/CSF", 1: "cGM", 2: "sGM", 3: "WM", 4: "CC"}
TISSUE_KEYS = ("CSF", "cGM", "sGM", "WM", "CC")
MIN_INPLANE = 48
N_CGM_SECTORS = 8
N_WM_SECTORS = 4
CC_PARTS = ("genu", "body", "splenium")


@dataclass(frozen=True)
class TissueParams:
    r1: float
    r2: float
    pd: float
    sd: tuple[float, float, float]
    mvi_offset: float = 0.0

    def __post_init__(self):
        if min(self.r1, self.r2, self.pd) <= 0 or min(self.sd) < 0:
            raise ValueError("tissue means must be positive and sds non-negative")


@dataclass(frozen=True)
class PhantomConfig:
    tissue_params: dict
    n_subjects: int = 8
    shape: tuple[int, int, int] = (12, 64, 64)
    seed: int = 0
    noise_sd_mtmvi: float = 0.02
    context_gain: float = 0.15
    context_scale_vox: float = 4.0
    relax_true_fraction: float = 0.5
    geometry_jitter: float = 0.08
    voxel_mm: tuple[float, float, float] = (4.0, 1.0, 1.0)

    def __post_init__(self):
        tp = {k: v if isinstance(v, TissueParams) else TissueParams(**{**v, "sd": tuple(v["sd"])})
              for k, v in self.tissue_params.items()}
        missing = set(TISSUE_KEYS) - set(tp)
        if missing:
            raise ValueError(f"tissue_params lacks {sorted(missing)}")
        object.__setattr__(self, "tissue_params", tp)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "voxel_mm", tuple(float(s) for s in self.voxel_mm))
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be at least 2")
        if min(self.noise_sd_mtmvi, self.context_gain, self.geometry_jitter) < 0:
            raise ValueError("noise, gain and jitter must be non-negative")
        if not 0.0 <= self.relax_true_fraction <= 1.0:
            raise ValueError("relax_true_fraction must lie in [0, 1]")
        if self.context_scale_vox <= 0:
            raise ValueError("context_scale_vox must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**d)

    @classmethod
    def default(cls, **overrides) -> "PhantomConfig":
        d = json.loads(resources.files("genmvi").joinpath("data/default_config.json").read_text())["phantom"]
        d.update(overrides)
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["voxel_mm"] = list(self.voxel_mm)
        d["tissue_params"] = {k: {**asdict(v), "sd": list(v.sd)} for k, v in self.tissue_params.items()}
        return d


@dataclass(frozen=True)
class GroundTruth:
    mvi_true: Volume
    tissue: LabelVolume


def symvf_standin(r1, r2, pd):
    """Pixel-wise myelin-fraction map standing in for the proprietary lookup table.

    ``0.6 * sigmoid(2.5 (R1 - 1) + 0.15 (R2 - 13) - 5 (PD - 0.72) - 0.4)``:
    smooth, increasing in R1 and R2, decreasing in PD, bounded by [0, 0.6].
    Works elementwise on scalars or arrays and returns float32.
    """
    r1 = np.asarray(r1, np.float64)
    r2 = np.asarray(r2, np.float64)
    pd = np.asarray(pd, np.float64)
    z = 2.5 * (r1 - 1.0) + 0.15 * (r2 - 13.0) - 5.0 * (pd - 0.72) - 0.4
    # 0.5 * (1 + tanh(z / 2)) is the logistic function without overflow
    return (0.3 * (1.0 + np.tanh(0.5 * z))).astype(np.float32)


def _subject_rngs(seed: int, index: int):
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)])
    geo, val = ss.spawn(2)
    return np.random.default_rng(geo), np.random.default_rng(val)


def _geometry(cfg: PhantomConfig, rng: np.random.Generator):
    """Integer tissue map and local parcellation, shape ``cfg.shape``."""
    nz, ny, nx = cfg.shape
    j = cfg.geometry_jitter

    def jit(scale=1.0):
        return float(np.clip(rng.normal(0.0, j * scale), -3 * j * scale, 3 * j * scale))

    cy = (ny - 1) / 2 + jit() * ny / 4
    cx = (nx - 1) / 2 + jit() * nx / 4
    ry0 = 0.42 * ny * (1 + jit())
    rx0 = 0.38 * nx * (1 + jit())
    thick0 = 0.075 * min(ny, nx) * (1 + jit(2))
    fold_phase = rng.uniform(0, 2 * np.pi)
    fold_k = int(rng.integers(4, 7))
    blob_dy = 0.06 * ny * (1 + jit())
    blob_dx = 0.17 * nx * (1 + jit())
    blob_r = (0.09 * ny * (1 + jit()), 0.065 * nx * (1 + jit()))
    cc_dy = -0.16 * ny * (1 + jit())
    cc_half = 0.2 * nx * (1 + jit())

    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    tissue = np.zeros(cfg.shape, np.int32)
    parcel = np.zeros(cfg.shape, np.int32)
    theta = np.arctan2(yy - cy, xx - cx)
    cgm_sector = (((theta + np.pi) / (2 * np.pi)) * N_CGM_SECTORS).astype(int) % N_CGM_SECTORS
    wm_sector = (((theta + np.pi) / (2 * np.pi)) * N_WM_SECTORS).astype(int) % N_WM_SECTORS
    zc = (nz - 1) / 2
    for z in range(nz):
        s = 1.0 - 0.25 * ((z - zc) / max(nz / 2, 1)) ** 2
        ry, rx = ry0 * s, rx0 * s
        fg = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        depth = ndimage.distance_transform_edt(fg)
        thick = thick0 * (1 + 0.35 * np.sin(fold_k * theta + fold_phase + 0.3 * z))
        wm = fg & (depth > thick)
        t = np.where(fg, 1, 0)
        t[wm] = 3
        for sign in (-1, 1):
            blob = (((yy - cy - blob_dy) / (blob_r[0] * s)) ** 2
                    + ((xx - cx - sign * blob_dx * s) / (blob_r[1] * s)) ** 2) < 1.0
            t[blob & wm] = 2
        cc = wm & (np.abs(yy - (cy + cc_dy * s)) <= 2.0) & (np.abs(xx - cx) <= cc_half * s) & (t == 3)
        t[cc] = 4
        tissue[z] = t

        p = np.zeros((ny, nx), np.int32)
        p[t == 1] = 1 + cgm_sector[t == 1]
        p[(t == 2) & (xx < cx)] = N_CGM_SECTORS + 1
        p[(t == 2) & (xx >= cx)] = N_CGM_SECTORS + 2
        base = N_CGM_SECTORS + 3
        p[t == 3] = base + wm_sector[t == 3]
        third = np.clip(((xx - (cx - cc_half * s)) / (2 * cc_half * s) * 3).astype(int), 0, 2)
        p[t == 4] = base + N_WM_SECTORS + third[t == 4]
        parcel[z] = p
    return tissue, parcel


def local_legend() -> dict[int, str]:
    legend = {}
    for i in range(N_CGM_SECTORS):
        legend[1 + i] = f"cGM:sector{i}"
    legend[N_CGM_SECTORS + 1] = "sGM:left"
    legend[N_CGM_SECTORS + 2] = "sGM:right"
    base = N_CGM_SECTORS + 3
    for i in range(N_WM_SECTORS):
        legend[base + i] = f"WM:sector{i}"
    for i, part in enumerate(CC_PARTS):
        legend[base + N_WM_SECTORS + i] = f"CC:{part}"
    return legend


def context_map(tissue: np.ndarray, scale_vox: float) -> np.ndarray:
    """Depth into white matter (WM and CC) as ``min(d / scale, 1)``, 0 elsewhere.

    ``d`` is the in-plane Euclidean distance to the nearest non-white-matter
    voxel, computed per slice.
    """
    ctx = np.zeros(tissue.shape, np.float64)
    for z in range(tissue.shape[0]):
        wm = np.isin(tissue[z], (3, 4))
        if wm.any():
            ctx[z] = np.minimum(ndimage.distance_transform_edt(wm) / scale_vox, 1.0) * wm
    return ctx


def generate_subject(cfg: PhantomConfig, index: int) -> tuple[Subject, GroundTruth]:
    """Build subject ``index`` of the cohort described by ``cfg``.

    Output is a pure function of ``(cfg, index)``.
    """
    if not 0 <= index < cfg.n_subjects:
        raise IndexError(f"subject index {index} outside [0, {cfg.n_subjects})")
    nz, ny, nx = cfg.shape
    if ny < MIN_INPLANE or nx < MIN_INPLANE:
        raise ValueError(f"in-plane size {ny}x{nx} too small; need at least {MIN_INPLANE}")
    geo_rng, val_rng = _subject_rngs(cfg.seed, index)
    tissue, parcel = _geometry(cfg, geo_rng)

    # per-voxel perturbation = shared microstructure term (seen by true
    # myelin) + measurement noise (not seen by true myelin)
    a = np.sqrt(cfg.relax_true_fraction)
    b = np.sqrt(1.0 - cfg.relax_true_fraction)
    micro = val_rng.standard_normal(cfg.shape)
    clean = {k: np.zeros(cfg.shape) for k in ("R1", "R2", "PD")}
    maps = {k: np.zeros(cfg.shape) for k in ("R1", "R2", "PD")}
    offset = np.zeros(cfg.shape)
    for t, key in enumerate(TISSUE_KEYS):
        p = cfg.tissue_params[key]
        sel = tissue == t
        for name, mean, sd in zip(("R1", "R2", "PD"), (p.r1, p.r2, p.pd), p.sd):
            # PD moves against R1/R2 with myelin content
            sign = -1.0 if name == "PD" else 1.0
            clean[name][sel] = mean + sign * sd * a * micro[sel]
        offset[sel] = p.mvi_offset
    for name in maps:
        noise = val_rng.standard_normal(cfg.shape)
        sds = np.zeros(cfg.shape)
        for t, key in enumerate(TISSUE_KEYS):
            sds[tissue == t] = cfg.tissue_params[key].sd[("R1", "R2", "PD").index(name)]
        maps[name] = np.maximum(clean[name] + b * sds * noise, 1e-3).astype(np.float32)
    symvf = symvf_standin(maps["R1"], maps["R2"], maps["PD"])

    fg = tissue > 0
    ctx = context_map(tissue, cfg.context_scale_vox)
    base = symvf_standin(clean["R1"], clean["R2"], clean["PD"])
    mvi = np.where(fg, np.maximum(base + offset + cfg.context_gain * ctx, 0.0), 0.0)
    mtmvi = np.maximum(mvi + cfg.noise_sd_mtmvi * val_rng.standard_normal(cfg.shape), 0.0)
    bap = np.clip(ndimage.gaussian_filter(fg.astype(np.float64), sigma=(0, 0.8, 0.8)), 0.0, 1.0)

    vs = cfg.voxel_mm
    sid = f"sub-{index:02d}"
    volumes = {
        "R1": Volume(maps["R1"], vs, "R1"),
        "R2": Volume(maps["R2"], vs, "R2"),
        "PD": Volume(maps["PD"], vs, "PD"),
        "BAP": Volume(bap, vs, "BAP"),
        "SyMVF": Volume(symvf, vs, "SyMVF"),
        "MTMVI": Volume(mtmvi, vs, "MTMVI"),
    }
    subject = Subject(sid, volumes, LabelVolume(parcel, local_legend(), vs))
    truth = GroundTruth(Volume(mvi, vs, "other"), LabelVolume(tissue, TISSUES, vs))
    return subject, truth


def generate_cohort(cfg: PhantomConfig):
    return [generate_subject(cfg, i) for i in range(cfg.n_subjects)]
