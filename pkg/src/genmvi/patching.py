"""Patch sampling, strided test tiling, 32->128 resizing and reassembly.

Patches are stored at their native 32x32 footprint; the 128x128 images the
network consumes are produced on demand by :func:`resize_up`, which is a
separable linear operator (``A @ img @ A.T``).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .volume import Mask, Subject, Volume, _load_raw, _save_raw

log = logging.getLogger(__name__)

PATCH_CHANNELS = ("R1", "R2", "PD", "SyMVF", "MTMVI")


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    patch_native: int = 32
    patch_resized: int = 128
    per_subject_target: int = 600
    test_stride: int = 5
    seed: int = 0
    draw_budget_factor: int = 50

    def __post_init__(self):
        if self.patch_resized != 4 * self.patch_native:
            raise ValueError("patch_resized must be 4 x patch_native")
        if self.test_stride < 1 or self.per_subject_target < 1:
            raise ValueError("stride and target must be positive")


# ------------------------------------------------------------------ resizing

@lru_cache(maxsize=8)
def upsample_matrix(n: int, factor: int = 4) -> np.ndarray:
    """``(factor*n, n)`` bilinear interpolation matrix.

    Output pixel ``o`` samples input coordinate ``(o + 0.5) / factor - 0.5``
    (pixel centres aligned), clamped to ``[0, n - 1]``; the two neighbouring
    input pixels get weights ``1 - f`` and ``f``.
    """
    m = np.zeros((factor * n, n))
    for o in range(factor * n):
        u = min(max((o + 0.5) / factor - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(u))
        f = u - i0
        m[o, i0] += 1.0 - f
        if f > 0:
            m[o, i0 + 1] += f
    m.setflags(write=False)
    return m


@lru_cache(maxsize=8)
def block_average_matrix(n: int, factor: int = 4) -> np.ndarray:
    m = np.kron(np.eye(n), np.full((1, factor), 1.0 / factor))
    m.setflags(write=False)
    return m


@lru_cache(maxsize=8)
def downsample_matrix(n: int, factor: int = 4) -> np.ndarray:
    """``(n, factor*n)`` reduction: 4x4 block average, then undo the blur that
    block-averaging a bilinear upsample leaves behind.

    Block averaging alone maps an upsampled image to a ``[1/8, 3/4, 1/8]``
    blurred copy of the original; composing with the inverse of that
    ``n x n`` operator makes the reduction an exact left inverse of
    :func:`upsample_matrix`. Rows still sum to one, so constants are kept.
    """
    b = block_average_matrix(n, factor)
    m = np.linalg.solve(b @ upsample_matrix(n, factor), b)
    m.setflags(write=False)
    return m


def resize_up(img: np.ndarray, factor: int = 4) -> np.ndarray:
    """Bilinear upsampling of one ``(n, n)`` image or a stack ``(k, n, n)``."""
    img = np.asarray(img)
    a = upsample_matrix(img.shape[-1], factor)
    ar = upsample_matrix(img.shape[-2], factor)
    return (ar @ img.astype(np.float64) @ a.T).astype(np.float32)


def resize_down(img: np.ndarray, factor: int = 4) -> np.ndarray:
    """Reduce ``(k, 4n, 4n)`` outputs back to the native ``(k, n, n)`` grid (float64)."""
    img = np.asarray(img, np.float64)
    d = downsample_matrix(img.shape[-1] // factor, factor)
    dr = downsample_matrix(img.shape[-2] // factor, factor)
    return dr @ img @ d.T


# ---------------------------------------------------------------- patch sets

@dataclass
class PatchSet:
    """Aligned multi-channel patches with their provenance.

    ``native[ch]`` is ``(n, p, p)`` float32; the provenance arrays give the
    subject, slice and top-left corner of each window.
    """

    native: dict[str, np.ndarray]
    subject: np.ndarray
    z: np.ndarray
    row0: np.ndarray
    col0: np.ndarray
    brain_fraction: np.ndarray
    factor: int = 4
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.z.size)

    @property
    def patch_native(self) -> int:
        return next(iter(self.native.values())).shape[-1]

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(self.native)

    def images(self, channel: str, idx=None) -> np.ndarray:
        """Resized ``(k, 4p, 4p)`` images of one channel."""
        x = self.native[channel]
        return resize_up(x if idx is None else x[idx], self.factor)

    def provenance(self, i: int) -> tuple[str, int, int, int]:
        return str(self.subject[i]), int(self.z[i]), int(self.row0[i]), int(self.col0[i])

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx)
        return PatchSet({k: v[idx] for k, v in self.native.items()}, self.subject[idx], self.z[idx],
                        self.row0[idx], self.col0[idx], self.brain_fraction[idx], self.factor, dict(self.meta))

    @staticmethod
    def concat(sets: list["PatchSet"]) -> "PatchSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        chans = [c for c in sets[0].native if all(c in s.native for s in sets)]
        return PatchSet(
            {c: np.concatenate([s.native[c] for s in sets]) for c in chans},
            np.concatenate([s.subject for s in sets]),
            np.concatenate([s.z for s in sets]),
            np.concatenate([s.row0 for s in sets]),
            np.concatenate([s.col0 for s in sets]),
            np.concatenate([s.brain_fraction for s in sets]),
            sets[0].factor,
        )

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for c, arr in self.native.items():
            _save_raw(arr, d / f"{c.lower()}.qvol", (1.0, 1.0, 1.0), c)
        index = {
            "channels": list(self.native),
            "factor": self.factor,
            "records": [
                {"subject": str(s), "z": int(z), "row0": int(r), "col0": int(c), "brain_fraction": float(f)}
                for s, z, r, c, f in zip(self.subject, self.z, self.row0, self.col0, self.brain_fraction)
            ],
        }
        (d / "index.json").write_text(json.dumps(index, indent=1) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "PatchSet":
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        rec = index["records"]
        native = {c: _load_raw(d / f"{c.lower()}.qvol")[0] for c in index["channels"]}
        return cls(
            native,
            np.array([r["subject"] for r in rec], dtype=object),
            np.array([r["z"] for r in rec], dtype=np.int64),
            np.array([r["row0"] for r in rec], dtype=np.int64),
            np.array([r["col0"] for r in rec], dtype=np.int64),
            np.array([r["brain_fraction"] for r in rec], dtype=np.float64),
            int(index["factor"]),
        )


def window_brain_counts(brain: Mask, p: int) -> np.ndarray:
    """Brain-pixel count of every ``p x p`` window; shape ``(nz, ny-p+1, nx-p+1)``."""
    b = brain.bits.astype(np.int64)
    s = np.zeros((b.shape[0], b.shape[1] + 1, b.shape[2] + 1), np.int64)
    s[:, 1:, 1:] = b.cumsum(1).cumsum(2)
    return s[:, p:, p:] - s[:, :-p, p:] - s[:, p:, :-p] + s[:, :-p, :-p]


def retained(count, p: int):
    """Windows with less than half brain area are excluded."""
    return 2 * np.asarray(count) >= p * p


def grid_positions(n: int, p: int, stride: int, clamp: bool = True) -> list[int]:
    """Window origins ``0, stride, 2*stride, ...`` that fit in ``n``, plus the
    far-edge origin ``n - p`` when the grid does not reach it."""
    if n < p:
        raise SamplingError(f"axis of length {n} is shorter than the patch ({p})")
    pos = list(range(0, n - p + 1, stride))
    if clamp and pos[-1] != n - p:
        pos.append(n - p)
    return pos


def _extract(s: Subject, channels, z, r, c, p) -> dict[str, np.ndarray]:
    zz = z[:, None, None]
    rr = r[:, None, None] + np.arange(p)[None, :, None]
    cc = c[:, None, None] + np.arange(p)[None, None, :]
    return {ch: np.ascontiguousarray(s.volumes[ch].data[zz, rr, cc], dtype=np.float32) for ch in channels}


def _channels(s: Subject) -> list[str]:
    return [c for c in PATCH_CHANNELS if c in s.volumes]


def _check(s: Subject, brain: Mask, p: int):
    if brain.shape != s.shape:
        raise SamplingError("brain mask does not match subject grid")
    _, ny, nx = s.shape
    if ny < p or nx < p:
        raise SamplingError(f"slice {ny}x{nx} smaller than patch {p}")


def sample_training_patches(s: Subject, brain: Mask, cfg: SamplerConfig) -> PatchSet:
    """Uniform random windows (with replacement) that are at least half brain."""
    p = cfg.patch_native
    _check(s, brain, p)
    counts = window_brain_counts(brain, p)
    if not retained(counts, p).any():
        raise SamplingError(f"{s.id}: no window contains at least half brain")
    nz, ny, nx = s.shape
    budget = cfg.draw_budget_factor * cfg.per_subject_target
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _stable_hash(s.id)]))
    z = rng.integers(0, nz, budget)
    r = rng.integers(0, ny - p + 1, budget)
    c = rng.integers(0, nx - p + 1, budget)
    keep = np.flatnonzero(retained(counts[z, r, c], p))[:cfg.per_subject_target]
    if keep.size < cfg.per_subject_target:
        log.warning("%s: draw budget exhausted with %d of %d patches", s.id, keep.size, cfg.per_subject_target)
    z, r, c = z[keep], r[keep], c[keep]
    return PatchSet(_extract(s, _channels(s), z, r, c, p), np.full(z.size, s.id, dtype=object),
                    z, r, c, counts[z, r, c] / float(p * p), 4)


def tile_test_patches(s: Subject, brain: Mask, cfg: SamplerConfig) -> PatchSet:
    """Regular stride tiling of every slice (edge-clamped), same retention rule."""
    p = cfg.patch_native
    _check(s, brain, p)
    counts = window_brain_counts(brain, p)
    nz, ny, nx = s.shape
    rows = grid_positions(ny, p, cfg.test_stride)
    cols = grid_positions(nx, p, cfg.test_stride)
    zg, rg, cg = np.meshgrid(np.arange(nz), rows, cols, indexing="ij")
    z, r, c = zg.ravel(), rg.ravel(), cg.ravel()
    keep = retained(counts[z, r, c], p)
    z, r, c = z[keep], r[keep], c[keep]
    return PatchSet(_extract(s, _channels(s), z, r, c, p), np.full(z.size, s.id, dtype=object),
                    z, r, c, counts[z, r, c] / float(p * p), 4)


def reassemble(outputs: np.ndarray, patches: PatchSet, target_shape, voxel_size_mm=(1.0, 1.0, 1.0),
               channel_name: str = "GenMVI") -> Volume:
    """Stitch ``(n, 4p, 4p)`` network outputs into a volume.

    Each output is reduced to its native window, summed into a float64
    accumulator and divided by the per-voxel hit count; unhit voxels are 0.
    """
    outputs = np.asarray(outputs)
    n = len(patches)
    if outputs.shape[0] != n:
        raise ValueError(f"{outputs.shape[0]} outputs for {n} provenance records")
    p = outputs.shape[-1] // patches.factor
    nz, ny, nx = target_shape
    if n and (patches.z.min() < 0 or patches.z.max() >= nz or patches.row0.min() < 0
              or patches.row0.max() + p > ny or patches.col0.min() < 0 or patches.col0.max() + p > nx):
        raise ValueError("patch provenance lies outside the target volume")
    native = resize_down(outputs, patches.factor)
    acc = np.zeros(target_shape, np.float64)
    hits = np.zeros(target_shape, np.int64)
    # accumulate in provenance order so the result ignores input ordering
    for i in np.lexsort((patches.col0, patches.row0, patches.z)):
        z, r, c = int(patches.z[i]), int(patches.row0[i]), int(patches.col0[i])
        acc[z, r:r + p, c:c + p] += native[i]
        hits[z, r:r + p, c:c + p] += 1
    out = np.where(hits > 0, acc / np.maximum(hits, 1), 0.0)
    return Volume(out, voxel_size_mm, channel_name)


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
