"""Volumes, label maps, masks and the ``qvol`` on-disk container.

A ``.qvol`` file is a small JSON header; the voxel payload lives next to it
in ``<stem>.bin`` as raw little-endian float32 in z-major, row-major order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

CHANNELS = ("R1", "R2", "PD", "BAP", "SyMVF", "MTsat", "MTMVI", "GenMVI", "other")

# subject directory layout: file stem -> channel name
SUBJECT_FILES = {
    "r1": "R1",
    "r2": "R2",
    "pd": "PD",
    "bap": "BAP",
    "symvf": "SyMVF",
    "mtmvi": "MTMVI",
}
LABELS_STEM = "labels"


class VolumeFormatError(ValueError):
    """Raised when a qvol header or payload is malformed."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _check_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be three positive integers, got {shape}")
    return shape


@dataclass(frozen=True)
class Volume:
    """A 3-D float32 scalar field of shape ``(nz, ny, nx)``."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_name: str = "other"

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        _check_shape(data.shape if data.ndim == 3 else (0,))
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        if self.channel_name not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel_name!r}")
        if self.channel_name == "BAP" and (data.min() < 0 or data.max() > 1):
            raise ValueError("BAP values must lie in [0, 1]")
        vs = tuple(float(v) for v in self.voxel_size_mm)
        if len(vs) != 3 or any(v <= 0 for v in vs):
            raise ValueError("voxel size must be three positive reals")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "voxel_size_mm", vs)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data, channel_name: str | None = None) -> "Volume":
        return Volume(data, self.voxel_size_mm, channel_name or self.channel_name)

    def scaled(self, k: float, channel_name: str | None = None) -> "Volume":
        return self.with_data(self.data.astype(np.float64) * k, channel_name)

    def mean_over(self, mask: "Mask") -> float:
        return mean_over_mask(self, mask)


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    legend: Mapping[int, str]
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.array(self.labels, copy=True)
        if labels.ndim != 3:
            raise ValueError("label volume must be 3-D")
        _check_shape(labels.shape)
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        labels = labels.astype(np.int32)
        legend = {int(k): str(v) for k, v in self.legend.items()}
        missing = set(np.unique(labels).tolist()) - set(legend) - {0}
        if missing:
            raise ValueError(f"labels missing from legend: {sorted(missing)}")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "legend", legend)
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 3:
            raise ValueError("mask must be 3-D")
        object.__setattr__(self, "bits", _frozen(bits))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bits.shape

    def __or__(self, other: "Mask") -> "Mask":
        return Mask(self.bits | other.bits)

    def __and__(self, other: "Mask") -> "Mask":
        return Mask(self.bits & other.bits)

    def count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def empty(cls, shape) -> "Mask":
        return cls(np.zeros(shape, dtype=bool))


@dataclass(frozen=True)
class Subject:
    id: str
    volumes: Mapping[str, Volume]
    labels: LabelVolume
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.volumes.items():
            if v.shape != self.labels.shape:
                raise ValueError(f"{self.id}: {name} shape {v.shape} != labels {self.labels.shape}")
            if v.voxel_size_mm != self.labels.voxel_size_mm:
                raise ValueError(f"{self.id}: {name} voxel size differs from labels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def __getitem__(self, channel: str) -> Volume:
        return self.volumes[channel]

    def replace(self, **volumes: Volume) -> "Subject":
        merged = dict(self.volumes)
        merged.update(volumes)
        return Subject(self.id, merged, self.labels, self.meta)


def mean_over_mask(v: Volume, mask: Mask) -> float:
    """Mean of ``v`` over ``mask`` accumulated in float64."""
    if v.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} != volume shape {v.shape}")
    n = mask.count()
    if n == 0:
        raise ValueError("mean over an empty mask")
    return float(np.sum(v.data[mask.bits], dtype=np.float64) / n)


def mask_from_labels(lv: LabelVolume, labels: Iterable[int]) -> Mask:
    labels = sorted({int(x) for x in labels})
    unknown = [x for x in labels if x not in lv.legend]
    if unknown:
        raise KeyError(f"labels not in legend: {unknown}")
    return Mask(np.isin(lv.labels, labels))


# ---------------------------------------------------------------- qvol I/O

def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".qvol":
        path = path.with_suffix(".qvol")
    return path, path.with_suffix(".bin")


def _write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _save_raw(data: np.ndarray, path, voxel_mm, channel: str, extra: dict | None = None) -> None:
    shape = _check_shape(data.shape)
    header = {
        "shape": list(shape),
        "voxel_mm": [float(v) for v in voxel_mm],
        "dtype": "f32",
        "order": "z-row-major",
        "channel": channel,
    }
    if extra:
        header.update(extra)
    hdr, bin_ = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    _write_bytes(bin_, np.ascontiguousarray(data, dtype="<f4").tobytes())
    _write_bytes(hdr, (json.dumps(header, sort_keys=True) + "\n").encode())


def _load_raw(path) -> tuple[np.ndarray, dict]:
    hdr, bin_ = _paths(path)
    if not hdr.exists():
        raise FileNotFoundError(hdr)
    if not bin_.exists():
        raise FileNotFoundError(bin_)
    try:
        header = json.loads(hdr.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{hdr}: bad header ({e})") from e
    if header.get("dtype") != "f32":
        raise VolumeFormatError(f"{hdr}: unsupported dtype {header.get('dtype')!r}")
    if header.get("order", "z-row-major") != "z-row-major":
        raise VolumeFormatError(f"{hdr}: unsupported order {header.get('order')!r}")
    shape = _check_shape(header["shape"])
    raw = bin_.read_bytes()
    expected = 4 * shape[0] * shape[1] * shape[2]
    if len(raw) != expected:
        raise VolumeFormatError(f"{bin_}: payload is {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{bin_}: non-finite values in payload")
    return data, header


def save_volume(v: Volume, path) -> None:
    _save_raw(v.data, path, v.voxel_size_mm, v.channel_name)


def load_volume(path) -> Volume:
    data, header = _load_raw(path)
    return Volume(data, tuple(header.get("voxel_mm", (1.0, 1.0, 1.0))), header.get("channel", "other"))


def save_labels(lv: LabelVolume, path) -> None:
    # labels are stored as exact small integers in the float32 payload
    if lv.labels.size and lv.labels.max() >= 2**24:
        raise ValueError("label values must be < 2**24 to be exact in float32")
    legend = {str(k): v for k, v in sorted(lv.legend.items())}
    _save_raw(lv.labels.astype(np.float32), path, lv.voxel_size_mm, "other", {"legend": legend})


def load_labels(path) -> LabelVolume:
    data, header = _load_raw(path)
    if "legend" not in header:
        raise VolumeFormatError(f"{path}: label header carries no legend")
    labels = data.astype(np.int64)
    if not np.array_equal(labels, data) or (labels.size and labels.min() < 0):
        raise VolumeFormatError(f"{path}: labels must be non-negative integers")
    legend = {int(k): v for k, v in header["legend"].items()}
    return LabelVolume(labels, legend, tuple(header.get("voxel_mm", (1.0, 1.0, 1.0))))


def save_subject(s: Subject, root) -> Path:
    d = Path(root) / s.id
    d.mkdir(parents=True, exist_ok=True)
    for stem, channel in SUBJECT_FILES.items():
        if channel in s.volumes:
            save_volume(s.volumes[channel], d / f"{stem}.qvol")
    save_labels(s.labels, d / f"{LABELS_STEM}.qvol")
    return d


def load_subject(root, subject_id: str) -> Subject:
    d = Path(root) / subject_id
    if not d.is_dir():
        raise FileNotFoundError(d)
    volumes = {}
    for stem, channel in SUBJECT_FILES.items():
        p = d / f"{stem}.qvol"
        if p.exists():
            volumes[channel] = load_volume(p)
    return Subject(subject_id, volumes, load_labels(d / f"{LABELS_STEM}.qvol"))
