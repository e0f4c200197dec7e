from __future__ import annotations

from typing import Mapping

import numpy as np

INPUT_CHANNELS = ("R1", "R2", "PD", "SyMVF")


def robust_range(values: np.ndarray) -> float:
    """Spread between the 1st and 99th percentiles."""
    lo, hi = np.percentile(np.asarray(values, np.float64), [1.0, 99.0])
    return float(hi - lo)


def add_gaussian_noise(batch: Mapping[str, np.ndarray], sigma_rel: float,
                       ranges: Mapping[str, float], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Return a copy of ``batch`` with zero-mean Gaussian noise on the input channels.

    Channel ``c`` receives noise of standard deviation ``sigma_rel * ranges[c]``.
    Channels outside :data:`INPUT_CHANNELS` (the MTMVI target in particular)
    are passed through untouched.
    """
    if sigma_rel < 0:
        raise ValueError("sigma_rel must be non-negative")
    out = dict(batch)
    if sigma_rel == 0:
        return out
    for ch in INPUT_CHANNELS:
        if ch not in batch:
            continue
        x = batch[ch]
        sd = sigma_rel * ranges[ch]
        out[ch] = (x + rng.normal(0.0, sd, size=x.shape)).astype(x.dtype)
    return out
