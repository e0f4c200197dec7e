from __future__ import annotations

import numpy as np

AUX_WEIGHT = 0.2


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.sqrt(np.mean(d * d)))


def loss(main: np.ndarray, aux: np.ndarray, target: np.ndarray) -> float:
    """RMSE of the main output plus 0.2 times the RMSE of the auxiliary output."""
    return rmse(main, target) + AUX_WEIGHT * rmse(aux, target)


def loss_and_grads(main, aux, target):
    """Loss value and its gradients w.r.t. ``main`` and ``aux``."""

    def part(y):
        d = np.asarray(y, np.float64) - np.asarray(target, np.float64)
        r = float(np.sqrt(np.mean(d * d)))
        g = d / (d.size * r) if r > 0 else np.zeros_like(d)
        return r, g

    r_main, g_main = part(main)
    r_aux, g_aux = part(aux)
    return r_main + AUX_WEIGHT * r_aux, g_main, AUX_WEIGHT * g_aux
