"""Independent reference checks shared by the test suite and ``genmvi verify``.

Each ``check_*`` function returns an :class:`OracleResult`; none of them raise
on a mismatch, so a caller can collect every outcome before deciding.
"""
from __future__ import annotations

import itertools
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import layers as L
from .patching import grid_positions
from .preprocess import erode8
from .stats import signed_rank_counts, wilcoxon_signed_rank
from .volume import Mask


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# --------------------------------------------------------------- gradients

def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max |a - n| / max(|a| + |n|, floor)`` over all entries."""
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_grad(f, x: np.ndarray, idx=None, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries ``idx`` of ``x`` (in place, restored)."""
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if idx is None else np.asarray(idx)
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        out[j] = (up - down) / (2 * eps)
    return out


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def layer_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Worst relative error of every layer's backward pass against central differences."""
    rng = np.random.default_rng(seed)
    errs = {}

    for k in (1, 3):
        x = rng.normal(size=(2, 5, 6, 3))
        w = rng.normal(size=(k, k, 3, 4))
        b = rng.normal(size=4)
        g = rng.normal(size=(2, 5, 6, 4))
        f = lambda: float(np.sum(L.conv_forward(x, w, b)[0] * g))
        _, cache = L.conv_forward(x, w, b)
        dx, dw, db = L.conv_backward(g, cache)
        errs[f"conv{k}"] = max(max_relative_error(dx, numeric_grad(f, x)),
                               max_relative_error(dw, numeric_grad(f, w)),
                               max_relative_error(db, numeric_grad(f, b)))

    x = rng.normal(size=(2, 3, 4, 3))
    w = rng.normal(size=(2, 2, 3, 2))
    b = rng.normal(size=2)
    g = rng.normal(size=(2, 6, 8, 2))
    f = lambda: float(np.sum(L.tconv_forward(x, w, b)[0] * g))
    dx, dw, db = L.tconv_backward(g, L.tconv_forward(x, w, b)[1])
    errs["tconv"] = max(max_relative_error(dx, numeric_grad(f, x)),
                        max_relative_error(dw, numeric_grad(f, w)),
                        max_relative_error(db, numeric_grad(f, b)))

    x = _away_from_zero(rng, (2, 4, 4, 3))
    g = rng.normal(size=x.shape)
    f = lambda: float(np.sum(L.relu_forward(x)[0] * g))
    errs["relu"] = max_relative_error(L.relu_backward(g, L.relu_forward(x)[1]), numeric_grad(f, x))

    x = rng.permutation(np.linspace(-1, 1, 2 * 4 * 6 * 3)).reshape(2, 4, 6, 3)  # distinct values: no ties
    g = rng.normal(size=(2, 2, 3, 3))
    f = lambda: float(np.sum(L.maxpool_forward(x)[0] * g))
    errs["maxpool"] = max_relative_error(L.maxpool_backward(g, L.maxpool_forward(x)[1]), numeric_grad(f, x))

    a, c = rng.normal(size=(1, 3, 3, 2)), rng.normal(size=(1, 3, 3, 3))
    g = rng.normal(size=(1, 3, 3, 5))
    out, sizes = L.concat_forward([a, c])
    da, dc = L.concat_backward(g, sizes)
    fa = lambda: float(np.sum(L.concat_forward([a, c])[0] * g))
    errs["concat"] = max(max_relative_error(da, numeric_grad(fa, a)), max_relative_error(dc, numeric_grad(fa, c)))
    return errs


def network_gradient_error(seed: int = 0, size: int = 8, width: int = 2, n_checked: int = 300) -> float:
    """Full two-output network with the training loss, checked on a random subset of parameters."""
    rng = np.random.default_rng(seed)
    spec = nn.two_block_spec(width, 3)
    params = nn.init_params(spec, seed, np.float64)
    params += rng.normal(0, 0.05, params.size)  # nonzero biases
    relax = rng.normal(size=(2, size, size, 3))
    sy = rng.normal(size=(2, size, size, 1))
    target = rng.normal(size=(2, size, size, 1))
    norm = nn.Normalization(np.array([0.1, -0.2, 0.3, 0.0]), np.array([1.1, 0.9, 1.2, 0.8]), 0.05, 1.3)

    def f():
        main, aux, _ = nn.forward(spec, params, relax, sy, norm, keep_cache=False)
        return nn.loss(main, aux, target)

    main, aux, tape = nn.forward(spec, params, relax, sy, norm)
    _, gm, ga = nn.loss_and_grads(main, aux, target)
    grad = nn.backward(spec, params, tape, gm, ga)
    idx = rng.choice(params.size, size=min(n_checked, params.size), replace=False)
    return max_relative_error(grad[idx], numeric_grad(f, params, idx))


def check_gradients(tol: float = 1e-4) -> OracleResult:
    errs = layer_gradient_errors()
    errs["network"] = network_gradient_error()
    worst = max(errs, key=errs.get)
    return OracleResult("gradient check", errs[worst] < tol,
                        f"worst {worst} rel err {errs[worst]:.2e} (tol {tol:g})")


def adjoint_error(seed: int = 0) -> float:
    """``<conv(x), y> - <x, conv^T(y)>`` relative to the inner product size."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 7, 5, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    y = rng.normal(size=(1, 7, 5, 4))
    out, cache = L.conv_forward(x, w, np.zeros(4))
    dx, _, _ = L.conv_backward(y, cache)
    lhs, rhs = float(np.sum(out * y)), float(np.sum(x * dx))
    return abs(lhs - rhs) / max(abs(lhs), 1.0)


# ------------------------------------------------------------------ wilcoxon

def enumerate_pvalue(d) -> float:
    """Two-sided exact p by listing all ``2**n`` sign assignments of the ranks."""
    d = np.asarray(d, np.float64)
    n = d.size
    ranks = np.argsort(np.argsort(np.abs(d))) + 1
    w_plus = int(ranks[d > 0].sum())
    top = n * (n + 1) // 2
    w = min(w_plus, top - w_plus)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        s = sum(r for r, on in zip(range(1, n + 1), signs) if on)
        if s <= w or s >= top - w:
            hits += 1
    return min(1.0, hits / 2 ** n)


def check_wilcoxon(trials: int = 1000, max_n: int = 12, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        n = int(rng.integers(5, max_n + 1))
        d = rng.permutation(np.arange(1, n + 1)) * rng.choice((-1.0, 1.0), size=n) + rng.uniform(-0.3, 0.3, n)
        res = wilcoxon_signed_rank(d)
        if res.pvalue != enumerate_pvalue(d) or res.w_plus + res.w_minus != n * (n + 1) / 2:
            bad += 1
    return OracleResult("wilcoxon exact vs enumeration", bad == 0, f"{trials - bad}/{trials} trials agree")


def check_rank_counts(max_n: int = 12) -> OracleResult:
    for n in range(1, max_n + 1):
        brute = np.zeros(n * (n + 1) // 2 + 1, dtype=np.int64)
        for signs in itertools.product((0, 1), repeat=n):
            brute[sum(k for k, on in zip(range(1, n + 1), signs) if on)] += 1
        if list(brute) != [int(c) for c in signed_rank_counts(n)]:
            return OracleResult("signed-rank null counts", False, f"mismatch at n={n}")
    return OracleResult("signed-rank null counts", True, f"n=1..{max_n} match brute force")


# ----------------------------------------------------------------- morphology

def brute_erode8(bits: np.ndarray) -> np.ndarray:
    """Per-voxel loop: a voxel survives iff all 9 in-plane neighbours exist and are set."""
    nz, h, w = bits.shape
    out = np.zeros_like(bits)
    for z in range(nz):
        for i in range(h):
            for j in range(w):
                ok = True
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        a, b = i + di, j + dj
                        if not (0 <= a < h and 0 <= b < w and bits[z, a, b]):
                            ok = False
                out[z, i, j] = ok
    return out


def check_erosion(trials: int = 1000, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 10)), int(rng.integers(1, 10)))
        bits = rng.random(shape) < rng.uniform(0.3, 0.95)
        if not np.array_equal(erode8(Mask(bits)).bits, brute_erode8(bits)):
            bad += 1
    return OracleResult("8-neighbour erosion vs brute force", bad == 0, f"{trials - bad}/{trials} masks agree")


# -------------------------------------------------------------- tiling / lr

def check_tiling() -> OracleResult:
    grid = grid_positions(160, 32, 5, clamp=False)
    expect = len(range(0, 160 - 32 + 1, 5))
    ok = len(grid) == expect == 26 and len(grid) ** 2 == 676
    return OracleResult("tiling arithmetic", ok, f"{len(grid)} positions per axis, {len(grid) ** 2} windows")


def lr_oracle(n: int, digits: int = 40) -> float:
    import mpmath

    with mpmath.workdps(digits):
        return float((mpmath.tanh(mpmath.mpf("1.8") - mpmath.mpf("0.3") * n) + 1)
                     / (2 * (mpmath.tanh(mpmath.mpf("1.5")) + 1)))


def check_lr_table() -> OracleResult:
    m = [nn.lr_multiplier(n) for n in range(1, 11)]
    errs = [abs(m[n - 1] - lr_oracle(n)) for n in (5, 10)]
    ok = (abs(m[0] - 0.5) <= 1e-15 and max(errs) <= 1e-9
          and all(a > b for a, b in zip(m, m[1:])))
    return OracleResult("learning-rate table", ok,
                        f"m(1)={m[0]!r}, m(5)={m[4]:.9f}, m(10)={m[9]:.9f}, oracle err {max(errs):.1e}")


def check_checkpoint_integrity() -> OracleResult:
    """A flipped payload byte must be refused on load."""
    spec = nn.two_block_spec(2, 3)
    state = nn.TrainState.fresh(nn.init_params(spec, 0))
    with tempfile.TemporaryDirectory() as tmp:
        path = nn.save_checkpoint(Path(tmp) / "ck.json", spec, state, nn.Normalization())
        nn.load_checkpoint(path)
        blob = bytearray(path.with_suffix(".bin").read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.with_suffix(".bin").write_bytes(bytes(blob))
        try:
            nn.load_checkpoint(path)
        except nn.CheckpointError as e:
            return OracleResult("checkpoint integrity", True, f"corruption refused ({e.__class__.__name__})")
    return OracleResult("checkpoint integrity", False, "corrupted payload loaded without error")


def run_all() -> list[OracleResult]:
    return [check_gradients(), check_wilcoxon(), check_rank_counts(), check_erosion(),
            check_tiling(), check_lr_table(), check_checkpoint_integrity(),
            OracleResult("convolution adjoint", (e := adjoint_error()) < 1e-10, f"{e:.1e}")]
