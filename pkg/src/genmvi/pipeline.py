"""Leave-one-out training harness and GenMVI inference."""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .config import NetworkConfig
from .nn.augment import INPUT_CHANNELS
from .patching import PatchSet, SamplerConfig, reassemble, tile_test_patches
from .preprocess import RoiSet, ScaleResult, brain_mask, build_roiset, scale_mtsat
from .volume import Mask, Subject, Volume

log = logging.getLogger(__name__)

RELAX = ("R1", "R2", "PD")


class LeakageError(AssertionError):
    """A held-out subject's patch reached training or validation."""


@dataclass(frozen=True)
class FoldPlan:
    held_out: str
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if self.held_out in self.train_ids or self.held_out in self.val_ids:
            raise ValueError("held-out subject inside train/val")
        if set(self.train_ids) & set(self.val_ids):
            raise ValueError("train and validation overlap")

    def to_json(self) -> dict:
        return {"held_out": self.held_out, "train_ids": list(self.train_ids),
                "val_ids": list(self.val_ids), "seed": self.seed}


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max_epochs"
    best_epoch: int = 0

    def to_json(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "epochs": [vars(e).copy() for e in self.epochs],
        }


@dataclass(frozen=True)
class PreparedSubject:
    subject: Subject
    brain: Mask
    rois: RoiSet
    scale: ScaleResult


def prepare_subject(s: Subject, min_roi_voxels: int = 5) -> PreparedSubject:
    """Brain mask, ROIs, and the MT reference rescaled to match SyMVF in ROI_WM."""
    brain = brain_mask(s["BAP"])
    rois = build_roiset(s.labels, brain, min_roi_voxels)
    mtmvi, scale = scale_mtsat(s["MTMVI"], s["SyMVF"], rois.roi_wm)
    return PreparedSubject(s.replace(MTMVI=mtmvi), brain, rois, scale)


def n_validation(n_pool: int, ratio=(15, 4)) -> int:
    """Validation count for a pool of ``n_pool`` subjects at ``train:val = ratio``."""
    n_train, n_val = ratio
    return max(1, int(math.floor(n_pool * n_val / (n_train + n_val) + 0.5)))


def make_folds(subject_ids, seed: int, ratio=(15, 4)) -> list[FoldPlan]:
    ids = list(subject_ids)
    if len(ids) < 3:
        raise ValueError("leave-one-out needs at least 3 subjects")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    folds = []
    for k, held in enumerate(ids):
        pool = [s for s in ids if s != held]
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        order = [pool[i] for i in rng.permutation(len(pool))]
        nv = n_validation(len(pool), ratio)
        folds.append(FoldPlan(held, tuple(sorted(order[nv:])), tuple(sorted(order[:nv])), seed))
    return folds


def early_stop_epoch(val_losses, patience: int = 3, max_epochs: int = 10) -> tuple[int, str]:
    """Epoch after which training stops, and why.

    Stops once the validation loss has failed to improve on the best value so
    far for ``patience`` consecutive epochs.
    """
    best = math.inf
    bad = 0
    for n, v in enumerate(val_losses[:max_epochs], start=1):
        if v < best:
            best, bad = v, 0
        else:
            bad += 1
            if bad >= patience:
                return n, "early_stop"
    return min(len(val_losses), max_epochs), "max_epochs"


# ----------------------------------------------------------------- batching

def corpus_statistics(patches: PatchSet) -> tuple[nn.Normalization, dict[str, float]]:
    """Input standardisation, output scaling and noise ranges from a training corpus."""
    means, sds, ranges = [], [], {}
    for ch in INPUT_CHANNELS:
        x = patches.native[ch].astype(np.float64)
        means.append(x.mean())
        sds.append(max(x.std(), 1e-6))
        ranges[ch] = nn.robust_range(x)
    t = patches.native["MTMVI"].astype(np.float64)
    norm = nn.Normalization(np.array(means), np.array(sds), float(t.mean()), float(max(t.std(), 1e-6)))
    return norm, ranges


def batch_arrays(patches: PatchSet, idx, channels=INPUT_CHANNELS + ("MTMVI",)) -> dict[str, np.ndarray]:
    return {ch: patches.images(ch, idx) for ch in channels if ch in patches.native}


def to_network_inputs(batch: dict[str, np.ndarray]):
    relax = np.stack([batch[c] for c in RELAX], axis=-1)
    return relax, batch["SyMVF"][..., None]


def _loss_over(spec, params, norm, patches: PatchSet, batch_size: int) -> float:
    total, n = 0.0, len(patches)
    for i in range(0, n, batch_size):
        idx = np.arange(i, min(i + batch_size, n))
        b = batch_arrays(patches, idx)
        relax, sy = to_network_inputs(b)
        main, aux, _ = nn.forward(spec, params, relax, sy, norm, keep_cache=False)
        total += nn.loss(main, aux, b["MTMVI"][..., None]) * idx.size
    return total / n


def audit_leakage(fold: FoldPlan, *sets: PatchSet) -> None:
    for ps in sets:
        if np.any(ps.subject == fold.held_out):
            raise LeakageError(f"patches of held-out subject {fold.held_out} in training data")


def train_fold(fold: FoldPlan, data: dict[str, PatchSet], cfg: NetworkConfig,
               deterministic: bool = True, progress=None):
    """Train one leave-one-out model.

    Returns ``(spec, state, norm, log)`` where ``state`` carries the
    parameters of the epoch with the lowest validation loss.
    """
    train = PatchSet.concat([data[i] for i in fold.train_ids])
    val = PatchSet.concat([data[i] for i in fold.val_ids])
    audit_leakage(fold, train, val)
    spec = nn.two_block_spec(cfg.width, cfg.levels)
    norm, ranges = corpus_statistics(train)
    seq = np.random.SeedSequence([fold.seed, _id_int(fold.held_out)])
    init_seq, shuffle_seq = seq.spawn(2)
    state = nn.TrainState.fresh(nn.init_params(spec, init_seq.generate_state(1)[0]), fold.seed)
    sched = nn.LrSchedule(cfg.base_lr, cfg.normalize_first_epoch)
    rng = np.random.default_rng(shuffle_seq)
    tlog = TrainLog()
    best_val, best_state, bad = math.inf, state, 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched(epoch)
        perm = rng.permutation(len(train))
        running, seen = 0.0, 0
        try:
            for i in range(0, len(perm), cfg.batch_size):
                idx = np.sort(perm[i:i + cfg.batch_size])
                b = nn.add_gaussian_noise(batch_arrays(train, idx), cfg.sigma_rel, ranges, rng)
                relax, sy = to_network_inputs(b)
                main, aux, tape = nn.forward(spec, state.params, relax, sy, norm)
                value, gm, ga = nn.loss_and_grads(main, aux, b["MTMVI"][..., None])
                if not math.isfinite(value):
                    raise nn.NonFiniteGradient(f"non-finite training loss in epoch {epoch}")
                grads = nn.backward(spec, state.params, tape, gm, ga)
                state = nn.adam_step(state, grads, lr)
                running += value * idx.size
                seen += idx.size
            val_loss = _loss_over(spec, state.params, norm, val, cfg.batch_size)
            if not math.isfinite(val_loss):
                raise nn.NonFiniteGradient(f"non-finite validation loss in epoch {epoch}")
        except nn.NonFiniteGradient as e:
            log.error("fold %s aborted: %s", fold.held_out, e)
            tlog.stop_reason = "abort"
            break
        state = replace(state, epoch=epoch)
        wall = 0.0 if deterministic else time.perf_counter() - t0
        tlog.epochs.append(EpochRecord(epoch, lr, running / max(seen, 1), val_loss, wall))
        if progress:
            progress(fold, tlog.epochs[-1])
        if val_loss < best_val:
            best_val, best_state, bad = val_loss, state, 0
            tlog.best_epoch = epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                tlog.stop_reason = "early_stop"
                break
    return spec, best_state, norm, tlog


def predict_patches(spec, params, norm, patches: PatchSet, batch_size: int = 8) -> np.ndarray:
    outs = []
    for i in range(0, len(patches), batch_size):
        idx = np.arange(i, min(i + batch_size, len(patches)))
        relax, sy = to_network_inputs(batch_arrays(patches, idx, INPUT_CHANNELS))
        main, _, _ = nn.forward(spec, params, relax, sy, norm, keep_cache=False)
        outs.append(main[..., 0])
    return np.concatenate(outs) if outs else np.zeros((0, 4 * patches.patch_native, 4 * patches.patch_native))


def infer_subject(spec, state: nn.TrainState, norm, prepared: PreparedSubject, sampler: SamplerConfig,
                  batch_size: int = 8) -> Volume:
    """Tile the subject, run the main output and stitch a GenMVI volume."""
    s = prepared.subject
    if 4 * sampler.patch_native % 2 ** (spec.levels - 1):
        raise ValueError("patch size incompatible with network depth")
    tiles = tile_test_patches(s, prepared.brain, sampler)
    out = predict_patches(spec, state.params, norm, tiles, batch_size)
    return reassemble(out, tiles, s.shape, s["SyMVF"].voxel_size_mm, "GenMVI")


def _id_int(sid: str) -> int:
    return int.from_bytes(hashlib.sha256(sid.encode()).digest()[:8], "little")
