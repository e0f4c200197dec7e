"""``genmvi`` command line: phantom generation, leave-one-out runs, reports, self-checks."""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import nn, oracles
from .config import RunConfig, load_config
from .patching import PatchSet, sample_training_patches
from .phantom import generate_subject
from .pipeline import FoldPlan, PreparedSubject, infer_subject, make_folds, prepare_subject, train_fold
from .report import emit_report, roi_means, run_pixel_analysis, run_roi_analysis
from .volume import load_subject, load_volume, save_subject, save_volume

log = logging.getLogger("genmvi")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause.__class__.__name__}: {cause}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - every failure gets a stage tag
        raise StageError(name, e) from e


# ------------------------------------------------------------------ layout

class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def report(self) -> Path:
        return self.root / "report"

    @property
    def manifest(self) -> Path:
        return self.root / "run_manifest.json"

    def fold(self, held_out: str) -> Path:
        return self.root / "folds" / held_out

    def patches(self, sid: str) -> Path:
        return self.root / "patches" / sid


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _single_thread():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


# ---------------------------------------------------------------- phantom

def cmd_phantom(cfg: RunConfig, ws: Workspace, force: bool = False) -> Path:
    out = ws.dataset
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(cfg.phantom.n_subjects):
        subject, _ = generate_subject(cfg.phantom, i)
        save_subject(subject, out)
        ids.append(subject.id)
        log.info("wrote %s", subject.id)
    _write_json(out / "manifest.json", {
        "subjects": ids,
        "phantom": cfg.phantom.to_dict(),
        "config_hash": cfg.hash(),
    })
    return out


def _dataset_ids(ws: Workspace) -> list[str]:
    m = ws.dataset / "manifest.json"
    if not m.exists():
        raise FileNotFoundError(f"no dataset at {ws.dataset}; run `genmvi phantom` first")
    return list(json.loads(m.read_text())["subjects"])


# -------------------------------------------------------------------- run

def _prepare_all(cfg: RunConfig, ws: Workspace) -> dict[str, PreparedSubject]:
    return {sid: prepare_subject(load_subject(ws.dataset, sid), cfg.stats.min_roi_voxels)
            for sid in _dataset_ids(ws)}


def _training_patches(cfg: RunConfig, ws: Workspace, prepared) -> dict[str, PatchSet]:
    data = {}
    for sid, p in prepared.items():
        ps = sample_training_patches(p.subject, p.brain, cfg.sampler)
        ps.save(ws.patches(sid))
        data[sid] = ps
    return data


def _fold_done(ws: Workspace, fold: FoldPlan, cfg_hash: str) -> dict | None:
    marker = ws.fold(fold.held_out) / "fold.json"
    if not marker.exists():
        return None
    rec = json.loads(marker.read_text())
    if rec.get("config_hash") != cfg_hash or rec.get("plan") != fold.to_json():
        return None
    return rec


def run_one_fold(fold: FoldPlan, cfg: RunConfig, root: str, data, prepared: PreparedSubject,
                 deterministic: bool) -> dict:
    """Train, checkpoint and infer one held-out subject; returns the fold record."""
    ws = Workspace(root)
    d = ws.fold(fold.held_out)
    guard = _single_thread() if deterministic else contextlib.nullcontext()
    with guard:
        with stage(f"train {fold.held_out}"):
            spec, state, norm, tlog = train_fold(
                fold, data, cfg.network, deterministic,
                progress=lambda f, e: log.info("%s epoch %d val %.5f", f.held_out, e.epoch, e.val_loss))
            ck = nn.save_checkpoint(d / "model.json", spec, state, norm)
        with stage(f"infer {fold.held_out}"):
            gen = infer_subject(spec, state, norm, prepared, cfg.sampler, cfg.network.batch_size)
            save_volume(gen, d / "genmvi.qvol")
    rec = {
        "config_hash": cfg.hash(),
        "plan": fold.to_json(),
        "train_log": tlog.to_json(),
        "normalization": norm.to_json(),
        "checkpoint": str(ck.relative_to(ws.root)),
        "genmvi": str((d / "genmvi.qvol").relative_to(ws.root)),
    }
    _write_json(d / "fold.json", rec)
    return rec


def _select_folds(folds: list[FoldPlan], which: str | None) -> list[FoldPlan]:
    if which is None:
        return folds
    for k, f in enumerate(folds):
        if which in (f.held_out, str(k)):
            return [f]
    raise ValueError(f"--fold {which!r} matches no held-out subject or fold index")


def cmd_run(cfg: RunConfig, ws: Workspace, fold: str | None = None, jobs: int = 1,
            deterministic: bool = False, force: bool = False) -> dict:
    with stage("preprocess"):
        prepared = _prepare_all(cfg, ws)
        ids = list(prepared)
    with stage("sample"):
        data = _training_patches(cfg, ws, prepared)
    with stage("folds"):
        folds = make_folds(ids, cfg.seed, cfg.network.val_fraction)
        todo = _select_folds(folds, fold)
    h = cfg.hash()
    records = {}
    pending = []
    for f in todo:
        rec = None if force else _fold_done(ws, f, h)
        if rec is None:
            pending.append(f)
        else:
            log.info("fold %s already complete; skipping", f.held_out)
            records[f.held_out] = rec
    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = {f.held_out: ex.submit(run_one_fold, f, cfg, str(ws.root), data, prepared[f.held_out],
                                          deterministic) for f in pending}
            for k, fut in futs.items():
                records[k] = fut.result()
    else:
        for f in pending:
            records[f.held_out] = run_one_fold(f, cfg, str(ws.root), data, prepared[f.held_out], deterministic)
    for f in folds:
        if f.held_out not in records:
            rec = _fold_done(ws, f, h)
            if rec:
                records[f.held_out] = rec

    manifest = {
        "config_hash": h,
        "config": cfg.to_dict(),
        "scale": {sid: p.scale.to_json() for sid, p in prepared.items()},
        "folds": [f.to_json() for f in folds],
        "fold_results": {k: records[k] for k in sorted(records)},
        "complete": len(records) == len(folds),
    }
    if manifest["complete"]:
        with stage("report"):
            manifest["summary"] = cmd_report(cfg, ws, prepared)
    _write_json(ws.manifest, manifest)
    return manifest


# ----------------------------------------------------------------- report

def cmd_report(cfg: RunConfig, ws: Workspace, prepared=None) -> dict:
    prepared = prepared or _prepare_all(cfg, ws)
    rows, maps, roisets = [], {}, {}
    for sid, p in prepared.items():
        gen_path = ws.fold(sid) / "genmvi.qvol"
        if not gen_path.exists():
            raise FileNotFoundError(f"no GenMVI map for {sid}; run its fold first")
        m = {"MTMVI": p.subject["MTMVI"], "SyMVF": p.subject["SyMVF"], "GenMVI": load_volume(gen_path)}
        maps[sid], roisets[sid] = m, p.rois
        rows.extend(roi_means(sid, p.rois, m))
    roi = run_roi_analysis(rows, cfg.stats.pairing)
    pixel = run_pixel_analysis(list(prepared), roisets, maps)
    written = emit_report(roi, pixel, ws.report)
    summary = {
        "pixel": {k: {m: v[m]["median"] for m in ("SyMVF", "GenMVI")} | {"wilcoxon_p": v["wilcoxon"]["p_value"]}
                  for k, v in pixel["rois"].items()},
        "roi_pooled_r": roi["pooled_correlation"],
        "files": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in written},
    }
    _write_json(ws.report / "summary.json", summary)
    return summary


# ----------------------------------------------------------------- verify

def cmd_verify() -> bool:
    results = oracles.run_all()
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    digest = hashlib.sha256("\n".join(r.line() for r in results).encode()).hexdigest()[:16]
    print(f"{'ALL ORACLES PASS' if ok else 'ORACLE FAILURE'}  ({sum(r.passed for r in results)}/{len(results)}, "
          f"digest {digest})")
    return ok


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (merged over defaults)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    common.add_argument("--fold", help="run only this held-out subject id or fold index")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible mode")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="genmvi", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="generate the synthetic cohort")
    sub.add_parser("run", parents=[common], help="preprocess, train every fold, infer and report")
    sub.add_parser("report", parents=[common], help="recompute statistics from saved GenMVI maps")
    sub.add_parser("verify", parents=[common], help="run the built-in oracle checks")
    return p


def resolve_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ValueError("--seed must be an unsigned 64-bit integer")
        overrides = {"seed": args.seed, "phantom": {"seed": args.seed}, "sampler": {"seed": args.seed}}
    if os.environ.get("MVI_WORKSPACE"):
        overrides["paths"] = {"workspace": os.environ["MVI_WORKSPACE"]}
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "verify":
            return EXIT_OK if cmd_verify() else EXIT_FAIL
        with stage("config"):
            cfg = resolve_config(args)
        ws = Workspace(cfg.workspace)
        guard = _single_thread() if args.deterministic else contextlib.nullcontext()
        with guard:
            if args.command == "phantom":
                with stage("phantom"):
                    print(cmd_phantom(cfg, ws, args.force))
            elif args.command == "run":
                m = cmd_run(cfg, ws, args.fold, args.jobs, args.deterministic, args.force)
                print(ws.manifest if m["complete"] else f"{len(m['fold_results'])}/{len(m['folds'])} folds done")
            else:
                with stage("report"):
                    cmd_report(cfg, ws)
                print(ws.report)
    except StageError as e:
        print(f"error {e}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
