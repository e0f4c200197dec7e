"""ROI-averaged and pixel-wise comparison of SyMVF and GenMVI against MTMVI,
plus CSV/SVG emission of the resulting tables."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .preprocess import RoiSet
from .stats import DegenerateTest, UndefinedCorrelation, pearson, wilcoxon_signed_rank
from .volume import Volume

log = logging.getLogger(__name__)

REGIONS = ("cGM", "sGM", "WM", "WB")
PIXEL_ROIS = ("cGM", "sGM", "WM", "WB", "CC")
METRICS = ("mean_mtmvi", "mean_symvf", "mean_genmvi", "delta_sy", "delta_gen")
CSV_VERSION = 1


@dataclass(frozen=True)
class RoiStatRow:
    subject_id: str
    roi_name: str
    region: str
    mean_mtmvi: float
    mean_symvf: float
    mean_genmvi: float
    delta_sy: float
    delta_gen: float


@dataclass(frozen=True)
class PixelCorrRow:
    subject_id: str
    roi: str
    r_symvf: float
    r_genmvi: float
    n_pixels: int


def _mean(data: np.ndarray, bits: np.ndarray) -> float:
    return float(np.sum(data[bits], dtype=np.float64) / np.count_nonzero(bits))


def roi_means(subject_id: str, rois: RoiSet, maps: Mapping[str, Volume]) -> list[RoiStatRow]:
    """One row per local ROI with the three map averages and the two deltas."""
    mt, sy, gen = (maps[k].data for k in ("MTMVI", "SyMVF", "GenMVI"))
    rows = []
    for name, m in rois.local_rois.items():
        if m.count() == 0:
            log.info("%s: skipping empty ROI %s", subject_id, name)
            continue
        a, b, c = _mean(mt, m.bits), _mean(sy, m.bits), _mean(gen, m.bits)
        rows.append(RoiStatRow(subject_id, name, rois.local_region[name], a, b, c, abs(b - a), abs(c - a)))
    return rows


def _summary(values) -> dict:
    v = np.sort(np.asarray(values, np.float64))
    return {"median": float(np.median(v)), "min": float(v[0]), "max": float(v[-1]), "n": int(v.size)}


def _wilcoxon_or_none(a, b) -> dict:
    try:
        res = wilcoxon_signed_rank(a, b)
    except DegenerateTest as e:
        return {"statistic": None, "p_value": None, "method": None, "verdict": f"no difference ({e})"}
    verdict = "significant" if res.pvalue < 0.05 else "not significant"
    return {"statistic": res.statistic, "p_value": res.pvalue, "method": res.method, "verdict": verdict}


def run_roi_analysis(rows: Sequence[RoiStatRow], pairing: str = "pooled") -> dict:
    """Per-region medians/ranges, ΔSy-vs-ΔGen Wilcoxon, pooled correlations.

    ``pairing="pooled"`` pairs every (subject, ROI) observation;
    ``"per_subject"`` first averages each subject's deltas within the region.
    """
    if len({r.subject_id for r in rows}) < 2:
        raise ValueError("ROI analysis needs rows from at least two subjects")
    tables = {}
    for region in REGIONS:
        sel = [r for r in rows if region == "WB" or r.region == region]
        if not sel:
            raise ValueError(f"no ROI rows for region {region}")
        t = {m: _summary([getattr(r, m) for r in sel]) for m in METRICS}
        if pairing == "pooled":
            dsy = [r.delta_sy for r in sel]
            dgen = [r.delta_gen for r in sel]
        elif pairing == "per_subject":
            subs = sorted({r.subject_id for r in sel})
            dsy = [np.mean([r.delta_sy for r in sel if r.subject_id == s]) for s in subs]
            dgen = [np.mean([r.delta_gen for r in sel if r.subject_id == s]) for s in subs]
        else:
            raise ValueError(f"unknown pairing {pairing!r}")
        t["wilcoxon"] = {**_wilcoxon_or_none(dsy, dgen), "n_pairs": len(dsy)}
        tables[region] = t
    mt = [r.mean_mtmvi for r in rows]
    corr = {
        "r_mtmvi_symvf": pearson(mt, [r.mean_symvf for r in rows]),
        "r_mtmvi_genmvi": pearson(mt, [r.mean_genmvi for r in rows]),
        "n_rois": len(rows),
    }
    return {"regions": tables, "pooled_correlation": corr, "pairing": pairing, "rows": list(rows)}


def pixel_correlations(subject_id: str, rois: RoiSet, maps: Mapping[str, Volume]) -> list[PixelCorrRow]:
    mt, sy, gen = (maps[k].data for k in ("MTMVI", "SyMVF", "GenMVI"))
    out = []
    for roi in PIXEL_ROIS:
        bits = rois.tissue(roi).bits
        n = int(np.count_nonzero(bits))
        if n < 2:
            raise ValueError(f"{subject_id}: ROI {roi} has {n} pixels; need at least 2")
        out.append(PixelCorrRow(subject_id, roi, pearson(sy[bits], mt[bits]), pearson(gen[bits], mt[bits]), n))
    return out


def box_summary(values) -> dict:
    """Median, quartiles and Tukey whiskers (furthest data within 1.5 IQR)."""
    v = np.sort(np.asarray(values, np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "whisker_low": float(lo),
            "whisker_high": float(hi), "n": int(v.size)}


def run_pixel_analysis(subjects: Sequence[str], roisets: Mapping[str, RoiSet],
                       maps: Mapping[str, Mapping[str, Volume]]) -> dict:
    """Per-subject pixel correlations and per-ROI paired Wilcoxon on them."""
    if len(subjects) < 2:
        raise ValueError("pixel analysis needs at least two subjects")
    rows = []
    for sid in subjects:
        rows.extend(pixel_correlations(sid, roisets[sid], maps[sid]))
    per_roi = {}
    for roi in PIXEL_ROIS:
        sel = [r for r in rows if r.roi == roi]
        rs = [r.r_symvf for r in sel]
        rg = [r.r_genmvi for r in sel]
        per_roi[roi] = {
            "SyMVF": box_summary(rs),
            "GenMVI": box_summary(rg),
            "wilcoxon": _wilcoxon_or_none(rg, rs),
        }
    return {"rows": rows, "rois": per_roi}


# ------------------------------------------------------------------ emission

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def table1_rows(roi: dict) -> list[list]:
    rows = []
    for region in REGIONS:
        t = roi["regions"][region]
        for m in METRICS:
            s = t[m]
            rows.append([region, m, s["median"], s["min"], s["max"], None, None, s["n"]])
        wx = t["wilcoxon"]
        rows.append([region, "wilcoxon_delta_sy_vs_delta_gen", None, None, None,
                     wx["statistic"], wx["p_value"], wx["n_pairs"]])
    return rows


def _box_rows(pixel: dict, rois) -> list[list]:
    rows = []
    for roi in rois:
        d = pixel["rois"][roi]
        for mp in ("SyMVF", "GenMVI"):
            b = d[mp]
            rows.append([roi, mp, b["median"], b["q1"], b["q3"], b["whisker_low"], b["whisker_high"], b["n"],
                         d["wilcoxon"]["statistic"], d["wilcoxon"]["p_value"]])
    return rows


BOX_HEADER = ("roi", "map", "median", "q1", "q3", "whisker_low", "whisker_high", "n",
              "wilcoxon_statistic", "wilcoxon_p")


def render_tables(roi: dict, pixel: dict) -> dict[str, str]:
    """File name -> text content for every CSV and SVG output."""
    if not roi["rows"] or not pixel["rows"]:
        raise ValueError("refusing to emit a report from empty tables")
    rr = roi["rows"]
    files = {
        "roi_stats.csv": _csv(list(RoiStatRow.__dataclass_fields__), [list(asdict(r).values()) for r in rr]),
        "pixel_corr.csv": _csv(list(PixelCorrRow.__dataclass_fields__),
                               [list(asdict(r).values()) for r in pixel["rows"]]),
        "table1.csv": _csv(("region", "metric", "median", "min", "max", "statistic", "p_value", "n"),
                           table1_rows(roi)),
        "scatter_fig3.csv": _csv(("subject_id", "roi_name", "region", "mean_mtmvi", "mean_symvf", "mean_genmvi"),
                                 [[r.subject_id, r.roi_name, r.region, r.mean_mtmvi, r.mean_symvf, r.mean_genmvi]
                                  for r in rr]),
        "box_fig4.csv": _csv(BOX_HEADER, _box_rows(pixel, ("cGM", "sGM", "WM", "WB"))),
        "box_fig5.csv": _csv(BOX_HEADER, _box_rows(pixel, ("CC",))),
    }
    pc = roi["pooled_correlation"]
    files["scatter_fig3.svg"] = svg_scatter(
        [r.mean_mtmvi for r in rr],
        {f"SyMVF (r={pc['r_mtmvi_symvf']:.2f})": [r.mean_symvf for r in rr],
         f"GenMVI (r={pc['r_mtmvi_genmvi']:.2f})": [r.mean_genmvi for r in rr]},
    )
    files["box_fig4.svg"] = svg_boxplots(pixel, ("cGM", "sGM", "WM", "WB"))
    files["box_fig5.svg"] = svg_boxplots(pixel, ("CC",))
    return files


def emit_report(roi: dict, pixel: dict, outdir) -> list[Path]:
    files = render_tables(roi, pixel)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(files):
        p = out / name
        p.write_text(files[name])
        written.append(p)
    return written


# ----------------------------------------------------------------------- svg

def _n(v: float) -> str:
    return f"{v:.2f}"


def svg_scatter(x, panels: Mapping[str, Sequence[float]], size: int = 300) -> str:
    """Side-by-side scatter panels of each map against MTMVI (y = x line drawn)."""
    x = np.asarray(x, np.float64)
    allv = np.concatenate([x] + [np.asarray(v, np.float64) for v in panels.values()])
    lo, hi = float(allv.min()), float(allv.max())
    span = hi - lo or 1.0
    pad = 40

    def sx(v):
        return pad + (v - lo) / span * (size - 2 * pad)

    def sy(v):
        return size - pad - (v - lo) / span * (size - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size * len(panels)}" height="{size}">']
    for k, (title, ys) in enumerate(panels.items()):
        ox = k * size
        parts.append(f'<g transform="translate({ox},0)">')
        parts.append(f'<rect x="{pad}" y="{pad}" width="{size - 2 * pad}" height="{size - 2 * pad}" '
                     'fill="none" stroke="black"/>')
        parts.append(f'<line x1="{_n(sx(lo))}" y1="{_n(sy(lo))}" x2="{_n(sx(hi))}" y2="{_n(sy(hi))}" '
                     'stroke="gray" stroke-dasharray="4,3"/>')
        for a, b in zip(x, ys):
            parts.append(f'<circle cx="{_n(sx(a))}" cy="{_n(sy(b))}" r="2" fill="steelblue"/>')
        parts.append(f'<text x="{size // 2}" y="20" text-anchor="middle" font-size="12">{_esc(title)}</text>')
        parts.append(f'<text x="{size // 2}" y="{size - 8}" text-anchor="middle" font-size="11">MTMVI</text>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_boxplots(pixel: dict, rois, height: int = 300) -> str:
    width = 60 + 110 * len(rois)
    pad = 30

    def sy(v):  # correlation axis from -1 to 1
        return height - pad - (v + 1.0) / 2.0 * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    parts.append(f'<line x1="40" y1="{_n(sy(0))}" x2="{width - 10}" y2="{_n(sy(0))}" stroke="lightgray"/>')
    for i, roi in enumerate(rois):
        for j, (mp, colour) in enumerate((("SyMVF", "orange"), ("GenMVI", "steelblue"))):
            b = pixel["rois"][roi][mp]
            cx = 60 + 110 * i + 45 * j
            parts.append(f'<line x1="{cx + 15}" y1="{_n(sy(b["whisker_low"]))}" x2="{cx + 15}" '
                         f'y2="{_n(sy(b["whisker_high"]))}" stroke="black"/>')
            parts.append(f'<rect x="{cx}" y="{_n(sy(b["q3"]))}" width="30" '
                         f'height="{_n(sy(b["q1"]) - sy(b["q3"]))}" fill="{colour}" stroke="black"/>')
            parts.append(f'<line x1="{cx}" y1="{_n(sy(b["median"]))}" x2="{cx + 30}" '
                         f'y2="{_n(sy(b["median"]))}" stroke="black" stroke-width="2"/>')
        parts.append(f'<text x="{60 + 110 * i + 37}" y="{height - 8}" text-anchor="middle" '
                     f'font-size="12">{_esc(roi)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
