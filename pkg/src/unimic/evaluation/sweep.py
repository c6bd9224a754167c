"""Rate-distortion-perception sweep over codec points, prompt levels and beta."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..codecs.descriptor import CodecDescriptor
from ..codecs.registry import CodecRegistry
from ..container import build_stream, compute_bpp
from ..textual import NO_CONTENT, CaptionStore, ConPLevel
from .bd import RDCurve, RDPoint, bd_metric
from .fid import FeatureExtractor, RandomProjectionExtractor, patched_fid
from .interp import dp_interpolate
from .metrics import ms_ssim, ms_ssim_scales, psnr

SUMMARY_COLUMNS = ("label", "codec", "quality", "conp_level", "beta", "bpp", "psnr", "ms_ssim", "fid", "perceptual")
RECORD_COLUMNS = ("label", "image_id", "codec", "quality", "conp_level", "beta", "bpp", "psnr", "ms_ssim", "perceptual")

# (x_v batch, descriptor, ConP prompts) -> x_hat batch, all (N, H, W, 3) in [0, 1]
Compensate = Callable[[np.ndarray, CodecDescriptor, list], np.ndarray]


@dataclass
class SweepResult:
    summary: list[dict]
    records: list[dict]
    curves: list[RDCurve]
    report: dict


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def rdp_sweep(
    images: np.ndarray,
    image_ids: Sequence[str],
    registry: CodecRegistry,
    points: Sequence[CodecDescriptor],
    levels: Sequence[ConPLevel],
    betas: Sequence[float],
    compensate: Compensate | None,
    *,
    captions: CaptionStore | None = None,
    label: str = "unimic",
    fx: FeatureExtractor | None = None,
    fid_patch: int = 256,
    perceptual: Callable[[np.ndarray, np.ndarray], float] | None = None,
    out_dir: str | Path | None = None,
) -> SweepResult:
    """One summary row per (point, level, beta) and one record per image on top.

    bpp is the container size, so it includes the header and the coded ConP.
    ``compensate`` may be ``None`` only when every beta is 0.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("the test set is empty")
    if len(image_ids) != len(images):
        raise ValueError("one id per image is required")
    levels = [ConPLevel(lv) for lv in levels]
    if any(b != 0 for b in betas) and compensate is None:
        raise ValueError("a trained checkpoint is required for beta > 0")
    if any(lv is not ConPLevel.NONE for lv in levels) and captions is None:
        raise ValueError("captions are required for text prompt levels")
    fx = fx or RandomProjectionExtractor()
    h, w = images.shape[1:3]
    summary, records = [], []
    for d in points:
        coded = [registry.encode_visual(img, d) for img in images]
        x_v = np.stack([c[1] for c in coded])
        for level in levels:
            prompts = [NO_CONTENT if level is ConPLevel.NONE else captions.content_prompt(i, level) for i in image_ids]
            bpps = [compute_bpp(build_stream(registry, d, c[0], p, h, w)) for c, p in zip(coded, prompts)]
            x_hat = compensate(x_v, d, prompts) if compensate is not None and any(b != 0 for b in betas) else None
            for beta in betas:
                x_bar = x_v if beta == 0 else np.stack([dp_interpolate(a, b, beta) for a, b in zip(x_v, x_hat)])
                common = {"label": label, "codec": d.name, "quality": d.quality, "conp_level": level.value, "beta": float(beta)}
                per_image = []
                for image_id, x, xb, bpp in zip(image_ids, images, x_bar, bpps):
                    rec = {**common, "image_id": image_id, "bpp": bpp, "psnr": psnr(x, xb), "ms_ssim": ms_ssim(x, xb)}
                    rec["perceptual"] = perceptual(x, xb) if perceptual is not None else None
                    per_image.append(rec)
                records.extend(per_image)
                row = {**common}
                for key in ("bpp", "psnr", "ms_ssim"):
                    row[key] = float(np.mean([r[key] for r in per_image]))
                row["perceptual"] = (
                    float(np.mean([r["perceptual"] for r in per_image])) if perceptual is not None else None
                )
                row["fid"] = patched_fid(images, x_bar, fx, fid_patch)
                summary.append(row)

    curves = _curves(summary)
    report = {
        "ms_ssim_scales": ms_ssim_scales(min(h, w)),
        "fid_patch": fid_patch,
        "bd_normalization": "percent of the anchor's mean metric over the overlapping log-rate range",
        "bd": _bd_table(curves),
    }
    result = SweepResult(summary, records, curves, report)
    if out_dir is not None:
        write_reports(result, out_dir)
    return result


def _curve_key(row: dict) -> tuple:
    return (row["label"], row["codec"], row["conp_level"], row["beta"])


def _curves(summary: Sequence[dict]) -> list[RDCurve]:
    groups: dict[tuple, list[dict]] = {}
    for row in summary:
        groups.setdefault(_curve_key(row), []).append(row)
    curves = []
    for (label, codec, level, beta), rows in groups.items():
        pts = [RDPoint(r["bpp"], r["psnr"], r["ms_ssim"], r["fid"], r["perceptual"]) for r in rows]
        if len({p.bpp for p in pts}) == len(pts):
            curves.append(RDCurve(f"{label}/{codec}/{level}/beta={beta:g}", pts))
    return curves


def _bd_table(curves: Sequence[RDCurve]) -> list[dict]:
    """BD-PSNR and BD-FID of each beta > 0 curve against the beta = 0 curve of the same codec and level."""
    by_label = {c.label: c for c in curves}
    out = []
    for c in curves:
        prefix, _, beta = c.label.rpartition("/beta=")
        anchor = by_label.get(f"{prefix}/beta=0")
        if beta == "0" or anchor is None or len(c.points) < 3:
            continue
        for metric in ("psnr", "fid"):
            try:
                r = bd_metric(anchor, c, metric)
            except ValueError:
                continue
            out.append({"anchor": r.anchor, "test": r.test, "metric": metric, "bd_percent": r.bd_value})
    return out


def write_reports(result: SweepResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(to_csv(result.summary, SUMMARY_COLUMNS), encoding="utf-8")
    (out / "records.csv").write_text(to_csv(result.records, RECORD_COLUMNS), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    plot_curves(result.summary, out)


def plot_curves(summary: Sequence[dict], out_dir: Path) -> list[Path]:
    """One PNG per (codec family, metric): rate on a log x-axis, one line per (level, beta)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    codecs = sorted({r["codec"] for r in summary})
    for codec in codecs:
        rows = [r for r in summary if r["codec"] == codec]
        for metric in ("psnr", "ms_ssim", "fid", "perceptual"):
            if all(r[metric] is None for r in rows):
                continue
            fig, ax = plt.subplots(figsize=(4.5, 3.5))
            for key in sorted({(r["conp_level"], r["beta"]) for r in rows}):
                line = sorted((r for r in rows if (r["conp_level"], r["beta"]) == key), key=lambda r: r["bpp"])
                ax.plot([r["bpp"] for r in line], [r[metric] for r in line], marker="o", label=f"{key[0]}, beta={key[1]:g}")
            ax.set_xscale("log")
            ax.set_xlabel("bpp")
            ax.set_ylabel(metric)
            ax.set_title(codec)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / f"{codec}_{metric}.png"
            fig.savefig(path, metadata={"Software": None})
            plt.close(fig)
            written.append(path)
    return written
