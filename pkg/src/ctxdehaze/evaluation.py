"""Checkpoint evaluation over manifests and side-by-side comparison tables."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch

from .generator import dehaze_tensor
from .haze import read_manifest
from .imaging import MetricReport, from_tensor, load_image, psnr, save_image, ssim, to_tensor
from .trainer import load_generator

log = logging.getLogger(__name__)

OUTPUT_LABELS = {"coarse": "context-net", "fine": "fusion-net"}


def _rgb_psnr(a, b):
    return float(np.mean([psnr(a[:, :, c : c + 1], b[:, :, c : c + 1]) for c in range(3)]))


def _rgb_ssim(a, b):
    return float(np.mean([ssim(a[:, :, c : c + 1], b[:, :, c : c + 1]) for c in range(3)]))


def generator_predictor(gen):
    def predict(hazy, clear=None):
        coarse, fine = dehaze_tensor(gen, to_tensor(hazy))
        return from_tensor(coarse), from_tensor(fine)

    return predict


def identity_predictor(hazy, clear):
    """Test hook: returns the ground truth as both outputs."""
    return clear, clear


def evaluate(checkpoint, manifest_path, which="both", split="test", predictor=None,
             rgb=False, dump_dir=None):
    """PSNR/SSIM of the requested outputs against ground truth.

    Returns ``{"coarse": MetricReport, "fine": MetricReport}`` restricted to
    ``which``.  ``predictor(hazy, clear) -> (coarse, fine)`` overrides the
    checkpoint model.
    """
    if which not in ("coarse", "fine", "both"):
        raise ValueError(f"which must be coarse, fine or both, got {which!r}")
    outputs = ("coarse", "fine") if which == "both" else (which,)
    if predictor is None:
        predictor = generator_predictor(load_generator(checkpoint))
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    reports = {o: MetricReport(label=OUTPUT_LABELS[o], split=split) for o in outputs}
    p_fn, s_fn = (_rgb_psnr, _rgb_ssim) if rgb else (psnr, ssim)

    for rec in read_manifest(manifest_path).split(split):
        rid = Path(rec.hazy_path).stem
        try:
            hazy = load_image(root / rec.hazy_path)
            clear = load_image(root / rec.clear_path)
        except (OSError, ValueError) as exc:
            for rep in reports.values():
                rep.failures.append((rid, f"undecodable: {exc}"))
            continue
        with torch.no_grad():
            coarse, fine = predictor(hazy, clear)
        result = {"coarse": coarse, "fine": fine}
        for o in outputs:
            reports[o].add(rid, p_fn(result[o], clear), s_fn(result[o], clear))
        if dump_dir is not None:
            d = Path(dump_dir)
            save_image(d / f"{rid}_I.png", hazy)
            save_image(d / f"{rid}_coarse.png", coarse)
            save_image(d / f"{rid}_fine.png", fine)
            save_image(d / f"{rid}_J.png", clear)
    return reports


def write_report(report, path):
    Path(path).write_text(report.to_text())
    return Path(path)


def compare_report(reports, path):
    """Write an aligned text table and a TSV twin; one column per report.

    Returns ``(text_path, tsv_path)``.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    labels = [r.label or f"report{i}" for i, r in enumerate(reports)]
    splits = []
    for r in reports:
        if r.split not in splits:
            splits.append(r.split)

    rows = []
    for split in splits:
        for metric, fmt in (("PSNR", "{:.2f}"), ("SSIM", "{:.4f}")):
            vals = []
            for r in reports:
                if r.split != split:
                    vals.append(None)
                else:
                    vals.append(r.psnr_db if metric == "PSNR" else r.ssim)
            rows.append((split, metric, fmt, vals))

    path = Path(path)
    tsv_path = path.with_suffix(".tsv")
    with open(tsv_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["split", "metric"] + labels)
        for split, metric, _, vals in rows:
            w.writerow([split, metric] + ["" if v is None else repr(v) for v in vals])
        w.writerow(["", "failures"] + [str(len(r.failures)) for r in reports])

    header = ["split", "metric"] + labels
    body = [[s, m] + ["-" if v is None else f.format(v) for v in vals] for s, m, f, vals in rows]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(wd) for c, wd in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * wd for wd in widths))
    for row in body:
        lines.append("  ".join(str(c).ljust(wd) for c, wd in zip(row, widths)).rstrip())
    lines.append("")
    for label, r in zip(labels, reports):
        n = len(r.failures)
        lines.append(f"{label}: {n} failure{'s' if n != 1 else ''}")
        for rid, msg in r.failures:
            lines.append(f"  {rid}: {msg}")
    path.write_text("\n".join(lines) + "\n")
    return path, tsv_path


def parse_table(tsv_path):
    """Read a comparison TSV back into ``{(split, metric): {label: value}}``."""
    with open(tsv_path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    labels = rows[0][2:]
    table = {}
    for row in rows[1:]:
        split, metric, *vals = row
        conv = int if metric == "failures" else float
        table[(split, metric)] = {l: conv(v) for l, v in zip(labels, vals) if v != ""}
    return table
