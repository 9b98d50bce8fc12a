"""Reconstruction and segmentation metrics, and Table-1 style reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError
from .imaging import (
    SCALE,
    BinaryMask,
    DatasetManifest,
    GrayImage,
    crop_to_multiple,
    degrade,
    load_image,
    load_mask,
)
from .models import Network, super_resolve
from .tensor import sigmoid

MSE_FLOOR = 1e-12


def snr(hr: GrayImage, sr: GrayImage) -> float:
    """10·log10(1 / MSE) in dB; identical images give the 120 dB cap."""
    if hr.pixels.shape != sr.pixels.shape:
        raise ShapeError(f"snr: HR {hr.pixels.shape} vs SR {sr.pixels.shape}")
    diff = hr.pixels.astype(np.float64) - sr.pixels.astype(np.float64)
    return snr_from_mse(float(np.mean(diff * diff)))


def snr_from_mse(mse: float) -> float:
    return 10.0 * math.log10(1.0 / max(mse, MSE_FLOOR))


def _mask_bits(a: BinaryMask, b: BinaryMask) -> tuple[np.ndarray, np.ndarray]:
    if a.bits.shape != b.bits.shape:
        raise ShapeError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    return a.bits.astype(np.int64), b.bits.astype(np.int64)


def iou(b_seg: BinaryMask, b_gt: BinaryMask) -> float:
    """Overlap score 2|seg*gt| / (|seg| + |gt|); two empty masks score 1.

    Note this is the Dice form; :func:`jaccard` is the strict |∩|/|∪| variant.
    """
    s, g = _mask_bits(b_seg, b_gt)
    denom = int(s.sum() + g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((s * g).sum()) / denom


def jaccard(b_seg: BinaryMask, b_gt: BinaryMask) -> float:
    s, g = _mask_bits(b_seg, b_gt)
    union = int(np.maximum(s, g).sum())
    if union == 0:
        return 1.0
    return int((s * g).sum()) / union


def standard_error(values: Sequence[float]) -> float:
    """Sample standard deviation (n-1) over sqrt(n); zero for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ParameterError("standard_error needs at least one value")
    if arr.size == 1:
        return 0.0
    return float(np.std(arr, ddof=1) / math.sqrt(arr.size))


# ---------------------------------------------------------------------------
# segmentation and table reports

# (lr_small, lr_input) as (1, 1, h, w) batches -> SR batch at HR size
SRFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


def segment(img: GrayImage, segmenter: Network, threshold: float = 0.5) -> BinaryMask:
    """Root mask: pixels whose predicted probability is at least ``threshold``."""
    logits = segmenter.infer(img.pixels[None, None])[0, 0]
    return BinaryMask((sigmoid(logits) >= threshold).astype(np.uint8))


def model_sr_function(model: Network) -> SRFunction:
    return lambda small, up: super_resolve(model, small, up)


def bicubic_sr(small: np.ndarray, up: np.ndarray) -> np.ndarray:
    return up


@dataclass
class EvalRecord:
    """One table row. The HR row has no SNR; rows lack IoU without a segmenter."""

    model_name: str
    snr_mean: float | None
    snr_se: float | None
    iou_mean: float | None
    iou_se: float | None
    n_images: int
    snr_values: list[float] = field(default_factory=list, repr=False)
    iou_values: list[float] = field(default_factory=list, repr=False)


def _summarize(name: str, snrs: list[float] | None, ious: list[float] | None, n: int) -> EvalRecord:
    def stats(vals):
        return (float(np.mean(vals)), standard_error(vals)) if vals else (None, None)
    snr_mean, snr_se = stats(snrs)
    iou_mean, iou_se = stats(ious)
    return EvalRecord(name, snr_mean, snr_se, iou_mean, iou_se, n, list(snrs or []),
                      list(ious or []))


def evaluate_models(models: Sequence[tuple[str, SRFunction]], manifest: DatasetManifest,
                    segmenter: Network | None = None, threshold: float = 0.5) -> list[EvalRecord]:
    """Degrade every test image ×4, super-resolve it with each model and score it.

    Rows: "Bicubic" first, then ``models`` in order, then "HR" (IoU of the
    untouched image only). IoU columns are filled when a segmenter is given,
    which requires a mask for every entry.
    """
    if not manifest.entries:
        raise ConfigError("test manifest has no entries")
    names = ["Bicubic"] + [name for name, _ in models]
    if len(set(names)) != len(names) or "HR" in names:
        raise ConfigError(f"model names must be unique and not 'Bicubic'/'HR': {names}")
    if segmenter is not None:
        missing = [str(e.image) for e in manifest.entries if e.mask is None]
        if missing:
            raise ConfigError("IoU needs ground-truth masks; missing for: " + ", ".join(missing))
    fns: list[SRFunction] = [bicubic_sr] + [fn for _, fn in models]
    snrs: list[list[float]] = [[] for _ in fns]
    ious: list[list[float]] = [[] for _ in range(len(fns) + 1)]
    for entry in manifest.entries:
        hr = crop_to_multiple(load_image(entry.image), SCALE)
        small, up = degrade(hr, SCALE)
        gt = None
        if segmenter is not None:
            gt = load_mask(entry.mask)
            h, w = hr.pixels.shape
            gt = BinaryMask(gt.bits[:h, :w])
            ious[-1].append(iou(segment(hr, segmenter, threshold), gt))
        for k, fn in enumerate(fns):
            out = np.asarray(fn(small.pixels[None, None], up.pixels[None, None]))
            sr = GrayImage(out.reshape(hr.pixels.shape))
            snrs[k].append(snr(hr, sr))
            if gt is not None:
                ious[k].append(iou(segment(sr, segmenter, threshold), gt))
    n = len(manifest.entries)
    with_iou = segmenter is not None
    records = [_summarize(name, snrs[k], ious[k] if with_iou else None, n)
               for k, name in enumerate(names)]
    records.append(_summarize("HR", None, ious[-1] if with_iou else None, n))
    return records


def _cell(mean: float | None, se: float | None, digits: int) -> str:
    if mean is None:
        return "---"
    return f"{mean:.{digits}f} ({se:.{digits}f})"


def format_table(records: Sequence[EvalRecord]) -> str:
    """Aligned text, one numbered row per model: ``1. Bicubic  28.30 (1.37)  0.0984 (0.0098)``."""
    with_iou = any(r.iou_mean is not None for r in records)
    columns = [[f"{i}. {r.model_name}" for i, r in enumerate(records, 1)],
               [_cell(r.snr_mean, r.snr_se, 2) for r in records]]
    if with_iou:
        columns.append([_cell(r.iou_mean, r.iou_se, 4) for r in records])
    widths = [max(len(c) for c in col) for col in columns]
    lines = []
    for row in zip(*columns):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def write_table_tsv(records: Sequence[EvalRecord], path) -> None:
    """Tab-separated table; IoU columns only when some row has them."""
    with_iou = any(r.iou_mean is not None for r in records)
    header = ["index", "model", "snr_mean", "snr_se"] + (["iou_mean", "iou_se"] if with_iou else [])

    def num(x):
        return "---" if x is None else repr(float(x))

    lines = ["\t".join(header)]
    for i, r in enumerate(records, 1):
        row = [str(i), r.model_name, num(r.snr_mean), num(r.snr_se)]
        if with_iou:
            row += [num(r.iou_mean), num(r.iou_se)]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
