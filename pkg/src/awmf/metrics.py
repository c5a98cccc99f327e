"""Segmentation scores, expert-agreement tables, mask stitching and rendering."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, ShapeError
from .objectives import IGNORE

# rows = ground truth, columns = prediction


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred, gt, n_classes: int) -> ConfusionMatrix:
    """Count (ground truth, prediction) pairs over non-ignored pixels."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction extents {pred.shape} do not match ground truth {gt.shape}")
    keep = gt != IGNORE
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= n_classes or g.min() < 0 or p.max() >= n_classes or p.min() < 0):
        raise ShapeError(f"label values outside 0..{n_classes - 1}")
    counts = np.bincount(g * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def _class_mean(num: np.ndarray, den: np.ndarray, what: str) -> float:
    ok = den > 0
    if not ok.all():
        warnings.warn(
            f"{what}: {int((~ok).sum())} class(es) with zero denominator excluded; "
            f"averaging over {int(ok.sum())} class(es)",
            RuntimeWarning,
            stacklevel=3,
        )
    if not ok.any():
        return float("nan")
    return float(np.mean(num[ok] / den[ok]))


def op_accuracy(cm: ConfusionMatrix) -> float:
    den = (cm.tp + cm.fp).sum()
    return float(cm.tp.sum() / den) if den else float("nan")


def pc_accuracy(cm: ConfusionMatrix) -> float:
    """Mean over classes of TP / (TP + FP), exactly as printed in the method's metric table."""
    return _class_mean(cm.tp, cm.tp + cm.fp, "PC")


def miou(cm: ConfusionMatrix) -> float:
    return _class_mean(cm.tp, cm.tp + cm.fp + cm.fn, "mIoU")


def effective_classes(cm: ConfusionMatrix) -> int:
    return int(((cm.tp + cm.fp + cm.fn) > 0).sum())


# ----------------------------------------------------------------- agreement

SUBSET_NAMES = ("none", "E1", "E2", "E1E2", "E3", "E1E3", "E2E3", "E1E2E3")


@dataclass
class AgreementTable:
    """Pixel counts per subset of correct experts, indexed by bitmask (bit k = expert k+1)."""

    counts: np.ndarray
    class_counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _rates(self, counts: np.ndarray) -> np.ndarray:
        total = counts.sum()
        return counts / total if total else np.full(8, np.nan)

    @property
    def subset_rates(self) -> np.ndarray:
        return self._rates(self.counts)

    def class_subset_rates(self, c: int) -> np.ndarray:
        return self._rates(self.class_counts[c])

    def expert_rate(self, k: int, counts: np.ndarray | None = None) -> float:
        rates = self._rates(self.counts if counts is None else counts)
        return float(sum(rates[m] for m in range(8) if m >> (k - 1) & 1))

    @property
    def expert_rates(self) -> np.ndarray:
        return np.array([self.expert_rate(k) for k in (1, 2, 3)])

    @property
    def union_rate(self) -> float:
        return float(1.0 - self.subset_rates[0])

    @property
    def intersection_rate(self) -> float:
        return float(self.subset_rates[7])

    def pairwise_rate(self, i: int, j: int) -> float:
        bits = (1 << (i - 1)) | (1 << (j - 1))
        rates = self.subset_rates
        return float(sum(rates[m] for m in range(8) if m & bits == bits))

    def exclusive_rate(self, k: int) -> float:
        return float(self.subset_rates[1 << (k - 1)])


def agreement(expert_preds: Sequence, gt, n_classes: int | None = None) -> AgreementTable:
    if len(expert_preds) != 3:
        raise ShapeError(f"need three expert predictions, got {len(expert_preds)}")
    gt = np.asarray(gt)
    preds = [np.asarray(p) for p in expert_preds]
    for p in preds:
        if p.shape != gt.shape:
            raise ShapeError(f"expert prediction extents {p.shape} do not match ground truth {gt.shape}")
    keep = gt != IGNORE
    g = gt[keep].astype(np.int64)
    if n_classes is None:
        n_classes = int(g.max()) + 1 if g.size else 1
    mask = np.zeros(g.shape, dtype=np.int64)
    for k, p in enumerate(preds):
        mask |= (p[keep] == g).astype(np.int64) << k
    counts = np.bincount(mask, minlength=8)
    class_counts = np.bincount(g * 8 + mask, minlength=8 * n_classes).reshape(n_classes, 8)
    return AgreementTable(counts, class_counts)


# ----------------------------------------------------------------- masks

def stitch_masks(patch_preds: Sequence, extents: tuple) -> np.ndarray:
    """Paste ``((row, col), labels)`` patches into a slide-sized map; gaps stay ignore."""
    h, w = extents
    out = np.full((h, w), IGNORE, dtype=np.uint8)
    covered = np.zeros((h, w), dtype=bool)
    for (r, c), labels in patch_preds:
        labels = np.asarray(labels)
        ph, pw = labels.shape
        if r < 0 or c < 0 or r + ph > h or c + pw > w:
            raise ShapeError(f"patch at {(r, c)} with extents {labels.shape} falls outside the slide {extents}")
        if covered[r:r + ph, c:c + pw].any():
            raise ValueError(f"patch at {(r, c)} overlaps an earlier patch")
        out[r:r + ph, c:c + pw] = labels
        covered[r:r + ph, c:c + pw] = True
    return out


DEFAULT_PALETTE = {
    0: (0, 255, 0),
    1: (255, 255, 0),
    2: (255, 0, 0),
    3: (0, 0, 255),
    4: (128, 0, 128),
    IGNORE: (0, 0, 0),
}


def render_mask(labels, palette: Mapping[int, tuple] | None = None) -> np.ndarray:
    """Colour a label map; ignore pixels are black unless the palette says otherwise."""
    palette = dict(DEFAULT_PALETTE if palette is None else palette)
    palette.setdefault(IGNORE, (0, 0, 0))
    labels = np.asarray(labels)
    present = np.unique(labels)
    missing = [int(v) for v in present if int(v) not in palette]
    if missing:
        raise ConfigError(f"palette has no colour for label(s) {missing}")
    lut = np.zeros((256, 3), dtype=np.uint8)
    for value, rgb in palette.items():
        lut[int(value)] = rgb
    return lut[labels.astype(np.uint8)]


def merge_cascade(two_class: np.ndarray, subtype: np.ndarray, subtype_offset: int = 1,
                  tumor_label: int = 1) -> np.ndarray:
    """Combine a normal/tumour map with a subtype map.

    Pixels predicted tumour take ``subtype + subtype_offset``; everything
    else keeps its two-class label. Ignore pixels stay ignore.
    """
    two_class, subtype = np.asarray(two_class), np.asarray(subtype)
    if two_class.shape != subtype.shape:
        raise ShapeError(f"cascade maps differ in extents: {two_class.shape} vs {subtype.shape}")
    out = two_class.astype(np.int64).copy()
    tumor = two_class == tumor_label
    sub_ok = subtype != IGNORE
    out[tumor & sub_ok] = subtype[tumor & sub_ok].astype(np.int64) + subtype_offset
    out[tumor & ~sub_ok] = IGNORE
    return out.astype(np.uint8)


def cascade_segment(bundle2, bundle4, slide, variant: str = "adaptive", subtype_offset: int = 1,
                    interpolation: str | None = None) -> np.ndarray:
    """Two-stage segmentation: normal/tumour first, then subtypes inside tumour."""
    from .inference import segment_slide

    if bundle2.window != bundle4.window or tuple(bundle2.scales) != tuple(bundle4.scales):
        raise ConfigError(
            f"cascade models disagree on geometry: W={bundle2.window}/{bundle4.window}, "
            f"scales={bundle2.scales}/{bundle4.scales}"
        )
    if bundle2.n_classes != 2:
        raise ConfigError(f"first cascade stage must be a two-class model, got {bundle2.n_classes} classes")
    two = segment_slide(bundle2, slide, variant, interpolation=interpolation)
    sub = segment_slide(bundle4, slide, variant, interpolation=interpolation)
    return merge_cascade(two, sub, subtype_offset)


# ----------------------------------------------------------------- reports

METRIC_COLUMNS = ("model", "row", "tp", "fp", "fn", "precision", "iou", "value")


def metrics_rows(model: str, cm: ConfusionMatrix) -> list:
    rows = []
    for c in range(cm.n_classes):
        tp, fp, fn = int(cm.tp[c]), int(cm.fp[c]), int(cm.fn[c])
        prec = tp / (tp + fp) if tp + fp else float("nan")
        iou = tp / (tp + fp + fn) if tp + fp + fn else float("nan")
        rows.append({"model": model, "row": f"class_{c}", "tp": tp, "fp": fp, "fn": fn,
                     "precision": prec, "iou": iou, "value": ""})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for name, value in (("OP", op_accuracy(cm)), ("PC", pc_accuracy(cm)), ("mIoU", miou(cm))):
            rows.append({"model": model, "row": name, "tp": "", "fp": "", "fn": "",
                         "precision": "", "iou": "", "value": value})
    return rows


def write_metrics_report(path, matrices: Mapping[str, ConfusionMatrix]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for model, cm in matrices.items():
            writer.writerows(metrics_rows(model, cm))


AGREEMENT_COLUMNS = ("stage", "scope") + SUBSET_NAMES + ("union", "intersection")


def agreement_rows(stage: str, table: AgreementTable) -> list:
    def _row(scope, counts):
        total = counts.sum()
        rates = counts / total if total else np.full(8, np.nan)
        row = {"stage": stage, "scope": scope}
        row.update({name: float(r) for name, r in zip(SUBSET_NAMES, rates)})
        row["union"] = float(1.0 - rates[0])
        row["intersection"] = float(rates[7])
        return row

    rows = [_row("overall", table.counts)]
    for c in range(table.class_counts.shape[0]):
        rows.append(_row(f"class_{c}", table.class_counts[c]))
    return rows


def write_agreement_report(path, tables: Mapping[str, AgreementTable]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGREEMENT_COLUMNS)
        writer.writeheader()
        for stage, table in tables.items():
            writer.writerows(agreement_rows(stage, table))
