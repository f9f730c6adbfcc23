"""Segmentation metrics: IoU, base/novel mIoU, harmonic mean, aliasing confusion."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import BACKGROUND
from .errors import IoError, LabelError, ShapeError

SUMMARY_COLUMNS = ("fold", "shots", "protocol", "miou_base", "miou_novel", "hm")


def _check(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def iou(pred, gt, class_id: int) -> float | None:
    """Intersection over union for one class; ``None`` when the class is in neither map."""
    pred, gt = _check(pred, gt)
    p, g = pred == class_id, gt == class_id
    union = np.count_nonzero(p | g)
    if union == 0:
        return None
    return np.count_nonzero(p & g) / union


def mean_iou(per_class: dict[int, float | None], classes: Iterable[int]) -> float:
    vals = [per_class[c] for c in classes if per_class.get(c) is not None]
    return float(np.mean(vals)) if vals else 0.0


def harmonic_mean(base: float, novel: float) -> float:
    if base == 0 or novel == 0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


def confusion_matrix(pred, gt, classes: Sequence[int]) -> np.ndarray:
    """Entry ``[a, b]`` counts pixels with truth ``classes[a]`` predicted as ``classes[b]``."""
    pred, gt = _check(pred, gt)
    k = len(classes)
    lut = np.full(int(max(classes)) + 1, -1, dtype=np.int64)
    lut[list(classes)] = np.arange(k)

    def index(x):
        x = x.astype(np.int64).ravel()
        if x.size and (x.max() >= lut.size or np.any(lut[x] < 0)):
            raise LabelError(f"labels outside the class list {list(classes)}")
        return lut[x]

    return np.bincount(index(gt) * k + index(pred), minlength=k * k).reshape(k, k)


@dataclass
class AliasingSummary:
    classes: list[int]
    confusion: np.ndarray
    base_to_novel: float
    novel_to_base: float
    per_class: dict[int, float]  # per truth class: share of its pixels sent to the other block


def aliasing_matrix(pred, gt, classes: Sequence[int], base: Sequence[int],
                    novel: Sequence[int]) -> AliasingSummary:
    """Confusion over ``classes`` plus the cross-block confusion rates.

    ``base_to_novel`` is the fraction of base-class truth pixels predicted as any
    novel class, and ``novel_to_base`` the converse; 0 when the block is absent.
    """
    classes = [int(c) for c in classes]
    conf = confusion_matrix(pred, gt, classes)
    bi = [classes.index(c) for c in base if c in classes]
    ni = [classes.index(c) for c in novel if c in classes]

    def rate(rows, cols):
        mass = conf[rows].sum()
        return float(conf[np.ix_(rows, cols)].sum() / mass) if rows and cols and mass else 0.0

    per_class = {}
    for c in classes:
        i = classes.index(c)
        other = ni if i in bi else bi if i in ni else []
        per_class[c] = rate([i], other)
    return AliasingSummary(classes, conf, rate(bi, ni), rate(ni, bi), per_class)


@dataclass
class MetricsReport:
    step_index: int
    classes: list[int]
    per_class_iou: dict[int, float | None]
    miou_base: float
    miou_novel: float
    hm: float
    confusion: np.ndarray
    base_to_novel: float = 0.0
    novel_to_base: float = 0.0
    context: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = dict(self.context)
        rec.update({
            "step_index": self.step_index,
            "classes": list(self.classes),
            "per_class_iou": {str(c): v for c, v in self.per_class_iou.items()},
            "miou_base": self.miou_base,
            "miou_novel": self.miou_novel,
            "hm": self.hm,
            "confusion": self.confusion.tolist(),
            "base_to_novel": self.base_to_novel,
            "novel_to_base": self.novel_to_base,
        })
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "MetricsReport":
        known = {"step_index", "classes", "per_class_iou", "miou_base", "miou_novel", "hm",
                 "confusion", "base_to_novel", "novel_to_base"}
        return cls(
            step_index=rec["step_index"], classes=list(rec["classes"]),
            per_class_iou={int(k): v for k, v in rec["per_class_iou"].items()},
            miou_base=rec["miou_base"], miou_novel=rec["miou_novel"], hm=rec["hm"],
            confusion=np.asarray(rec["confusion"], dtype=np.int64),
            base_to_novel=rec["base_to_novel"], novel_to_base=rec["novel_to_base"],
            context={k: v for k, v in rec.items() if k not in known})


def evaluate(pred, gt, classes: Sequence[int], base: Sequence[int], novel: Sequence[int],
             step_index: int = 0, context: dict | None = None) -> MetricsReport:
    """Score a prediction over the learned ``classes`` (background included)."""
    classes = [int(c) for c in classes]
    per_class = {c: iou(pred, gt, c) for c in classes}
    fg_base = [c for c in base if c in classes and c != BACKGROUND]
    fg_novel = [c for c in novel if c in classes and c != BACKGROUND]
    mb, mn = mean_iou(per_class, fg_base), mean_iou(per_class, fg_novel)
    alias = aliasing_matrix(pred, gt, classes, fg_base, fg_novel)
    return MetricsReport(step_index, classes, per_class, mb, mn, harmonic_mean(mb, mn),
                         alias.confusion, alias.base_to_novel, alias.novel_to_base,
                         dict(context or {}))


# --------------------------------------------------------------------------
# serialization


def write_reports(reports: Sequence[MetricsReport], path) -> None:
    """One JSON object per line, keys sorted so identical runs give identical bytes."""
    lines = [json.dumps(r.to_record(), sort_keys=True) for r in reports]
    try:
        Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_reports(path) -> list[MetricsReport]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return [MetricsReport.from_record(json.loads(ln)) for ln in text.splitlines() if ln.strip()]


def write_summary(rows: Sequence[dict], path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k])
                            for k in SUMMARY_COLUMNS})
    except OSError as exc:
        raise IoError(str(exc)) from exc
