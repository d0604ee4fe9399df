"""Pixel confusion counts, POD / FAR / CSI and coverage-binned evaluation.

Counts are pooled (micro-averaged) over every pixel of every frame and
sample before the ratios are taken.  A ratio whose denominator is zero is
undefined and reported as ``None``.

CSI is ``TP / (TP + FP + FN)``, the intersection-over-union of the positive
class.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    if not np.isin(m, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return m.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _binary(pred_mask, "prediction")
    gt = _binary(gt_mask, "ground truth")
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, int(pred.size) - tp - fp - fn)


def pod(c: ConfusionCounts) -> float | None:
    d = c.tp + c.fn
    return c.tp / d if d else None


def far(c: ConfusionCounts) -> float | None:
    d = c.tp + c.fp
    return c.fp / d if d else None


def csi(c: ConfusionCounts) -> float | None:
    d = c.tp + c.fp + c.fn
    return c.tp / d if d else None


# ---------------------------------------------------------------------------
# coverage bins
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageBin:
    """Half-open interval ``[lo, hi)`` of positive-pixel percentage."""

    lo: float
    hi: float = math.inf

    def contains(self, fraction) -> bool:
        pct = Fraction(fraction) * 100
        return Fraction(self.lo) <= pct and (self.hi == math.inf or pct < Fraction(self.hi))

    @property
    def label(self) -> str:
        lo = f"{self.lo:g}%"
        return f"{lo}-" if self.hi == math.inf else f"{lo}-{self.hi:g}%"


def default_bins() -> list[CoverageBin]:
    return [CoverageBin(i, i + 1) for i in range(5)] + [CoverageBin(5)]


def parse_bins(edges: Sequence[float]) -> list[CoverageBin]:
    """Bins from increasing percent edges; the last bin is open-ended."""
    edges = [float(e) for e in edges]
    if not edges or edges[0] != 0 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must start at 0 and increase strictly")
    return [CoverageBin(a, b) for a, b in zip(edges, edges[1:])] + [CoverageBin(edges[-1])]


def coverage_fraction(gt_mask) -> float:
    gt = _binary(gt_mask, "ground truth")
    return float(np.count_nonzero(gt)) / gt.size


def assign_bin(fraction, bins: Sequence[CoverageBin]) -> CoverageBin:
    for b in bins:
        if b.contains(fraction):
            return b
    raise ValueError(f"coverage {fraction} falls outside every bin")


@dataclass
class MetricsReport:
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    samples: int = 0
    bins: dict[CoverageBin, "MetricsReport"] = field(default_factory=dict)

    @property
    def pod(self):
        return pod(self.counts)

    @property
    def far(self):
        return far(self.counts)

    @property
    def csi(self):
        return csi(self.counts)

    # -- serialisation ----------------------------------------------------------
    def rows(self) -> list[tuple[str, "MetricsReport"]]:
        return [("overall", self)] + [(b.label, r) for b, r in self.bins.items()]

    def to_table(self) -> str:
        def fmt(v):
            return "   n/a" if v is None else f"{v:.5f}"

        lines = [f"{'bin':>10} {'samples':>8} {'POD':>8} {'FAR':>8} {'CSI':>8} {'TP':>10} {'FP':>10} {'FN':>10} {'TN':>12}"]
        for label, r in self.rows():
            c = r.counts
            lines.append(f"{label:>10} {r.samples:>8} {fmt(r.pod):>8} {fmt(r.far):>8} {fmt(r.csi):>8} "
                         f"{c.tp:>10} {c.fp:>10} {c.fn:>10} {c.tn:>12}")
        return "\n".join(lines) + "\n"

    def to_keyvalue(self, extra: dict | None = None) -> str:
        out = []
        for k, v in (extra or {}).items():
            out.append(f"{k}={v}")
        for label, r in self.rows():
            key = "overall" if label == "overall" else f"bin[{label}]"
            for name in ("pod", "far", "csi"):
                v = getattr(r, name)
                out.append(f"{key}.{name}={'undefined' if v is None else repr(v)}")
            c = r.counts
            out.append(f"{key}.samples={r.samples}")
            out.extend(f"{key}.{n}={getattr(c, n)}" for n in ("tp", "fp", "fn", "tn"))
        return "\n".join(out) + "\n"

    def to_bins_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "lo_pct", "hi_pct", "samples", "tp", "fp", "fn", "tn", "pod", "far", "csi"])
        for b, r in self.bins.items():
            c = r.counts
            w.writerow([b.label, b.lo, "" if b.hi == math.inf else b.hi, r.samples, c.tp, c.fp, c.fn, c.tn,
                        *("" if v is None else repr(v) for v in (r.pod, r.far, r.csi))])
        return buf.getvalue()


def binned_evaluate(pred_masks: Iterable, gt_masks: Iterable, bins: Sequence[CoverageBin] | None = None) -> MetricsReport:
    """Score aligned per-sample masks, pooled overall and per coverage bin.

    A sample lands in the bin containing its ground-truth coverage averaged
    over all of its frames.
    """
    bins = list(bins or default_bins())
    report = MetricsReport(bins={b: MetricsReport() for b in bins})
    for pred, gt in zip(pred_masks, gt_masks, strict=True):
        c = confusion(pred, gt)
        gt_arr = np.asarray(gt)
        frac = Fraction(int(np.count_nonzero(gt_arr)), gt_arr.size)
        sub = report.bins[assign_bin(frac, bins)]
        sub.counts = sub.counts + c
        sub.samples += 1
        report.counts = report.counts + c
        report.samples += 1
    return report


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

# true negatives stay black; false positives use blue as a third colour
OVERLAY_COLORS = {
    "tp": (0, 255, 0),
    "fn": (255, 0, 0),
    "fp": (0, 0, 255),
}


def overlay(pred_mask, gt_mask) -> np.ndarray:
    """RGB ``[H, W, 3]`` uint8 image colouring each pixel by its confusion class."""
    pred = _binary(pred_mask, "prediction")
    gt = _binary(gt_mask, "ground truth")
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"overlay needs equal 2-D masks, got {pred.shape} and {gt.shape}")
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    rgb[pred & gt] = OVERLAY_COLORS["tp"]
    rgb[~pred & gt] = OVERLAY_COLORS["fn"]
    rgb[pred & ~gt] = OVERLAY_COLORS["fp"]
    return rgb
