import math
from fractions import Fraction

import numpy as np
import pytest

from mcsdnet.evaluation import (
    OVERLAY_COLORS, ConfusionCounts, CoverageBin, assign_bin, binned_evaluate, confusion,
    coverage_fraction, csi, default_bins, far, overlay, parse_bins, pod,
)


def loop_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def test_confusion_examples():
    gt = np.zeros((5, 5), np.uint8)
    gt.flat[:10] = 1
    assert confusion(gt, gt) == ConfusionCounts(10, 0, 0, 15)
    assert confusion(np.zeros_like(gt), gt).fn == 10


def test_confusion_matches_loop_oracle(np_rng):
    for _ in range(50):
        pred = (np_rng.uniform(size=(32, 32)) < np_rng.uniform()).astype(np.uint8)
        gt = (np_rng.uniform(size=(32, 32)) < np_rng.uniform()).astype(np.uint8)
        c = confusion(pred, gt)
        assert c == loop_counts(pred, gt)
        assert c.total == 1024


def test_confusion_rejects_bad_input():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        confusion(np.full((2, 2), 2), np.zeros((2, 2)))


def test_counts_add_over_disjoint_pixels(np_rng):
    pred = np_rng.integers(0, 2, size=(4, 16))
    gt = np_rng.integers(0, 2, size=(4, 16))
    assert confusion(pred, gt) == confusion(pred[:1], gt[:1]) + confusion(pred[1:], gt[1:])


def test_metrics_invariant_under_joint_permutation(np_rng):
    pred = np_rng.integers(0, 2, size=256)
    gt = np_rng.integers(0, 2, size=256)
    perm = np_rng.permutation(256)
    assert confusion(pred, gt) == confusion(pred[perm], gt[perm])


def test_ratio_examples():
    c = ConfusionCounts(tp=2, fp=1, fn=1)
    assert (pod(c), far(c), csi(c)) == (2 / 3, 1 / 3, 1 / 2)
    perfect = ConfusionCounts(tp=7, tn=3)
    assert (pod(perfect), far(perfect), csi(perfect)) == (1.0, 0.0, 1.0)
    empty = ConfusionCounts(tn=9)
    assert (pod(empty), far(empty), csi(empty)) == (None, None, None)


def test_csi_bounds_on_random_triples(np_rng):
    for tp, fp, fn in np_rng.integers(0, 50, size=(1000, 3)).tolist():
        c = ConfusionCounts(tp, fp, fn)
        if None in (pod(c), far(c), csi(c)):
            continue
        assert Fraction(tp, tp + fp + fn) <= Fraction(tp, tp + fn)
        assert Fraction(tp, tp + fp + fn) <= 1 - Fraction(fp, tp + fp)
        assert csi(c) <= pod(c) + 1e-15 and csi(c) <= 1 - far(c) + 1e-15


def test_coverage_fraction_examples():
    assert coverage_fraction(np.zeros((4, 4))) == 0
    assert coverage_fraction(np.ones((4, 4))) == 1
    m = np.zeros(100, np.uint8)
    m[:2] = 1
    assert coverage_fraction(m) == 0.02
    assert assign_bin(coverage_fraction(m), default_bins()) == CoverageBin(2, 3)


def test_bins_are_half_open_and_partition():
    bins = default_bins()
    assert [b.label for b in bins] == ["0%-1%", "1%-2%", "2%-3%", "3%-4%", "4%-5%", "5%-"]
    for frac in (0, Fraction(1, 100), Fraction(299, 10000), Fraction(3, 100), Fraction(1, 20), 1):
        assert sum(b.contains(frac) for b in bins) == 1
    assert assign_bin(Fraction(1, 100), bins) == CoverageBin(1, 2)
    assert assign_bin(1, bins) == CoverageBin(5)


def test_parse_bins():
    bins = parse_bins([0, 2.5, 10])
    assert bins == [CoverageBin(0, 2.5), CoverageBin(2.5, 10), CoverageBin(10, math.inf)]
    for bad in ([], [1, 2], [0, 3, 3]):
        with pytest.raises(ValueError):
            parse_bins(bad)


def sample(coverage_pixels, size=100, frames=2, hits=None):
    gt = np.zeros((frames, size), np.uint8)
    gt.flat[:coverage_pixels] = 1
    pred = np.zeros_like(gt)
    pred.flat[:hits if hits is not None else coverage_pixels] = 1
    return pred, gt


def test_single_sample_populates_one_bin():
    pred, gt = sample(6)
    report = binned_evaluate([pred], [gt])
    populated = [b for b, r in report.bins.items() if r.samples]
    assert populated == [CoverageBin(3, 4)]


def test_two_sample_hand_trace():
    # sample A: 4 of 200 gt pixels (2%), predicts the 4 plus 2 extra
    # sample B: 12 of 200 gt pixels (6%), predicts 9 of them
    pa, ga = sample(4, hits=6)
    pb, gb = sample(12, hits=9)
    report = binned_evaluate([pa, pb], [ga, gb])
    a = report.bins[CoverageBin(2, 3)]
    b = report.bins[CoverageBin(5)]
    assert a.counts == ConfusionCounts(4, 2, 0, 194) and a.samples == 1
    assert b.counts == ConfusionCounts(9, 0, 3, 188) and b.samples == 1
    assert report.counts == ConfusionCounts(13, 2, 3, 382)
    assert report.csi == 13 / 18 and report.pod == 13 / 16 and report.far == 2 / 15


def test_bin_counts_sum_to_overall(np_rng):
    preds, gts = [], []
    for _ in range(40):
        gts.append((np_rng.uniform(size=(3, 20, 20)) < np_rng.uniform(0, 0.08)).astype(np.uint8))
        preds.append(np_rng.integers(0, 2, size=(3, 20, 20)))
    report = binned_evaluate(preds, gts)
    total = sum((r.counts for r in report.bins.values()), ConfusionCounts())
    assert total == report.counts
    assert sum(r.samples for r in report.bins.values()) == 40


def test_report_serialisations():
    pred, gt = sample(6)
    report = binned_evaluate([pred], [gt])
    kv = dict(line.split("=", 1) for line in report.to_keyvalue({"sequences": 1}).splitlines())
    assert kv["sequences"] == "1" and kv["overall.csi"] == "1.0" and kv["bin[0%-1%].csi"] == "undefined"
    rows = report.to_bins_csv().splitlines()
    assert rows[0].startswith("bin,lo_pct,hi_pct") and len(rows) == 7
    assert "overall" in report.to_table()


def test_overlay_colours():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [1, 0]])
    rgb = overlay(pred, gt)
    assert rgb.dtype == np.uint8 and rgb.shape == (2, 2, 3)
    assert tuple(rgb[0, 0]) == OVERLAY_COLORS["tp"]
    assert tuple(rgb[0, 1]) == OVERLAY_COLORS["fp"]
    assert tuple(rgb[1, 0]) == OVERLAY_COLORS["fn"]
    assert tuple(rgb[1, 1]) == (0, 0, 0)
    with pytest.raises(ValueError):
        overlay(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
