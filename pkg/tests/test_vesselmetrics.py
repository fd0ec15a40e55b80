"""Tests for width measurement and segmentation metrics.

Oracles used here are deliberately naive re-implementations: an O(n^2)
all-pairs distance scan, a pairwise-comparison AUC, a min-label-propagation
component counter, and a per-pixel counting loop for confusion entries.
"""

import numpy as np
import pytest

from vesselseg.errors import DataError, ShapeError
from vesselseg.vesselmetrics import (
    BinaryMetrics,
    DiameterStats,
    anchored_vessel_diameters,
    auc,
    class_diameter_stats,
    confusion_metrics,
    distance_transform,
    label_components,
    mape,
    skeletonize,
    threshold_mask,
    width_map,
)

OFFS8 = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


# -- oracles -------------------------------------------------------------------


def edt_oracle(mask):
    """All-pairs scan: distance from each pixel to the nearest seed."""
    h, w = mask.shape
    pts = np.argwhere(mask == 1).astype(np.float64)
    out = np.full((h, w), np.inf)
    if pts.size == 0:
        return out
    for y in range(h):
        for x in range(w):
            d2 = (pts[:, 0] - y) ** 2 + (pts[:, 1] - x) ** 2
            out[y, x] = np.sqrt(d2.min())
    return out


def auc_oracle(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for s in pos:
        total += np.sum(s > neg) + 0.5 * np.sum(s == neg)
    return total / (pos.size * neg.size)


def component_count_oracle(mask):
    """Min-label propagation to a fixed point, then count surviving labels."""
    h, w = mask.shape
    sentinel = h * w + 2
    lbl = np.where(mask == 1, np.arange(h * w).reshape(h, w) + 1, sentinel)
    while True:
        padded = np.pad(lbl, 1, constant_values=sentinel)
        best = lbl.copy()
        for dy, dx in OFFS8:
            shifted = padded[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]
            best = np.minimum(best, shifted)
        best = np.where(mask == 1, best, sentinel)
        if (best == lbl).all():
            break
        lbl = best
    return np.unique(lbl[mask == 1]).size


def confusion_oracle(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 0:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def random_blob_mask(rng, shape, p):
    return (rng.random(shape) < p).astype(np.uint8)


def tube(shape, p0, p1, width):
    """Binary tube: pixels whose distance to the segment p0-p1 is <= width/2."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    vy, vx = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = vy * vy + vx * vx
    if norm2 == 0.0:
        dist = np.hypot(yy - p0[0], xx - p0[1])
    else:
        t = np.clip(((yy - p0[0]) * vy + (xx - p0[1]) * vx) / norm2, 0.0, 1.0)
        dist = np.hypot(yy - (p0[0] + t * vy), xx - (p0[1] + t * vx))
    return (dist <= width / 2.0).astype(np.uint8)


def has_2x2_block(mask):
    return bool((mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1]
                 & mask[1:, 1:]).any())


def bar_fixture(width, angle_key):
    """A long straight tube at one of the committed angles.

    Axis-aligned even widths get a half-integer centerline so the raster
    width matches the nominal width exactly.
    """
    if angle_key == "axis":
        c = 20.0 if width % 2 == 1 else 20.5
        return tube((41, 73), (c, 6.0), (c, 66.0), width)
    if angle_key == "diag":
        return tube((73, 73), (8.0, 8.0), (64.0, 64.0), width)
    if angle_key == "half":
        return tube((53, 89), (12.0, 6.0), (42.0, 66.0), width)
    raise AssertionError(angle_key)


# -- thresholding ----------------------------------------------------------------


class TestThreshold:
    def test_inclusive_half(self):
        prob = np.zeros((2, 1, 4))
        prob[1, 0] = [0.49999, 0.5, 0.500001, 1.0]
        assert threshold_mask(prob, 1).tolist() == [[0, 1, 1, 1]]

    def test_class_selection(self):
        rng = np.random.default_rng(3)
        raw = rng.random((3, 6, 5))
        prob = raw / raw.sum(axis=0, keepdims=True)
        for k in range(3):
            expected = (prob[k] >= 0.5).astype(np.uint8)
            assert np.array_equal(threshold_mask(prob, k), expected)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ShapeError):
            threshold_mask(np.zeros((4, 4)), 0)
        with pytest.raises(ShapeError):
            threshold_mask(np.zeros((2, 4, 4)), 2)
        bad = np.full((1, 2, 2), 1.5)
        with pytest.raises(ShapeError):
            threshold_mask(bad, 0)


# -- thinning --------------------------------------------------------------------


class TestSkeletonize:
    def test_two_by_two_block_reduces_to_one_pixel(self):
        # Hand-traced half-pass: phase 0 deletes three of the four pixels
        # simultaneously (each has connectivity number 1 and passes the
        # east/south test); the bottom-left survivor then has no deletable
        # configuration, so the component persists as a single pixel.
        out = skeletonize(np.ones((2, 2), dtype=np.uint8))
        assert out.sum() == 1 and out[1, 0] == 1
        canvas = np.zeros((8, 8), dtype=np.uint8)
        canvas[3:5, 4:6] = 1
        out = skeletonize(canvas)
        assert out.sum() == 1 and out[4, 4] == 1

    def test_line_and_singleton_unchanged(self):
        line = np.zeros((5, 9), dtype=np.uint8)
        line[2, 1:8] = 1
        assert np.array_equal(skeletonize(line), line)
        dot = np.zeros((4, 4), dtype=np.uint8)
        dot[1, 2] = 1
        assert np.array_equal(skeletonize(dot), dot)
        empty = np.zeros((6, 6), dtype=np.uint8)
        assert np.array_equal(skeletonize(empty), empty)

    def test_subset_of_input(self):
        for seed in range(25):
            rng = np.random.default_rng(seed)
            mask = random_blob_mask(rng, (24, 24), 0.45)
            skel = skeletonize(mask)
            assert np.all(skel <= mask)

    def test_idempotent(self):
        for seed in range(25):
            rng = np.random.default_rng(100 + seed)
            mask = random_blob_mask(rng, (20, 26), 0.5)
            skel = skeletonize(mask)
            assert np.array_equal(skeletonize(skel), skel)

    def test_component_count_preserved(self):
        for seed in range(40):
            rng = np.random.default_rng(200 + seed)
            p = rng.choice([0.3, 0.45, 0.6])
            mask = random_blob_mask(rng, (22, 22), p)
            skel = skeletonize(mask)
            assert component_count_oracle(skel) == component_count_oracle(mask)

    def test_structured_fixtures_fully_thinned(self):
        fixtures = [tube((41, 73), (20.0, 6.0), (20.0, 66.0), 9),
                    tube((73, 73), (8.0, 8.0), (64.0, 64.0), 7),
                    tube((61, 61), (30.0, 30.0), (30.0, 30.0), 22)]
        cross = np.zeros((31, 31), dtype=np.uint8)
        cross[12:19, :] = 1
        cross[:, 12:19] = 1
        fixtures.append(cross)
        for mask in fixtures:
            skel = skeletonize(mask)
            assert skel.sum() > 0
            assert not has_2x2_block(skel)
            assert component_count_oracle(skel) == 1

    def test_bar_skeleton_runs_along_center(self):
        bar = tube((21, 60), (10.0, 5.0), (10.0, 54.0), 7)
        skel = skeletonize(bar)
        ys, xs = np.nonzero(skel)
        assert np.all(np.abs(ys - 10) <= 1)
        assert xs.max() - xs.min() > 40

    def test_five_tall_bar_thins_to_centerline_row(self):
        # 5 px tall, 21 px long rectangle: single centerline row up to
        # endpoint effects of at most 2 px on each side.
        bar = np.zeros((9, 25), dtype=np.uint8)
        bar[2:7, 2:23] = 1
        skel = skeletonize(bar)
        ys, xs = np.nonzero(skel)
        mid = (ys == 4) & (xs >= 4) & (xs <= 20)
        assert mid.sum() >= 17
        assert np.all(np.abs(ys - 4) <= 2)
        off_row = ~mid
        assert np.all((xs[off_row] <= 4) | (xs[off_row] >= 20))

    def test_rejects_non_binary(self):
        with pytest.raises(ShapeError):
            skeletonize(np.full((4, 4), 2))
        with pytest.raises(ShapeError):
            skeletonize(np.zeros((2, 2, 2)))


# -- component labeling ------------------------------------------------------------


class TestLabelComponents:
    def test_count_matches_oracle(self):
        for seed in range(30):
            rng = np.random.default_rng(300 + seed)
            mask = random_blob_mask(rng, (18, 23), rng.choice([0.3, 0.5]))
            labels, n = label_components(mask)
            assert n == component_count_oracle(mask)
            assert (labels > 0).sum() == mask.sum()
            assert np.array_equal(labels > 0, mask == 1)

    def test_labels_partition_connected_pixels(self):
        mask = np.zeros((7, 9), dtype=np.uint8)
        mask[1, 1:4] = 1
        mask[5, 5:8] = 1
        mask[2, 2] = 1          # touches the first bar diagonally
        labels, n = label_components(mask)
        assert n == 2
        assert labels[1, 1] == labels[2, 2]
        assert labels[1, 1] != labels[5, 6]

    def test_empty(self):
        labels, n = label_components(np.zeros((5, 5), dtype=np.uint8))
        assert n == 0
        assert labels.sum() == 0


# -- distance transform -------------------------------------------------------------


class TestDistanceTransform:
    def test_matches_oracle_on_random_masks(self):
        for seed in range(40):
            rng = np.random.default_rng(400 + seed)
            shape = (int(rng.integers(4, 21)), int(rng.integers(4, 21)))
            mask = random_blob_mask(rng, shape, 0.15)
            got = distance_transform(mask)
            want = edt_oracle(mask)
            finite = np.isfinite(want)
            assert np.array_equal(np.isfinite(got), finite)
            if finite.any():
                assert np.abs(got[finite] - want[finite]).max() < 1e-9

    def test_empty_mask_is_infinite(self):
        out = distance_transform(np.zeros((6, 8), dtype=np.uint8))
        assert np.all(np.isinf(out))

    def test_full_mask_is_zero(self):
        out = distance_transform(np.ones((5, 5), dtype=np.uint8))
        assert np.abs(out).max() == 0.0

    def test_single_seed_is_radial(self):
        mask = np.zeros((9, 9), dtype=np.uint8)
        mask[4, 4] = 1
        out = distance_transform(mask)
        assert out[4, 4] == 0.0
        assert abs(out[0, 0] - np.sqrt(32.0)) < 1e-12
        assert abs(out[4, 0] - 4.0) < 1e-12

    def test_three_four_five_triangle(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[0, 0] = 1
        out = distance_transform(mask)
        assert abs(out[3, 4] - 5.0) < 1e-12


# -- width measurement ----------------------------------------------------------------


class TestWidthMap:
    def test_axis_aligned_widths_near_exact(self):
        # The caliper chord spans the full bar regardless of which row the
        # skeleton landed on, so both parities measure to within the
        # bisection resolution.
        for w in range(3, 16):
            bar = bar_fixture(w, "axis")
            est = anchored_vessel_diameters(bar, [(20, 36)])[0]
            assert abs(est - w) < 0.05, f"width {w}: got {est}"

    @pytest.mark.parametrize("angle", ["axis", "diag", "half"])
    def test_bar_widths_within_one_pixel(self, angle):
        anchor = {"axis": (20, 36), "diag": (36, 36), "half": (27, 36)}[angle]
        for w in (3, 4, 6, 8, 11, 15):
            bar = bar_fixture(w, angle)
            est = anchored_vessel_diameters(bar, [anchor])[0]
            assert abs(est - w) <= 1.0, f"{angle} width {w}: got {est}"

    def test_disk_diameters_within_one_pixel(self):
        for diam in (5, 9, 15):
            disk = tube((41, 41), (20.0, 20.0), (20.0, 20.0), diam)
            est = anchored_vessel_diameters(disk, [(20, 20)])[0]
            assert abs(est - diam) <= 1.0, f"disk {diam}: got {est}"

    def test_map_is_distance_to_skeleton_in_microns(self):
        bar = bar_fixture(5, "axis")
        wm = width_map(bar, pixel_size_microns=12.5)
        want = edt_oracle(wm.skeleton) * bar * 12.5
        assert np.abs(wm.data - want).max() < 1e-9
        assert wm.data[bar == 0].max() == 0.0
        assert wm.data.min() >= 0.0

    def test_summary_scales_with_pixel_size(self):
        bar = bar_fixture(7, "axis")
        base = width_map(bar, pixel_size_microns=1.0).summary()
        scaled = width_map(bar, pixel_size_microns=12.5).summary()
        assert scaled.count == base.count
        assert abs(scaled.mean_microns - 12.5 * base.mean_microns) < 1e-9
        assert abs(scaled.std_microns - 12.5 * base.std_microns) < 1e-9

    def test_eight_pixel_bar_in_microns(self):
        # Width 8 px at 12.5 um/px reads as 100 um within one pixel pitch,
        # with little spread along a constant-width bar.
        bar = bar_fixture(8, "axis")
        stats = width_map(bar, pixel_size_microns=12.5).summary()
        assert abs(stats.mean_microns - 100.0) <= 12.5
        assert stats.std_microns < 12.5

    def test_two_bars_pool_to_intermediate_mean(self):
        # Equal skeleton lengths at widths 4 and 12 pool to roughly 8.
        canvas = np.zeros((61, 73), dtype=np.uint8)
        canvas |= tube((61, 73), (15.5, 6.0), (15.5, 66.0), 4)
        canvas |= tube((61, 73), (45.0, 6.0), (45.0, 66.0), 12)
        stats = class_diameter_stats(width_map(canvas, pixel_size_microns=1.0))
        assert isinstance(stats, DiameterStats)
        assert abs(stats.mean_microns - 8.0) <= 1.0
        assert stats.std_microns > 2.0
        assert stats.count > 100

    def test_empty_segmentation(self):
        wm = width_map(np.zeros((8, 8), dtype=np.uint8))
        stats = wm.summary()
        assert stats == DiameterStats(0.0, 0.0, 0)
        assert wm.data.max() == 0.0
        assert wm.skeleton.sum() == 0

    def test_anchor_on_background_scores_zero(self):
        bar = bar_fixture(5, "axis")
        est = anchored_vessel_diameters(bar, [(2, 2), (20, 36)])
        assert est[0] == 0.0
        assert est[1] > 0.0

    def test_anchors_select_their_component(self):
        canvas = np.zeros((61, 73), dtype=np.uint8)
        canvas |= tube((61, 73), (15.0, 6.0), (15.0, 66.0), 5)
        canvas |= tube((61, 73), (45.0, 6.0), (45.0, 66.0), 11)
        est = anchored_vessel_diameters(canvas, [(15, 30), (45, 30)])
        assert abs(est[0] - 5) <= 1.0
        assert abs(est[1] - 11) <= 1.0

    def test_rejects_bad_pixel_size(self):
        with pytest.raises(ShapeError):
            width_map(np.ones((4, 4), dtype=np.uint8), pixel_size_microns=0.0)


# -- error statistics -----------------------------------------------------------------


class TestMape:
    def test_hand_values(self):
        assert abs(mape([10.0, 20.0], [9.0, 22.0]) - 0.1) < 1e-15
        assert mape([5.0, 5.0, 5.0], [5.0, 5.0, 5.0]) == 0.0

    def test_sign_symmetric(self):
        assert abs(mape([8.0], [6.0]) - mape([8.0], [10.0])) < 1e-15

    def test_rejects_zero_reference(self):
        with pytest.raises(DataError):
            mape([4.0, 0.0], [4.0, 1.0])

    def test_rejects_mismatch_and_empty(self):
        with pytest.raises(ShapeError):
            mape([1.0, 2.0], [1.0])
        with pytest.raises(DataError):
            mape([], [])


# -- confusion metrics ----------------------------------------------------------------


class TestConfusionMetrics:
    def test_counts_match_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(500 + seed)
            pred = random_blob_mask(rng, (13, 17), 0.5)
            gt = random_blob_mask(rng, (13, 17), 0.4)
            m = confusion_metrics(pred, gt)
            tp, fp, tn, fn = confusion_oracle(pred, gt)
            assert (m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn) \
                == (tp, fp, tn, fn)
            assert abs(m.sensitivity - tp / (tp + fn)) < 1e-15
            assert abs(m.specificity - tn / (tn + fp)) < 1e-15
            assert abs(m.accuracy - (tp + tn) / (13 * 17)) < 1e-15
            assert abs(m.dice - 2 * tp / (2 * tp + fp + fn)) < 1e-15

    def test_empty_denominator_conventions(self):
        zeros = np.zeros((4, 4), dtype=np.uint8)
        ones = np.ones((4, 4), dtype=np.uint8)
        some = zeros.copy()
        some[1, 1] = 1

        both_empty = confusion_metrics(zeros, zeros)
        assert (both_empty.sensitivity, both_empty.dice) == (1.0, 1.0)
        assert both_empty.accuracy == 1.0

        pred_alone = confusion_metrics(some, zeros)
        assert pred_alone.sensitivity == 0.0
        assert pred_alone.dice == 0.0

        all_positive = confusion_metrics(ones, ones)
        assert all_positive.specificity == 1.0

        missed_some = confusion_metrics(1 - some, ones)
        assert missed_some.specificity == 0.0

    def test_eval_mask_restricts_region(self):
        pred = np.array([[1, 0], [1, 1]], dtype=np.uint8)
        gt = np.array([[1, 1], [0, 1]], dtype=np.uint8)
        m = confusion_metrics(pred, gt, eval_mask=np.array([[1, 1], [0, 0]],
                                                           dtype=np.uint8))
        assert m.counts == confusion_metrics(pred[:1], gt[:1]).counts
        with pytest.raises(DataError):
            confusion_metrics(pred, gt, eval_mask=np.zeros((2, 2), dtype=np.uint8))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(7)
        pred = random_blob_mask(rng, (9, 9), 0.5)
        gt = random_blob_mask(rng, (9, 9), 0.5)
        perm = rng.permutation(81)
        m1 = confusion_metrics(pred, gt)
        m2 = confusion_metrics(pred.reshape(-1)[perm].reshape(9, 9),
                               gt.reshape(-1)[perm].reshape(9, 9))
        assert m1 == m2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confusion_metrics(np.zeros((3, 3), dtype=np.uint8),
                              np.zeros((3, 4), dtype=np.uint8))


# -- AUC --------------------------------------------------------------------------


class TestAuc:
    def test_matches_pairwise_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(600 + seed)
            prob = rng.random((11, 13))
            gt = random_blob_mask(rng, (11, 13), 0.4)
            if gt.sum() == 0 or gt.sum() == gt.size:
                continue
            got = auc(prob, gt)
            want = auc_oracle(prob.reshape(-1), gt.reshape(-1))
            assert abs(got - want) < 1e-12

    def test_ties_get_half_credit(self):
        for seed in range(10):
            rng = np.random.default_rng(700 + seed)
            prob = rng.integers(0, 4, (9, 9)) / 3.0
            gt = random_blob_mask(rng, (9, 9), 0.5)
            if gt.sum() in (0, gt.size):
                continue
            got = auc(prob, gt)
            want = auc_oracle(prob.reshape(-1), gt.reshape(-1))
            assert abs(got - want) < 1e-12

    def test_perfect_and_inverted_ranking(self):
        gt = np.array([[0, 0, 1, 1]], dtype=np.uint8)
        assert auc(np.array([[0.1, 0.2, 0.8, 0.9]]), gt) == 1.0
        assert auc(np.array([[0.9, 0.8, 0.2, 0.1]]), gt) == 0.0
        assert abs(auc(np.full((1, 4), 0.5), gt) - 0.5) < 1e-15

    def test_single_class_rejected(self):
        prob = np.random.default_rng(0).random((4, 4))
        with pytest.raises(DataError):
            auc(prob, np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(DataError):
            auc(prob, np.ones((4, 4), dtype=np.uint8))

    def test_eval_mask_and_permutation(self):
        rng = np.random.default_rng(42)
        prob = rng.random((8, 8))
        gt = random_blob_mask(rng, (8, 8), 0.5)
        mask = random_blob_mask(rng, (8, 8), 0.7)
        keep = mask.reshape(-1) == 1
        want = auc_oracle(prob.reshape(-1)[keep], gt.reshape(-1)[keep])
        assert abs(auc(prob, gt, eval_mask=mask) - want) < 1e-12

        perm = rng.permutation(64)
        shuffled = auc(prob.reshape(-1)[perm].reshape(8, 8),
                       gt.reshape(-1)[perm].reshape(8, 8))
        assert abs(shuffled - auc(prob, gt)) < 1e-15


def test_metrics_report_is_plain_data():
    m = confusion_metrics(np.ones((2, 2), dtype=np.uint8),
                          np.ones((2, 2), dtype=np.uint8))
    assert isinstance(m, BinaryMetrics)
    assert m.counts.total == 4
