"""Vessel width measurement and segmentation metrics.

The width pipeline follows threshold -> thinning -> exact Euclidean
distance transform -> per-pixel diameter sampling. Thinning is the
two-subiteration parallel scheme with connectivity-number deletion tests
(each half-pass evaluates every pixel against the same snapshot and
deletes simultaneously). It keeps full-length centered skeletons at
every orientation, retracts bar ends symmetrically by half the bar
height, and reduces compact blobs to a single pixel instead of erasing
them. A repair step backs up the component guarantee: should every
pixel of an input component ever be deleted, its deepest pixel is
restored, so the 8-connected component count is preserved exactly.
Purely sequential alternatives were rejected measurably: deleting
simple non-endpoint pixels one at a time consumes two-pixel-wide
diagonal staircases lengthwise (their tips always have two neighbors,
so the endpoint guard never fires) and collapses a 45-degree bar to a
stub.

Width bookkeeping: the per-pixel map is distance-to-skeleton masked to
the vessel (the visualization convention). Scalar diameters are sampled
at skeleton pixels with a minimum-chord caliper: rays march outward in
eight directions 22.5 degrees apart, each boundary crossing is refined by
bisection to subpixel precision, and the diameter is the shortest of the
eight chords. The chord through an interior point spans the full local
width regardless of how the thinned skeleton sits within the vessel, so
the estimate is exact on axis-aligned bars of either parity and within
half a pixel plus two percent at the worst probe-direction mismatch.

Metrics: confusion-based SE/SP/Acc/Dice with explicit empty-denominator
conventions, rank-based AUC (Mann-Whitney with average-rank tie handling),
and mean absolute percentage error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


def _as_binary(arr, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ShapeError(f"{name} must be binary (0/1)")
    return a.astype(np.uint8)


def threshold_mask(prob: np.ndarray, class_index: int) -> np.ndarray:
    """Binary mask of pixels whose class probability is >= 0.5 (inclusive)."""
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim != 3:
        raise ShapeError(f"expected [K,H,W] probabilities, got {p.shape}")
    if not 0 <= class_index < p.shape[0]:
        raise ShapeError(f"class index {class_index} out of range for K={p.shape[0]}")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ShapeError("probabilities must lie in [0, 1]")
    return (p[class_index] >= 0.5).astype(np.uint8)


# -- thinning -----------------------------------------------------------------

# 8-neighborhood in ring order: N, NE, E, SE, S, SW, W, NW.
_OFFS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _thin_candidates(img: np.ndarray, phase: int) -> np.ndarray:
    """Deletable-pixel mask for one half-pass of two-subiteration thinning.

    A pixel qualifies when its connectivity number is one (removing it
    cannot disconnect its neighborhood), the paired diagonal neighbor
    counts stay in 2..3 (neither an isolated tip nor deep interior), and
    the phase's directional test holds (phase 0 eats east/south borders,
    phase 1 west/north). All tests read the same snapshot, so deletions
    within a half-pass are simultaneous.
    """
    p = np.pad(img, 1).astype(bool)
    h, w = img.shape
    n = [p[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx] for dy, dx in _OFFS]
    p2, p3, p4, p5, p6, p7, p8, p9 = n
    c = (
        ((~p2) & (p3 | p4)).astype(np.int32)
        + ((~p4) & (p5 | p6)).astype(np.int32)
        + ((~p6) & (p7 | p8)).astype(np.int32)
        + ((~p8) & (p9 | p2)).astype(np.int32)
    )
    n1 = (
        (p9 | p2).astype(np.int32) + (p3 | p4).astype(np.int32)
        + (p5 | p6).astype(np.int32) + (p7 | p8).astype(np.int32)
    )
    n2 = (
        (p2 | p3).astype(np.int32) + (p4 | p5).astype(np.int32)
        + (p6 | p7).astype(np.int32) + (p8 | p9).astype(np.int32)
    )
    pairs = np.minimum(n1, n2)
    if phase == 0:
        direction = ((p2 | p3 | (~p5)) & p4) == 0
    else:
        direction = ((p6 | p7 | (~p9)) & p8) == 0
    return (img == 1) & (c == 1) & (pairs >= 2) & (pairs <= 3) & direction


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Thin a binary mask to its (8-connected) skeleton.

    Two-subiteration parallel thinning run to a fixed point. Compact
    blobs reduce to a single pixel rather than vanishing; as a backstop
    for the component-count guarantee, any input component whose pixels
    were somehow all erased is revived by restoring its single deepest
    pixel. Guarantees: the result is a subset of the input, running it
    again changes nothing, and the number of 8-connected components is
    exactly preserved.
    """
    img = _as_binary(mask, "mask")
    skel = img.copy()
    while True:
        deleted = 0
        for phase in (0, 1):
            cand = _thin_candidates(skel, phase)
            count = int(cand.sum())
            if count:
                skel[cand] = 0
                deleted += count
        if not deleted:
            break
    labels, n_comp = label_components(img)
    if n_comp:
        survivors = set(np.unique(labels[skel == 1]).tolist()) - {0}
        erased = [c for c in range(1, n_comp + 1) if c not in survivors]
        if erased:
            # Deepest pixel of the component; all-infinite depths (a mask
            # with no background at all) fall back to scan order.
            depth = distance_transform(1 - img)
            for c in erased:
                cand = np.where(labels == c, depth, -np.inf)
                skel.flat[int(np.argmax(cand))] = 1
    return skel


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labeling; labels start at 1, 0 is background."""
    img = _as_binary(mask, "mask")
    h, w = img.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for sy, sx in zip(*np.nonzero(img)):
        if labels[sy, sx]:
            continue
        current += 1
        stack = [(sy, sx)]
        labels[sy, sx] = current
        while stack:
            y, x = stack.pop()
            for dy, dx in _OFFS:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and img[ny, nx] \
                        and not labels[ny, nx]:
                    labels[ny, nx] = current
                    stack.append((ny, nx))
    return labels, current


# -- exact Euclidean distance transform ---------------------------------------


def _envelope_1d(f: np.ndarray) -> np.ndarray:
    """Sample the lower envelope of parabolas q -> f[q] + (x - q)^2."""
    n = f.size
    out = np.full(n, np.inf)
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        return out
    v = np.empty(finite.size, dtype=np.int64)
    z = np.empty(finite.size + 1)
    k = 0
    v[0] = finite[0]
    z[0], z[1] = -np.inf, np.inf

    def crossing(q, r):
        return ((f[q] + q * q) - (f[r] + r * r)) / (2.0 * (q - r))

    for q in finite[1:]:
        s = crossing(q, v[k])
        while s <= z[k]:
            k -= 1
            s = crossing(q, v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        out[q] = (q - v[k]) ** 2 + f[v[k]]
    return out


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest 1-pixel.

    Empty masks give +inf everywhere.
    """
    img = _as_binary(mask, "mask")
    h, w = img.shape
    sq = np.where(img == 1, 0.0, np.inf)
    for x in range(w):
        sq[:, x] = _envelope_1d(sq[:, x])
    for y in range(h):
        sq[y, :] = _envelope_1d(sq[y, :])
    return np.sqrt(sq)


# -- width measurement ---------------------------------------------------------


@dataclass
class DiameterStats:
    mean_microns: float
    std_microns: float
    count: int


@dataclass
class WidthMap:
    """Per-pixel width map plus the skeleton-sampled diameters behind it.

    data is distance-to-skeleton masked to the vessel, in microns (zero off
    vessel); diameters_px holds one minimum-chord caliper sample per
    skeleton pixel, aligned with skeleton_yx.
    """

    data: np.ndarray
    pixel_size_microns: float
    skeleton: np.ndarray
    skeleton_yx: np.ndarray          # (n, 2) int coordinates
    diameters_px: np.ndarray         # (n,) floats

    def summary(self) -> DiameterStats:
        n = int(self.diameters_px.size)
        if n == 0:
            return DiameterStats(0.0, 0.0, 0)
        d = self.diameters_px * self.pixel_size_microns
        return DiameterStats(float(d.mean()), float(d.std()), n)


def _half_chords(mask: np.ndarray, ys, xs, uy: float, ux: float,
                 t_cap: float) -> np.ndarray:
    """Distance from each point to the mask boundary along one ray.

    Coarse march in half-pixel steps brackets the first exit; six rounds
    of bisection refine the crossing to under a hundredth of a pixel.
    Rays that never leave the mask within t_cap saturate at t_cap.
    """
    h, w = mask.shape

    def inside(t):
        py = np.floor(ys + uy * t + 0.5).astype(np.int64)
        px = np.floor(xs + ux * t + 0.5).astype(np.int64)
        ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
        out = np.zeros(len(ys), dtype=bool)
        out[ok] = mask[py[ok], px[ok]] == 1
        return out

    steps = np.arange(0.5, t_cap + 0.5, 0.5)
    lo = np.zeros(len(ys))
    hi = np.full(len(ys), t_cap)
    open_ray = np.ones(len(ys), dtype=bool)
    for t in steps:
        if not open_ray.any():
            break
        fg = inside(np.full(len(ys), t))
        crossed = open_ray & ~fg
        hi[crossed] = t
        lo[open_ray & fg] = t
        open_ray &= fg
    hi[open_ray] = t_cap
    lo[open_ray] = t_cap
    for _ in range(6):
        mid = 0.5 * (lo + hi)
        fg = inside(mid)
        lo = np.where(fg, mid, lo)
        hi = np.where(fg, hi, mid)
    return 0.5 * (lo + hi)


# Quarter-pixel ray origins: starting chords only at integer centers is
# lattice-resonant at 45 degrees (every pixel of a diagonal band repeats
# the same quantization error, so averaging over the vessel cannot remove
# it); a 2x2 subpixel dither spreads the phase and cancels the bias.
_DITHER = ((-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25))


def _caliper_diameters(mask: np.ndarray, ys: np.ndarray,
                       xs: np.ndarray) -> np.ndarray:
    """Minimum chord through each point over 8 probe directions,
    averaged over 4 dithered ray origins."""
    if len(ys) == 0:
        return np.empty(0)
    depth = distance_transform(1 - mask)
    t_cap = float(2.0 * depth[mask == 1].max() + 3.0)
    total = np.zeros(len(ys))
    for oy, ox in _DITHER:
        yf = ys + oy
        xf = xs + ox
        best = np.full(len(ys), np.inf)
        for k in range(8):
            ang = k * np.pi / 8.0
            uy, ux = np.sin(ang), np.cos(ang)
            chord = (_half_chords(mask, yf, xf, uy, ux, t_cap)
                     + _half_chords(mask, yf, xf, -uy, -ux, t_cap))
            best = np.minimum(best, chord)
        total += best
    return total / len(_DITHER)


def width_map(seg: np.ndarray, pixel_size_microns: float = 12.5) -> WidthMap:
    """Measure vessel widths from a binary segmentation."""
    mask = _as_binary(seg, "seg")
    if pixel_size_microns <= 0:
        raise ShapeError(f"pixel size must be positive, got {pixel_size_microns}")
    if mask.sum() == 0:
        return WidthMap(np.zeros(mask.shape), pixel_size_microns,
                        np.zeros_like(mask), np.empty((0, 2), dtype=np.int64),
                        np.empty(0))
    skel = skeletonize(mask)
    to_skel = distance_transform(skel)
    data = to_skel * mask * pixel_size_microns
    ys, xs = np.nonzero(skel)
    diam = _caliper_diameters(mask, ys, xs)
    return WidthMap(data, pixel_size_microns, skel,
                    np.stack([ys, xs], axis=1), diam)


def class_diameter_stats(wm: WidthMap) -> DiameterStats:
    """Mean/std over all skeleton-sampled diameters (microns)."""
    return wm.summary()


def _central_estimate(samples: np.ndarray) -> float:
    """Interquartile mean: robust to end caps and junction dips."""
    if samples.size == 0:
        return 0.0
    if samples.size < 4:
        return float(samples.mean())
    lo, hi = np.percentile(samples, (25.0, 75.0))
    core = samples[(samples >= lo) & (samples <= hi)]
    return float(core.mean()) if core.size else float(samples.mean())


def anchored_vessel_diameters(seg: np.ndarray, anchors,
                              pixel_size_microns: float = 12.5):
    """Per-vessel diameter estimates (pixels) at given anchor points.

    Each anchor (y, x) selects the connected component of ``seg`` under it;
    the estimate is the interquartile mean of that component's skeleton
    diameter samples. Anchors landing on background give 0.0 (a missed
    vessel counts as fully wrong, it is not silently dropped).
    """
    mask = _as_binary(seg, "seg")
    wm = width_map(mask, pixel_size_microns)
    labels, _ = label_components(mask)
    out = np.zeros(len(anchors))
    if wm.diameters_px.size:
        skel_labels = labels[wm.skeleton_yx[:, 0], wm.skeleton_yx[:, 1]]
        for i, (y, x) in enumerate(anchors):
            comp = labels[int(y), int(x)]
            if comp:
                out[i] = _central_estimate(wm.diameters_px[skel_labels == comp])
    return out


def mape(reference, estimated) -> float:
    """Mean absolute percentage error, (1/N) sum |y - yhat| / |y|."""
    y = np.asarray(reference, dtype=np.float64)
    yhat = np.asarray(estimated, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise DataError("empty reference sequence")
    if np.any(y == 0.0):
        raise DataError("reference values must be nonzero")
    return float(np.mean(np.abs(y - yhat) / np.abs(y)))


# -- confusion metrics and AUC --------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class BinaryMetrics:
    sensitivity: float
    specificity: float
    accuracy: float
    dice: float
    counts: ConfusionCounts


def confusion_metrics(pred: np.ndarray, gt: np.ndarray,
                      eval_mask: np.ndarray | None = None) -> BinaryMetrics:
    """SE/SP/Acc/Dice over the evaluated region.

    Empty-denominator conventions: a vacuously satisfied metric (nothing to
    find on either side) is 1; predicting positives where the ground truth
    has none (or negatives where it has only positives) scores 0.
    """
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} vs gt {g.shape}")
    if eval_mask is not None:
        m = _as_binary(eval_mask, "eval_mask")
        if m.shape != p.shape:
            raise ShapeError(f"eval_mask {m.shape} vs pred {p.shape}")
        keep = m == 1
        if not keep.any():
            raise DataError("eval_mask excludes every pixel")
        p, g = p[keep], g[keep]
    tp = int(np.sum((p == 1) & (g == 1)))
    fp = int(np.sum((p == 1) & (g == 0)))
    tn = int(np.sum((p == 0) & (g == 0)))
    fn = int(np.sum((p == 0) & (g == 1)))
    counts = ConfusionCounts(tp, fp, tn, fn)

    def ratio(num, den, pred_side_empty):
        if den == 0:
            return 1.0 if pred_side_empty else 0.0
        return num / den

    se = ratio(tp, tp + fn, fp == 0)
    sp = ratio(tn, tn + fp, fn == 0)
    acc = (tp + tn) / counts.total
    dice = ratio(2 * tp, 2 * tp + fp + fn, True)
    return BinaryMetrics(se, sp, acc, dice, counts)


def auc(prob: np.ndarray, gt: np.ndarray,
        eval_mask: np.ndarray | None = None) -> float:
    """Ranking AUC (Mann-Whitney statistic, ties credited 0.5)."""
    p = np.asarray(prob, dtype=np.float64)
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"prob {p.shape} vs gt {g.shape}")
    if eval_mask is not None:
        m = _as_binary(eval_mask, "eval_mask")
        if m.shape != p.shape:
            raise ShapeError(f"eval_mask {m.shape} vs prob {p.shape}")
        keep = m == 1
        p, g = p[keep], g[keep]
    scores = p.reshape(-1)
    labels = g.reshape(-1)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"AUC needs both classes in the ground truth "
            f"(got {n_pos} positive / {n_neg} negative)")
    _, inverse, counts = np.unique(scores, return_inverse=True,
                                   return_counts=True)
    starts = np.cumsum(counts) - counts
    avg_rank = starts + (counts + 1) / 2.0
    ranks = avg_rank[inverse]
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
