"""Interval kernels used by decoding and evaluation.

Each kernel exists twice: a numba ``@njit`` loop version and a numpy version.
The numba path is used when numba imports and ``ECVT_DISABLE_NUMBA`` is unset
(or ``0``).  Both produce identical results; ``tests/test_kernels.py`` checks
that, and ``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("ECVT_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def tiou_matrix_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise temporal IoU between rows of ``a`` (n, 2) and ``b`` (m, 2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.clip(inter, 0.0, None)
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    return inter / union


def nms_np(intervals: np.ndarray, labels: np.ndarray, order: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy per-label NMS.  ``order`` lists candidate indices best-first."""
    keep: list[int] = []
    suppressed = np.zeros(len(intervals), dtype=bool)
    ious = tiou_matrix_np(intervals, intervals)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        same = labels == labels[idx]
        suppressed |= same & (ious[idx] >= iou_thresh)
    return np.asarray(keep, dtype=np.int64)


def greedy_match_np(
    pred: np.ndarray, pred_vid: np.ndarray, gt: np.ndarray, gt_vid: np.ndarray, thresh: float
) -> np.ndarray:
    """Match predictions (already in rank order) to ground truth.

    Each prediction takes the unmatched ground truth of the same video with the
    highest tIoU, provided it reaches ``thresh``.  Returns a true-positive mask.
    """
    tp = np.zeros(len(pred), dtype=bool)
    if len(gt) == 0 or len(pred) == 0:
        return tp
    ious = tiou_matrix_np(pred, gt)
    ious[pred_vid[:, None] != gt_vid[None, :]] = -1.0
    taken = np.zeros(len(gt), dtype=bool)
    for i in range(len(pred)):
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= thresh:
            taken[j] = True
            tp[i] = True
    return tp


def interpolated_ap_np(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP from a ranked true-positive mask."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(steps * envelope))


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _tiou(s1, e1, s2, e2):
        inter = min(e1, e2) - max(s1, s2)
        if inter < 0.0:
            inter = 0.0
        return inter / ((e1 - s1) + (e2 - s2) - inter)

    @numba.njit(cache=True)
    def tiou_matrix_nb(a, b):
        n = a.shape[0]
        m = b.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                out[i, j] = _tiou(a[i, 0], a[i, 1], b[j, 0], b[j, 1])
        return out

    @numba.njit(cache=True)
    def _nms_nb(intervals, labels, order, iou_thresh):
        n = intervals.shape[0]
        suppressed = np.zeros(n, dtype=np.bool_)
        keep = np.empty(n, dtype=np.int64)
        k = 0
        for t in range(order.shape[0]):
            i = order[t]
            if suppressed[i]:
                continue
            keep[k] = i
            k += 1
            for j in range(n):
                if not suppressed[j] and labels[j] == labels[i]:
                    if _tiou(intervals[i, 0], intervals[i, 1], intervals[j, 0], intervals[j, 1]) >= iou_thresh:
                        suppressed[j] = True
        return keep[:k]

    @numba.njit(cache=True)
    def _greedy_match_nb(pred, pred_vid, gt, gt_vid, thresh):
        n = pred.shape[0]
        m = gt.shape[0]
        tp = np.zeros(n, dtype=np.bool_)
        taken = np.zeros(m, dtype=np.bool_)
        for i in range(n):
            best = -1.0
            best_j = -1
            for j in range(m):
                if taken[j] or gt_vid[j] != pred_vid[i]:
                    continue
                iou = _tiou(pred[i, 0], pred[i, 1], gt[j, 0], gt[j, 1])
                if iou > best:
                    best = iou
                    best_j = j
            if best_j >= 0 and best >= thresh:
                taken[best_j] = True
                tp[i] = True
        return tp

    @numba.njit(cache=True)
    def _interpolated_ap_nb(tp, n_gt):
        n = tp.shape[0]
        if n_gt == 0 or n == 0:
            return 0.0
        precision = np.empty(n)
        recall = np.empty(n)
        c = 0.0
        for i in range(n):
            if tp[i]:
                c += 1.0
            precision[i] = c / (i + 1)
            recall[i] = c / n_gt
        for i in range(n - 2, -1, -1):
            if precision[i + 1] > precision[i]:
                precision[i] = precision[i + 1]
        ap = 0.0
        prev = 0.0
        for i in range(n):
            ap += (recall[i] - prev) * precision[i]
            prev = recall[i]
        return ap

    def nms_nb(intervals, labels, order, iou_thresh):
        return _nms_nb(
            np.ascontiguousarray(intervals, dtype=np.float64).reshape(-1, 2),
            np.ascontiguousarray(labels, dtype=np.int64),
            np.ascontiguousarray(order, dtype=np.int64),
            float(iou_thresh),
        )

    def greedy_match_nb(pred, pred_vid, gt, gt_vid, thresh):
        return _greedy_match_nb(
            np.ascontiguousarray(pred, dtype=np.float64).reshape(-1, 2),
            np.ascontiguousarray(pred_vid, dtype=np.int64),
            np.ascontiguousarray(gt, dtype=np.float64).reshape(-1, 2),
            np.ascontiguousarray(gt_vid, dtype=np.int64),
            float(thresh),
        )

    def interpolated_ap_nb(tp, n_gt):
        return float(_interpolated_ap_nb(np.ascontiguousarray(tp, dtype=np.bool_), int(n_gt)))

    def _tiou_matrix_nb_wrapped(a, b):
        return tiou_matrix_nb(
            np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 2),
            np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 2),
        )


if USE_NUMBA:
    tiou_matrix = _tiou_matrix_nb_wrapped
    nms = nms_nb
    greedy_match = greedy_match_nb
    interpolated_ap = interpolated_ap_nb
else:
    tiou_matrix = tiou_matrix_np
    nms = nms_np
    greedy_match = greedy_match_np
    interpolated_ap = interpolated_ap_np
