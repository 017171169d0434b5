"""Temporal action localisation metrics: tIoU, per-class AP and mAP."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError
from .head_losses import ActionInstance

ACTIVITYNET_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
THUMOS_THRESHOLDS = (0.5,)


def t_iou(a, b) -> float:
    s1, e1 = float(a[0]), float(a[1])
    s2, e2 = float(b[0]), float(b[1])
    if not (s1 < e1 and s2 < e2):
        raise ContractError(f"degenerate interval in t_iou: {a}, {b}")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    return inter / ((e1 - s1) + (e2 - s2) - inter)


def rank_order(preds: Sequence[ActionInstance]) -> list[ActionInstance]:
    """Score descending; ties by earlier start, then smaller class id."""
    return sorted(preds, key=lambda p: (-p.score, p.start_sec, p.class_id))


def _video_codes(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    codes: dict[str, int] = {}
    pv = np.array([codes.setdefault(p.video_id, len(codes)) for p in preds], dtype=np.int64)
    gv = np.array([codes.setdefault(g.video_id, len(codes)) for g in gts], dtype=np.int64)
    return pv, gv


def average_precision(preds: Sequence[ActionInstance], gts: Sequence[ActionInstance], thresh: float) -> float:
    """AP of one class at one tIoU threshold.

    Predictions are ranked internally and greedily matched to the unmatched
    ground truth (same video) with the highest tIoU >= ``thresh``.  Returns
    0.0 for predictions without ground truth and NaN when both are empty.
    """
    if len(gts) == 0:
        return 0.0 if len(preds) else float("nan")
    if len(preds) == 0:
        return 0.0
    ranked = rank_order(preds)
    pv, gv = _video_codes(ranked, gts)
    p_iv = np.array([p.interval for p in ranked], dtype=np.float64)
    g_iv = np.array([g.interval for g in gts], dtype=np.float64)
    tp = _kernels.greedy_match(p_iv, pv, g_iv, gv, thresh)
    return _kernels.interpolated_ap(tp, len(gts))


@dataclass
class EvalReport:
    per_threshold_map: dict[float, float | None]
    average_map: float | None
    per_class_ap: dict[tuple[int, float], float]
    counts: dict[str, int | bool] = field(default_factory=dict)

    @property
    def undefined(self) -> bool:
        return bool(self.counts.get("map_undefined", False))

    def to_json(self) -> dict:
        return {
            "per_threshold_map": {f"{t:.2f}": v for t, v in self.per_threshold_map.items()},
            "average_map": self.average_map,
            "per_class_ap": {f"{c}@{t:.2f}": v for (c, t), v in sorted(self.per_class_ap.items())},
            "counts": dict(self.counts),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        per_class = {}
        for key, v in obj["per_class_ap"].items():
            c, t = key.split("@")
            per_class[(int(c), float(t))] = v
        return cls(
            {float(t): v for t, v in obj["per_threshold_map"].items()},
            obj["average_map"],
            per_class,
            dict(obj["counts"]),
        )


def evaluate(
    preds: Iterable[ActionInstance], gts: Iterable[ActionInstance], thresholds: Sequence[float] = THUMOS_THRESHOLDS
) -> EvalReport:
    """mAP per threshold over classes with at least one ground truth, and their mean."""
    preds, gts = list(preds), list(gts)
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(not 0.0 < t <= 1.0 for t in thresholds):
        raise ConfigError(f"thresholds must be a non-empty list in (0, 1], got {thresholds}")
    counts: dict[str, int | bool] = {"predictions": len(preds), "ground_truth": len(gts)}
    if not gts:
        counts["map_undefined"] = True
        return EvalReport({t: None for t in thresholds}, None, {}, counts)
    classes = sorted({g.class_id for g in gts})
    by_cls_p = {c: [p for p in preds if p.class_id == c] for c in classes}
    by_cls_g = {c: [g for g in gts if g.class_id == c] for c in classes}
    per_class: dict[tuple[int, float], float] = {}
    per_thr: dict[float, float | None] = {}
    for t in thresholds:
        aps = []
        for c in classes:
            ap = average_precision(by_cls_p[c], by_cls_g[c], t)
            per_class[(c, t)] = ap
            aps.append(ap)
        per_thr[t] = float(np.mean(aps))
    counts["classes"] = len(classes)
    avg = float(np.mean(list(per_thr.values())))
    return EvalReport(per_thr, avg, per_class, counts)


def map_at(report: EvalReport, thresh: float) -> float:
    for t, v in report.per_threshold_map.items():
        if math.isclose(t, thresh):
            return float("nan") if v is None else v
    raise KeyError(thresh)
