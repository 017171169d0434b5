"""Anchor-free localisation head, its decoder, and the four training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import numerics as nx
from .errors import ConfigError, ContractError, LabelError, NumericError
from .numerics import Tensor
from .prompt_oracle import EventGraph

_MASKED = -1e30
LOSS_TERMS = ("loss_cls", "loss_reg", "loss_sem", "loss_cal")


@dataclass(frozen=True)
class ActionInstance:
    class_id: int
    start_sec: float
    end_sec: float
    score: float = 1.0
    video_id: str = ""

    def __post_init__(self):
        if not self.start_sec < self.end_sec:
            raise ContractError(f"instance needs start < end, got [{self.start_sec}, {self.end_sec}]")
        if not math.isfinite(self.score):
            raise ContractError(f"instance score must be finite, got {self.score}")

    @property
    def interval(self) -> tuple[float, float]:
        return (self.start_sec, self.end_sec)

    def to_json(self) -> dict:
        return {"class_id": self.class_id, "start": self.start_sec, "end": self.end_sec,
                "score": self.score, "video_id": self.video_id}


@dataclass
class HeadOutput:
    class_logits: Tensor  # (L, C+1), column 0 is background
    boundary_offsets: Tensor  # (L, 2) seconds from token centre to start / end, >= 0


@dataclass
class HeadParams:
    W_cls: Tensor
    b_cls: Tensor
    W_reg: Tensor
    b_reg: Tensor

    @classmethod
    def init(cls, d_v: int, num_classes: int, seed: int, offset_init: float = 1.0) -> "HeadParams":
        # softplus(b) = offset_init, so untrained boxes start a couple of seconds wide
        b0 = math.log(math.expm1(offset_init))
        return cls(
            nx.seeded_uniform(seed, "head.W_cls", (num_classes + 1, d_v), d_v),
            nx.zeros_param((num_classes + 1,)),
            nx.seeded_uniform(seed, "head.W_reg", (2, d_v), d_v),
            Tensor(np.full(2, b0), requires_grad=True),
        )


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 1.0
    lambda_sem: float = 0.5
    lambda_cal: float = 0.2
    tau: float = 0.07
    cal_mode: str = "literal"  # "literal": ((s'-s)+(e'-e))^2, "separate": (s'-s)^2+(e'-e)^2
    cal_normalize: bool = True  # measure calibration deviations in fractions of the video duration

    def __post_init__(self):
        for name in ("lambda_reg", "lambda_sem", "lambda_cal"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.cal_mode not in ("literal", "separate"):
            raise ConfigError(f"unknown cal_mode {self.cal_mode!r}")


def head_forward(F: Tensor, params: HeadParams) -> HeadOutput:
    logits = nx.linear(F, params.W_cls, params.b_cls)
    offsets = nx.softplus(nx.linear(F, params.W_reg, params.b_reg))
    return HeadOutput(logits, offsets)


def token_centers(spans: np.ndarray) -> np.ndarray:
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    return 0.5 * (spans[:, 0] + spans[:, 1])


def predicted_intervals(head: HeadOutput, spans: np.ndarray) -> tuple[Tensor, Tensor]:
    """Start and end tensors (L,) implied by the regressed offsets."""
    c = token_centers(spans)
    starts = nx.sub(c, nx.reshape(nx.slice_cols(head.boundary_offsets, 0, 1), (-1,)))
    ends = nx.add(c, nx.reshape(nx.slice_cols(head.boundary_offsets, 1, 2), (-1,)))
    return starts, ends


# ----------------------------------------------------------- target rules


def token_targets(spans: np.ndarray, events) -> tuple[np.ndarray, np.ndarray]:
    """Class of the event covering each token centre (0 if none) and that event's index (-1)."""
    centers = token_centers(spans)
    classes = np.zeros(len(centers), dtype=np.int64)
    owner = np.full(len(centers), -1, dtype=np.int64)
    for k, ev in enumerate(events):
        inside = (centers >= ev.start) & (centers < ev.end) & (owner < 0)
        classes[inside] = ev.class_id
        owner[inside] = k
    return classes, owner


def positive_clips(spans: np.ndarray, clip_spans: np.ndarray) -> np.ndarray:
    """Index of the clip overlapping each token the most (first clip on ties)."""
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    clips = np.asarray(clip_spans, dtype=np.float64).reshape(-1, 2)
    ov = np.minimum(spans[:, None, 1], clips[None, :, 1]) - np.maximum(spans[:, None, 0], clips[None, :, 0])
    ov = np.maximum(ov, 0.0)
    best = np.argmax(ov, axis=1)
    lonely = ov.max(axis=1) <= 0
    if lonely.any():
        dist = np.abs(token_centers(spans)[:, None] - token_centers(clips)[None, :])
        best[lonely] = np.argmin(dist[lonely], axis=1)
    return best


# ------------------------------------------------------------------ losses


def loss_cls(logits: Tensor, targets) -> Tensor:
    """Mean token cross-entropy, via log-sum-exp."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or len(targets) != logits.shape[0]:
        raise LabelError(f"{len(targets)} targets for logits of shape {logits.shape}")
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise LabelError(f"targets must lie in [0, {logits.shape[1] - 1}]")
    logp = nx.log_softmax_rows(logits)
    return nx.neg(nx.mean(nx.pick(logp, np.arange(len(targets)), targets)))


def _check_interval(a, name: str) -> tuple[float, float]:
    s, e = float(a[0]), float(a[1])
    if not s < e:
        raise ContractError(f"{name} is degenerate: [{s}, {e}]")
    return s, e


def giou_1d(a, b) -> float:
    """Generalised IoU of two intervals; lies in (-1, 1]."""
    s1, e1 = _check_interval(a, "first interval")
    s2, e2 = _check_interval(b, "second interval")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    hull = max(e1, e2) - min(s1, s2)
    return inter / union - (hull - union) / hull


def giou_1d_tensor(ps: Tensor, pe: Tensor, gs, ge) -> Tensor:
    """Elementwise GIoU between predicted (ps, pe) and fixed (gs, ge) intervals."""
    gs, ge = nx.as_tensor(gs), nx.as_tensor(ge)
    inter = nx.relu(nx.sub(nx.minimum(pe, ge), nx.maximum(ps, gs)))
    union = nx.sub(nx.add(nx.sub(pe, ps), nx.sub(ge, gs)), inter)
    hull = nx.sub(nx.maximum(pe, ge), nx.minimum(ps, gs))
    return nx.sub(nx.div(inter, union), nx.div(nx.sub(hull, union), hull))


def loss_reg(starts: Tensor, ends: Tensor, gt_starts, gt_ends) -> Tensor:
    """Mean (1 - GIoU) over the given prediction / target pairs; 0 for none."""
    if starts.shape[0] == 0:
        return Tensor(0.0)
    return nx.mean(nx.sub(1.0, giou_1d_tensor(starts, ends, gt_starts, gt_ends)))


def loss_sem(
    tokens: Tensor,
    subs,
    positives,
    tau: float = 0.07,
    extra_negatives=None,
    *,
    dedupe: bool = True,
    require_negative: bool = True,
) -> Tensor:
    """Contrastive alignment of projected tokens with sub-event embeddings.

    ``tokens`` (L, D_P) are already projected.  Candidates are the rows of
    ``subs`` followed by ``extra_negatives``; ``positives[i]`` indexes the
    positive row of ``subs`` for token ``i``.  With ``dedupe`` a candidate
    whose embedding equals the positive is dropped from the denominator, since
    it is the same description rather than a negative.  Tokens left with no
    negative raise, or are skipped when ``require_negative`` is False.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    subs = subs.data if isinstance(subs, Tensor) else np.asarray(subs, dtype=np.float64)
    cand = subs if extra_negatives is None or len(extra_negatives) == 0 else np.vstack([subs, extra_negatives])
    positives = np.asarray(positives, dtype=np.int64)
    if len(positives) != tokens.shape[0]:
        raise ContractError(f"{len(positives)} positives for {tokens.shape[0]} tokens")
    cand_n = cand / np.linalg.norm(cand, axis=1, keepdims=True)
    rows = np.arange(len(positives))
    allowed = np.ones((len(positives), len(cand)), dtype=bool)
    if dedupe:
        same = (cand_n @ cand_n.T) >= 1.0 - 1e-12
        allowed = ~same[positives]
        allowed[rows, positives] = True
    has_negative = allowed.sum(axis=1) >= 2
    if not has_negative.all():
        if require_negative:
            raise ContractError("every token needs at least one negative candidate")
        keep = np.flatnonzero(has_negative)
        if len(keep) == 0:
            return Tensor(0.0)
        tokens, positives, allowed = nx.take_rows(tokens, keep), positives[keep], allowed[keep]
        rows = np.arange(len(keep))
    sims = nx.matmul(nx.l2_normalize_rows(tokens), Tensor(cand_n.T))
    logits = nx.add(nx.mul(sims, 1.0 / tau), np.where(allowed, 0.0, _MASKED))
    logp = nx.log_softmax_rows(logits)
    return nx.neg(nx.mean(nx.pick(logp, rows, positives)))


def info_nce_from_similarities(sims, positives, tau: float) -> float:
    """Reference value of the contrastive loss from a plain similarity matrix."""
    sims = np.asarray(sims, dtype=np.float64) / tau
    lse = np.logaddexp.reduce(sims, axis=1)
    return float(np.mean(lse - sims[np.arange(len(sims)), positives]))


def match_to_graph(
    pred_classes, pred_intervals, graph: EventGraph, min_tiou: float = 0.1
) -> list[tuple[int, int]]:
    """Greedy one-to-one matching of predictions to graph event nodes.

    A pair needs the same class and tIoU above ``min_tiou``; pairs are taken
    in decreasing tIoU order.  Returns ``(node_index, pred_index)`` pairs.
    """
    pred_classes = np.asarray(pred_classes, dtype=np.int64)
    pred_intervals = np.asarray(pred_intervals, dtype=np.float64).reshape(-1, 2)
    nodes = [(i, n) for i, n in enumerate(graph.nodes) if n.node_id != graph.global_id]
    if not nodes or len(pred_classes) == 0:
        return []
    anchors = np.array([n.anchor for _, n in nodes])
    ious = _kernels.tiou_matrix(anchors, pred_intervals)
    same = np.array([n.class_id for _, n in nodes])[:, None] == pred_classes[None, :]
    cand = np.argwhere(same & (ious > min_tiou))
    order = sorted(cand.tolist(), key=lambda ij: (-ious[ij[0], ij[1]], ij[0], ij[1]))
    used_n: set[int] = set()
    used_p: set[int] = set()
    pairs = []
    for a, p in order:
        if a in used_n or p in used_p:
            continue
        used_n.add(a)
        used_p.add(p)
        pairs.append((nodes[a][0], p))
    return pairs


def loss_cal(pred_starts: Tensor, pred_ends: Tensor, anchors, mode: str = "literal") -> Tensor:
    """Mean squared boundary deviation from graph anchors over matched events.

    ``literal`` squares the summed start and end deviations, so opposite
    errors cancel; ``separate`` squares each deviation on its own.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if pred_starts.shape[0] == 0:
        return Tensor(0.0)
    ds = nx.sub(pred_starts, anchors[:, 0])
    de = nx.sub(pred_ends, anchors[:, 1])
    if mode == "literal":
        per = nx.square(nx.add(ds, de))
    elif mode == "separate":
        per = nx.add(nx.square(ds), nx.square(de))
    else:
        raise ConfigError(f"unknown cal_mode {mode!r}")
    return nx.mean(per)


def total_loss(parts: dict, w: LossWeights) -> Tensor:
    """L_cls + lambda_reg L_reg + lambda_sem L_sem + lambda_cal L_cal."""
    vals = {}
    for name in LOSS_TERMS:
        t = nx.as_tensor(parts[name])
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"{name} is not finite ({t.data})", term=name)
        vals[name] = t
    out = vals["loss_cls"]
    out = nx.add(out, nx.mul(vals["loss_reg"], w.lambda_reg))
    out = nx.add(out, nx.mul(vals["loss_sem"], w.lambda_sem))
    return nx.add(out, nx.mul(vals["loss_cal"], w.lambda_cal))


# ----------------------------------------------------------------- decoding


def decode(
    head: HeadOutput,
    spans,
    score_thresh: float = 0.1,
    nms_iou: float = 0.5,
    duration: float | None = None,
    video_id: str = "",
    score_mode: str = "prob",
) -> list[ActionInstance]:
    """Per-token candidate instances, thresholded and suppressed per class.

    A token proposes its best non-background class when that class beats
    background.  The score is that class's softmax probability; with
    ``score_mode="centerness"`` it is further multiplied by
    ``sqrt(min(d_start, d_end) / max(d_start, d_end))`` of the regressed
    offsets, which favours tokens sitting mid-way through their own proposal.
    """
    if score_mode not in ("prob", "centerness"):
        raise ConfigError(f"unknown score_mode {score_mode!r}")
    if not 0.0 <= score_thresh <= 1.0 or not 0.0 <= nms_iou <= 1.0:
        raise ConfigError("score_thresh and nms_iou must lie in [0, 1]")
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    logits = head.class_logits.data
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    if prob.shape[1] < 2:
        return []
    cls = 1 + np.argmax(prob[:, 1:], axis=1)
    score = prob[np.arange(len(cls)), cls]
    beats_background = score > prob[:, 0]
    centers = token_centers(spans)
    off = head.boundary_offsets.data
    if score_mode == "centerness":
        score = score * np.sqrt(off.min(axis=1) / np.maximum(off.max(axis=1), 1e-12))
    start = centers - off[:, 0]
    end = centers + off[:, 1]
    hi = spans[-1, 1] if duration is None else duration
    start = np.clip(start, 0.0, hi)
    end = np.clip(end, 0.0, hi)
    keep = beats_background & (score >= score_thresh) & (end > start)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return []
    intervals = np.stack([start[idx], end[idx]], axis=1)
    labels = cls[idx]
    scores = score[idx]
    order = np.lexsort((labels, intervals[:, 0], -scores))
    kept = _kernels.nms(intervals, labels, order, nms_iou)
    out = [ActionInstance(int(labels[k]), float(intervals[k, 0]), float(intervals[k, 1]), float(scores[k]), video_id)
           for k in kept]
    out.sort(key=lambda a: (-a.score, a.start_sec, a.class_id))
    return out
