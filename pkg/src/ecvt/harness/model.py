"""Full pipeline: encoder, optional guidance, head, and the per-video loss.

Guidance toggles decide which parameter groups exist:

* ``gep``  with ``advanced_fusion``: adaptive gate (``gate.*``);
  without: the global prompt is projected and added to every token.
* ``tsep`` with ``advanced_fusion``: cross-attention refinement (``refine.*``);
  without: each token adds the projection of its best-overlapping clip prompt.
* ``calibrate``: event-graph calibration (``calib.*``).

The additive variants are the "simple fusion" path: a linear head over the
concatenation ``[f_i; p_global; p_sub(i)]`` is exactly this sum.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..encoder import VideoFeatures, encode
from ..encoder import init_params as init_encoder
from ..guidance import CalibParams, CrossAttnParams, GateParams, calibrate, gate_fuse, refine
from ..head_losses import (
    HeadOutput,
    HeadParams,
    head_forward,
    loss_cal,
    loss_cls,
    loss_reg,
    loss_sem,
    match_to_graph,
    predicted_intervals,
    total_loss,
)
from ..numerics import Tensor
from .config import RunConfig
from .data import VideoSample


@dataclass
class ForwardResult:
    features: Tensor  # guided tokens fed to the head
    head: HeadOutput


class ECVTModel:
    def __init__(self, cfg: RunConfig, num_classes: int, d_p: int, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.num_classes = num_classes
        self.d_p = d_p
        self.params = params if params is not None else self.init_params()

    # ------------------------------------------------------------ params
    @property
    def sem_active(self) -> bool:
        return self.cfg.guidance.tsep and self.cfg.loss_weights.lambda_sem > 0

    @property
    def cal_active(self) -> bool:
        return self.cfg.guidance.any and self.cfg.loss_weights.lambda_cal > 0

    def init_params(self) -> dict[str, Tensor]:
        cfg, g = self.cfg, self.cfg.guidance
        seed, d_v, d_p = cfg.seeds.model, cfg.encoder.d_v, self.d_p
        # seeds.model drives every initialiser, the encoder included
        p = dict(init_encoder(dataclasses.replace(cfg.encoder, seed=seed)))
        head = HeadParams.init(d_v, self.num_classes, seed)
        p.update({"head.W_cls": head.W_cls, "head.b_cls": head.b_cls, "head.W_reg": head.W_reg, "head.b_reg": head.b_reg})
        if g.gep:
            if g.advanced_fusion:
                gp = GateParams.init(d_v, d_p, seed)
                p.update({"gate.W_g": gp.W_g, "gate.b_g": gp.b_g, "gate.W_p": gp.W_p})
            else:
                p["simple.W_global"] = nx.seeded_uniform(seed, "simple.W_global", (d_v, d_p), d_p)
        if g.tsep:
            if g.advanced_fusion:
                cp = CrossAttnParams.init(d_v, d_p, seed)
                p.update({"refine.W_Q": cp.W_Q, "refine.W_K": cp.W_K, "refine.W_V": cp.W_V})
            else:
                p["simple.W_sub"] = nx.seeded_uniform(seed, "simple.W_sub", (d_v, d_p), d_p)
        if g.calibrate:
            kp = CalibParams.init(d_v, d_p, seed)
            p.update({f"calib.{k}": v for k, v in kp.__dict__.items()})
        if self.sem_active:
            p["sem.W_proj"] = nx.seeded_uniform(seed, "sem.W_proj", (d_p, d_v), d_v)
        return p

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def _group(self, cls, prefix: str):
        names = [f.name for f in cls.__dataclass_fields__.values()]
        return cls(**{n: self.params[f"{prefix}.{n}"] for n in names})

    # ----------------------------------------------------------- forward
    def forward(self, video: VideoSample) -> ForwardResult:
        g, p = self.cfg.guidance, self.params
        bundle = video.bundle
        depth = self.cfg.encoder.depth
        fuse_at = g.fusion_layer % depth

        def after_layer(i: int, x: Tensor) -> Tensor:
            if not g.gep or i != fuse_at:
                return x
            if g.advanced_fusion:
                return gate_fuse(x, bundle.p_global, self._group(GateParams, "gate"))
            return nx.add(x, nx.matvec(p["simple.W_global"], Tensor(bundle.p_global)))

        feats = VideoFeatures(Tensor(video.features), video.spans, video.video_id)
        x = encode(feats, self.cfg.encoder, p, after_layer=after_layer).tokens
        if g.tsep:
            if g.advanced_fusion:
                x = refine(x, bundle.sub_matrix, self._group(CrossAttnParams, "refine"))
            else:
                assigned = bundle.sub_matrix[video.positives]
                x = nx.add(x, nx.linear(Tensor(assigned), p["simple.W_sub"]))
        if g.calibrate:
            x = calibrate(x, bundle.graph, video.spans, self._group(CalibParams, "calib"), g.gamma, g.calib_rounds)
        head = head_forward(x, HeadParams(p["head.W_cls"], p["head.b_cls"], p["head.W_reg"], p["head.b_reg"]))
        return ForwardResult(x, head)

    # ------------------------------------------------------------ losses
    def loss_parts(self, video: VideoSample, fwd: ForwardResult, extra_negatives=None) -> dict[str, Tensor]:
        w = self.cfg.loss_weights
        classes, owner = video.targets
        parts = {"loss_cls": loss_cls(fwd.head.class_logits, classes)}

        starts, ends = predicted_intervals(fwd.head, video.spans)
        pos = np.flatnonzero(owner >= 0)
        if len(pos):
            ev = video.script.events
            gs = np.array([ev[k].start for k in owner[pos]])
            ge = np.array([ev[k].end for k in owner[pos]])
            parts["loss_reg"] = loss_reg(nx.take_rows(starts, pos), nx.take_rows(ends, pos), gs, ge)
        else:
            parts["loss_reg"] = Tensor(0.0)

        if self.sem_active:
            proj = nx.linear(fwd.features, self.params["sem.W_proj"])
            parts["loss_sem"] = loss_sem(proj, video.bundle.sub_matrix, video.positives, w.tau,
                                         extra_negatives, require_negative=False)
        else:
            parts["loss_sem"] = Tensor(0.0)

        if self.cal_active:
            logits = fwd.head.class_logits.data
            pred_cls = 1 + np.argmax(logits[:, 1:], axis=1)
            iv = np.stack([starts.data, ends.data], axis=1)
            pairs = match_to_graph(pred_cls, iv, video.bundle.graph)
            if pairs:
                nodes = np.array([a for a, _ in pairs])
                toks = np.array([t for _, t in pairs])
                scale = 1.0 / video.duration if w.cal_normalize else 1.0
                anchors = video.bundle.graph.anchors[nodes] * scale
                parts["loss_cal"] = loss_cal(nx.mul(nx.take_rows(starts, toks), scale),
                                             nx.mul(nx.take_rows(ends, toks), scale), anchors, w.cal_mode)
            else:
                parts["loss_cal"] = Tensor(0.0)
        else:
            parts["loss_cal"] = Tensor(0.0)
        return parts

    def video_loss(self, video: VideoSample, extra_negatives=None) -> tuple[Tensor, dict[str, Tensor]]:
        fwd = self.forward(video)
        parts = self.loss_parts(video, fwd, extra_negatives)
        return total_loss(parts, self.cfg.loss_weights), parts

    def batch_loss(self, videos: list[VideoSample]) -> tuple[Tensor, dict[str, float]]:
        """Mean total loss over a batch; other videos' clip prompts serve as extra negatives."""
        totals, logged = [], {k: 0.0 for k in ("loss_total", "loss_cls", "loss_reg", "loss_sem", "loss_cal")}
        for i, v in enumerate(videos):
            extra = None
            if self.sem_active and len(videos) > 1:
                extra = np.vstack([o.bundle.sub_matrix for j, o in enumerate(videos) if j != i])
            tot, parts = self.video_loss(v, extra)
            totals.append(tot)
            logged["loss_total"] += tot.item() / len(videos)
            for k, t in parts.items():
                logged[k] += t.item() / len(videos)
        loss = totals[0]
        for t in totals[1:]:
            loss = nx.add(loss, t)
        return nx.mul(loss, 1.0 / len(videos)), logged
