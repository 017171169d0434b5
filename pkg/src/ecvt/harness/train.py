"""AdamW training with linear warm-up and cosine decay, checkpoints, evaluation."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..errors import ConfigError, NumericError
from ..evaluation import EvalReport, evaluate
from ..head_losses import decode
from ..numerics import Tensor
from .config import OptimizerConfig, RunConfig, config_from_json
from .data import SyntheticDataset, VideoSample
from .io import atomic_write_bytes, atomic_write_json, atomic_write_text
from .model import ECVTModel

log = logging.getLogger(__name__)

HISTORY_KEYS = ("step", "loss_total", "loss_cls", "loss_reg", "loss_sem", "loss_cal", "lr")


def lr_at(t: int, lr_max: float, warmup: int, total: int) -> float:
    """Linear warm-up to ``lr_max`` at ``t = warmup``, then cosine decay to 0 at ``t = total``."""
    if t < warmup:
        return lr_max * t / warmup
    if total <= warmup:
        return lr_max
    frac = min(1.0, (t - warmup) / (total - warmup))
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay, applied to matrices only."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        # sorted so a model rebuilt from a checkpoint reduces in the same order
        grads = (self.params[k].grad for k in sorted(self.params))
        return math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))

    def step(self, lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        scale = 1.0
        if self.cfg.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.cfg.max_grad_norm:
                scale = self.cfg.max_grad_norm / norm
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.cfg.eps)
            data = p.data
            if p.data.ndim == 2 and self.cfg.weight_decay:
                data = data - lr * self.cfg.weight_decay * data
            p.data = data - lr * update


# ------------------------------------------------------------- checkpoints

_MAGIC = b"ECVTCKPT1\n"


@dataclass
class Checkpoint:
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    rng: dict
    config: dict
    num_classes: int
    d_p: int

    def to_bytes(self) -> bytes:
        tensors, blobs, offset = [], [], 0
        for group, table in (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name in sorted(table):
                arr = np.ascontiguousarray(table[name], dtype="<f8")
                tensors.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset})
                blobs.append(arr.tobytes())
                offset += arr.nbytes
        header = {
            "step": self.step, "adam_t": self.adam_t, "rng": self.rng, "config": self.config,
            "num_classes": self.num_classes, "d_p": self.d_p, "tensors": tensors,
        }
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return _MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(_MAGIC):
            raise ConfigError("not a checkpoint file")
        pos = len(_MAGIC)
        (n,) = struct.unpack("<Q", data[pos:pos + 8])
        header = json.loads(data[pos + 8:pos + 8 + n])
        body = memoryview(data)[pos + 8 + n:]
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for t in header["tensors"]:
            group, name = t["name"].split("/", 1)
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=t["offset"]).reshape(t["shape"])
            groups[group][name] = arr.astype(np.float64)
        return cls(header["step"], groups["param"], groups["adam_m"], groups["adam_v"], header["adam_t"],
                   header["rng"], header["config"], header["num_classes"], header["d_p"])

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def run_config(self) -> RunConfig:
        return config_from_json(self.config)

    def model(self) -> ECVTModel:
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return ECVTModel(self.run_config(), self.num_classes, self.d_p, params)


def make_checkpoint(step: int, model: ECVTModel, opt: AdamW) -> Checkpoint:
    return Checkpoint(
        step=step,
        params={k: p.data.copy() for k, p in model.params.items()},
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        adam_t=opt.t,
        rng={"shuffle_seed": model.cfg.seeds.shuffle, "scheme": "permutation per epoch keyed on (seed, epoch)"},
        config=model.cfg.to_json(),
        num_classes=model.num_classes,
        d_p=model.d_p,
    )


# ----------------------------------------------------------------- training


def batch_indices(step: int, n_videos: int, batch_size: int, seed: int) -> np.ndarray:
    """Videos used at ``step``: consecutive slices of a per-epoch permutation.

    A pure function of its arguments, so a resumed run sees the same batches.
    """
    per_epoch = max(1, math.ceil(n_videos / batch_size))
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([int(seed), epoch]).permutation(n_videos)
    return perm[k * batch_size:(k + 1) * batch_size]


@dataclass
class TrainResult:
    model: ECVTModel
    optimizer: AdamW
    history: list[dict] = field(default_factory=list)
    step: int = 0

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.params


def train(
    cfg: RunConfig,
    data: SyntheticDataset | list[VideoSample],
    *,
    split: str = "train",
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimise the full loss on ``split``.

    ``resume`` continues from a checkpoint; ``stop_at`` ends early (used to
    produce intermediate checkpoints).  Raises :class:`NumericError` naming the
    step and term when a loss goes non-finite.
    """
    videos = data.split(split) if isinstance(data, SyntheticDataset) else list(data)
    if not videos:
        raise ConfigError(f"no videos in split {split!r}")
    num_classes = data.vocab_size if isinstance(data, SyntheticDataset) else cfg.dataset.num_classes
    d_p = len(videos[0].bundle.p_global)
    oc = cfg.optimizer
    if resume is not None:
        model = resume.model()
        opt = AdamW(model.params, oc)
        opt.m = {k: v.copy() for k, v in resume.adam_m.items()}
        opt.v = {k: v.copy() for k, v in resume.adam_v.items()}
        opt.t = resume.adam_t
        start = resume.step
    else:
        model = ECVTModel(cfg, num_classes, d_p)
        opt = AdamW(model.params, oc)
        start = 0
    end = oc.total_steps if stop_at is None else min(stop_at, oc.total_steps)
    history = []
    for step in range(start, end):
        batch = [videos[i] for i in batch_indices(step, len(videos), cfg.batch_size, cfg.seeds.shuffle)]
        opt.zero_grad()
        try:
            loss, logged = model.batch_loss(batch)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}", term=exc.term, step=step) from exc
        if not math.isfinite(loss.item()):
            raise NumericError(f"step {step}: total loss is not finite", term="loss_total", step=step)
        loss.backward()
        lr = lr_at(step + 1, oc.lr, oc.warmup_steps, oc.total_steps)
        opt.step(lr)
        record = {"step": step, **logged, "lr": lr}
        if step % cfg.log_every == 0 or step == end - 1:
            history.append(record)
        if on_step is not None:
            on_step(record)
    return TrainResult(model, opt, history, end)


def write_history(path: str | Path, history: list[dict]) -> None:
    lines = [json.dumps({k: rec[k] for k in HISTORY_KEYS}) for rec in history]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_history(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------- evaluation


def predict(model: ECVTModel, videos: list[VideoSample]):
    dc = model.cfg.decode
    preds = []
    for v in videos:
        fwd = model.forward(v)
        preds.extend(decode(fwd.head, v.spans, dc.score_thresh, dc.nms_iou, v.duration, v.video_id, dc.score_mode))
    return preds


def run_eval(
    model: ECVTModel,
    data: SyntheticDataset | list[VideoSample],
    split: str = "val",
    thresholds=None,
    report_path: str | Path | None = None,
) -> EvalReport:
    videos = data.split(split) if isinstance(data, SyntheticDataset) else list(data)
    thresholds = tuple(thresholds or model.cfg.thresholds)
    preds = predict(model, videos)
    gts = [g for v in videos for g in v.ground_truth()]
    report = evaluate(preds, gts, thresholds)
    report.counts["videos"] = len(videos)
    if report_path is not None:
        atomic_write_json(report_path, report.to_json())
    return report
