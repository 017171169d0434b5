"""Synthetic untrimmed videos: scripted events, token features, prompt bundles.

Each video is a row of fixed-length token segments.  Tokens inside an event
carry ``signal * template[class] + noise``; tokens outside carry noise only.
Scripts and prompt bundles come from :mod:`ecvt.prompt_oracle`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ..errors import ConfigError, GenerationError
from ..head_losses import ActionInstance, positive_clips, token_targets
from ..prompt_oracle import ClipPolicy, EventScript, PromptBundle, build_bundle, scripts_from_events
from .config import DatasetSpec, dataset_spec_from_json
from .io import atomic_write_bytes, atomic_write_json


@dataclass
class VideoSample:
    video_id: str
    features: np.ndarray  # (L, D_in)
    spans: np.ndarray  # (L, 2)
    script: EventScript
    bundle: PromptBundle
    split: str = "train"

    @property
    def duration(self) -> float:
        return self.script.video_duration_sec

    @cached_property
    def targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-token class ids and covering-event index (-1 for background)."""
        return token_targets(self.spans, self.script.events)

    @cached_property
    def positives(self) -> np.ndarray:
        return positive_clips(self.spans, self.bundle.clip_spans)

    def ground_truth(self) -> list[ActionInstance]:
        return [ActionInstance(e.class_id, e.start, e.end, 1.0, self.video_id) for e in self.script.events]


@dataclass
class SyntheticDataset:
    videos: list[VideoSample]
    vocab_size: int  # action classes, background excluded
    spec: DatasetSpec
    seed: int = 0
    templates: np.ndarray | None = field(default=None, repr=False)

    def split(self, name: str) -> list[VideoSample]:
        if name == "all":
            return list(self.videos)
        return [v for v in self.videos if v.split == name]

    @property
    def d_p(self) -> int:
        return self.spec.d_p


def class_templates(spec: DatasetSpec, seed: int) -> np.ndarray:
    """(C+1, D_in) feature templates; row 0 (background) is zero."""
    rng = np.random.default_rng([int(seed), 0x7E3])
    t = rng.standard_normal((spec.num_classes + 1, spec.d_in))
    t[0] = 0.0
    return t


def _place_events(rng: np.random.Generator, duration: float, spec: DatasetSpec) -> list[tuple[float, float]]:
    lo_n, hi_n = spec.events_per_video
    n = int(rng.integers(lo_n, hi_n + 1))
    step = spec.token_len
    for _ in range(spec.max_tries):
        lengths = rng.integers(int(spec.event_len_range[0] / step), int(spec.event_len_range[1] / step) + 1, size=n) * step
        slack = duration - lengths.sum() - spec.min_gap * (n - 1)
        if slack < 0:
            continue
        # split the slack into n+1 token-aligned gaps
        units = int(round(slack / step))
        cuts = np.sort(rng.integers(0, units + 1, size=n))
        gaps = np.diff(np.concatenate(([0], cuts))) * step
        out, t = [], 0.0
        for k in range(n):
            t += gaps[k] + (spec.min_gap if k else 0.0)
            out.append((float(t), float(t + lengths[k])))
            t += lengths[k]
        if out[-1][1] <= duration:
            return out
    raise GenerationError(f"could not fit {n} events into a {duration:.1f}s video after {spec.max_tries} tries")


def generate_video(
    spec: DatasetSpec, index: int, seed: int, templates: np.ndarray, split: str = "train"
) -> VideoSample:
    rng = np.random.default_rng([int(seed), 0xD47A, index])
    n_tok = int(rng.integers(int(spec.duration_range[0] / spec.token_len), int(spec.duration_range[1] / spec.token_len) + 1))
    duration = n_tok * spec.token_len
    spans = np.stack([np.arange(n_tok) * spec.token_len, (np.arange(n_tok) + 1) * spec.token_len], axis=1)
    placed = _place_events(rng, duration, spec)
    main = int(rng.integers(1, spec.num_classes + 1))
    events = []
    for s, e in placed:
        if spec.num_classes == 1 or rng.random() < spec.same_class_prob:
            c = main
        else:
            others = [k for k in range(1, spec.num_classes + 1) if k != main]
            c = int(others[rng.integers(len(others))])
        events.append((c, s, e))
    vid = f"v{index:04d}"
    script = scripts_from_events(events, duration, vid)
    classes, _ = token_targets(spans, script.events)
    feats = spec.signal * templates[classes] + spec.noise * rng.standard_normal((n_tok, spec.d_in))
    bundle = build_bundle(
        script, ClipPolicy(spec.clip_len, spec.clip_stride), spec.d_p, spec.prompt_seed, spec.num_classes + 1
    )
    return VideoSample(vid, feats, spans, script, bundle, split)


def generate_dataset(spec: DatasetSpec, seed: int = 0) -> SyntheticDataset:
    """Deterministic synthetic dataset; the last ``val_fraction`` of videos form the val split."""
    if spec.num_classes < 1:
        raise ConfigError("need at least one action class")
    templates = class_templates(spec, seed)
    n_val = int(round(spec.num_videos * spec.val_fraction))
    videos = [
        generate_video(spec, i, seed, templates, "val" if i >= spec.num_videos - n_val else "train")
        for i in range(spec.num_videos)
    ]
    return SyntheticDataset(videos, spec.num_classes, spec, seed, templates)


# ------------------------------------------------------------ on-disk format


def save_dataset(ds: SyntheticDataset, out_dir: str | Path) -> None:
    """Write ``manifest.json`` plus one directory per video."""
    out = Path(out_dir)
    entries = []
    for v in ds.videos:
        vdir = out / v.video_id
        atomic_write_bytes(vdir / "features.f32", np.ascontiguousarray(v.features, dtype="<f8").tobytes())
        atomic_write_json(vdir / "script.json", v.script.to_json())
        atomic_write_json(vdir / "bundle.json", v.bundle.to_json())
        entries.append({
            "video_id": v.video_id,
            "split": v.split,
            "L": int(v.features.shape[0]),
            "D_in": int(v.features.shape[1]),
            "spans": v.spans.tolist(),
        })
    manifest = {
        "vocab": {"num_classes": ds.vocab_size, "background": 0},
        "seed": ds.seed,
        "spec": json.loads(json.dumps(ds.spec.__dict__)),
        "videos": entries,
    }
    atomic_write_json(out / "manifest.json", manifest)


def load_dataset(data_dir: str | Path) -> SyntheticDataset:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = dataset_spec_from_json(manifest["spec"])
    videos = []
    for entry in manifest["videos"]:
        vdir = root / entry["video_id"]
        raw = np.frombuffer((vdir / "features.f32").read_bytes(), dtype="<f8")
        feats = raw.reshape(entry["L"], entry["D_in"]).astype(np.float64)
        script = EventScript.from_json(json.loads((vdir / "script.json").read_text()))
        bundle = PromptBundle.from_json(json.loads((vdir / "bundle.json").read_text()))
        videos.append(VideoSample(entry["video_id"], feats, np.asarray(entry["spans"], dtype=np.float64),
                                  script, bundle, entry.get("split", "train")))
    return SyntheticDataset(videos, int(manifest["vocab"]["num_classes"]), spec, int(manifest.get("seed", 0)))
