"""Guidance ablation: five toggle rows trained over several seeds, compared on val."""

from __future__ import annotations

import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from .config import GuidanceToggles, RunConfig, Seeds
from .data import generate_dataset
from .io import atomic_write_json
from .train import run_eval, train

log = logging.getLogger(__name__)

ROWS: dict[str, dict[str, bool]] = {
    "baseline": dict(gep=False, tsep=False, calibrate=False, advanced_fusion=False),
    "+gep": dict(gep=True, tsep=False, calibrate=False, advanced_fusion=True),
    "+tsep": dict(gep=False, tsep=True, calibrate=False, advanced_fusion=True),
    "simple_fusion": dict(gep=True, tsep=True, calibrate=False, advanced_fusion=False),
    "full": dict(gep=True, tsep=True, calibrate=True, advanced_fusion=True),
}

# (lower, higher) pairs whose ordering the ablation is expected to show
ORDERINGS = (("baseline", "+gep"), ("baseline", "+tsep"), ("simple_fusion", "full"))


def row_config(cfg: RunConfig, row: str, seed: int) -> RunConfig:
    toggles = dataclasses.replace(cfg.guidance, **ROWS[row])
    return cfg.replace(guidance=toggles, seeds=Seeds(model=seed, data=seed, shuffle=seed))


@dataclass
class AblationResult:
    scores: dict[str, list[float]]  # row -> val mAP per seed
    seeds: list[int]
    threshold: float
    seconds: float

    @property
    def medians(self) -> dict[str, float]:
        return {row: statistics.median(v) for row, v in self.scores.items()}

    def checks(self) -> dict[str, dict]:
        med = self.medians
        return {
            f"{lo} <= {hi}": {"margin": med[hi] - med[lo], "holds": med[hi] - med[lo] >= 0.0}
            for lo, hi in ORDERINGS
        }

    def to_json(self) -> dict:
        return {
            "metric": f"median val mAP@{self.threshold:.2f}",
            "seeds": self.seeds,
            "rows": {row: {"per_seed": self.scores[row], "median": self.medians[row]} for row in self.scores},
            "orderings": self.checks(),
            "seconds": self.seconds,
        }

    def table(self) -> str:
        lines = [f"{'row':<14} {'median':>7}  per-seed"]
        for row, vals in self.scores.items():
            lines.append(f"{row:<14} {self.medians[row]:7.3f}  " + " ".join(f"{v:.3f}" for v in vals))
        return "\n".join(lines)


def run_ablation(
    cfg: RunConfig,
    seeds=(0, 1, 2, 3, 4),
    rows=tuple(ROWS),
    threshold: float = 0.5,
    out_path: str | Path | None = None,
) -> AblationResult:
    """Train every row on every seed and score it on the val split.

    Rows sharing a seed see the same generated dataset and shuffle order.
    """
    if cfg.dataset.val_fraction <= 0:
        raise ConfigError("ablation needs a val split: set dataset.val_fraction > 0")
    t0 = time.perf_counter()
    scores: dict[str, list[float]] = {row: [] for row in rows}
    for seed in seeds:
        data = generate_dataset(cfg.dataset, seed)
        for row in rows:
            rc = row_config(cfg, row, seed)
            result = train(rc, data, split="train")
            report = run_eval(result.model, data, "val", thresholds=(threshold,))
            value = report.per_threshold_map[threshold]
            scores[row].append(0.0 if value is None else float(value))
            log.info("seed %d %-14s val mAP@%.2f = %.3f", seed, row, threshold, scores[row][-1])
    res = AblationResult(scores, list(seeds), threshold, time.perf_counter() - t0)
    if out_path is not None:
        atomic_write_json(out_path, res.to_json())
    return res


def default_ablation_config() -> RunConfig:
    """Held-out split with moderate noise; otherwise the standard defaults."""
    base = RunConfig()
    spec = dataclasses.replace(base.dataset, num_videos=60, val_fraction=1 / 3, noise=1.0)
    return base.replace(dataset=spec, guidance=GuidanceToggles())
