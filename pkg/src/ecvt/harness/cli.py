"""Command-line entry point: ``ecvt <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ECVTError
from .config import dataset_spec_from_json, load_config
from .data import generate_dataset, load_dataset, save_dataset
from .io import atomic_write_json, atomic_write_text
from .train import Checkpoint, make_checkpoint, read_history, run_eval, train, write_history

log = logging.getLogger("ecvt")

CHECKPOINT = "checkpoint.ckpt"
HISTORY = "history.jsonl"


def cmd_gen_data(args) -> int:
    spec = dataset_spec_from_json(json.loads(Path(args.spec).read_text()))
    ds = generate_dataset(spec, args.seed)
    save_dataset(ds, args.out)
    counts = {s: len(ds.split(s)) for s in ("train", "val")}
    print(f"wrote {len(ds.videos)} videos to {args.out} ({counts['train']} train, {counts['val']} val)")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", cfg.dumps() + "\n")

    resume = Checkpoint.load(args.resume) if args.resume else None
    history = []
    if resume is not None and (out / HISTORY).exists():
        history = [r for r in read_history(out / HISTORY) if r["step"] < resume.step]
    step = resume.step if resume else 0
    total = cfg.optimizer.total_steps
    every = args.checkpoint_every or total or 1

    def report(rec):
        if rec["step"] % max(1, args.print_every) == 0:
            log.info("step %4d  loss %.4f  lr %.2e", rec["step"], rec["loss_total"], rec["lr"])

    result = None
    while True:
        stop = min(total, (step // every + 1) * every)
        result = train(cfg, data, split=args.split, resume=resume, stop_at=stop, on_step=report)
        history.extend(result.history)
        resume = make_checkpoint(result.step, result.model, result.optimizer)
        step = result.step
        if args.checkpoint_every and step < total:
            resume.save(out / f"checkpoint_step{step:06d}.ckpt")
            write_history(out / HISTORY, history)
        if step >= total:
            break
    resume.save(out / CHECKPOINT)
    write_history(out / HISTORY, history)
    last = history[-1]["loss_total"] if history else float("nan")
    print(f"trained {step} steps, final loss {last:.4f}; checkpoint at {out / CHECKPOINT}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    data = load_dataset(args.data)
    model = ckpt.model()
    thresholds = tuple(args.thresholds) if args.thresholds else None
    report = run_eval(model, data, args.split, thresholds, args.report)
    if report.undefined:
        print(f"split {args.split!r} has no ground truth; mAP undefined")
    else:
        for t, v in report.per_threshold_map.items():
            print(f"mAP@{t:.2f} = {v:.4f}")
        print(f"average mAP = {report.average_map:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .. import gradcheck

    rep = gradcheck.run(args.module, seeds=args.seeds, eps=args.eps)
    for r in rep.results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.group:<10} {r.name:<24} max rel err {r.max_error:.2e}")
    print(f"{len(rep.results)} cases, {args.seeds} seeds each, worst {rep.max_error:.2e}, {rep.seconds:.1f}s")
    if args.json:
        atomic_write_json(args.json, rep.to_json())
    return 0 if rep.passed else 1


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = load_config(args.config)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    res = run_ablation(cfg, seeds=seeds, threshold=args.threshold, out_path=args.out)
    print(res.table())
    for name, c in res.checks().items():
        print(f"{'holds' if c['holds'] else 'FAILS'}  {name}  (margin {c['margin']:+.3f})")
    if args.out is None:
        print(json.dumps(res.to_json(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecvt", description="Guided video transformer for temporal action localization.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--spec", required=True, help="dataset spec JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a config on a dataset directory")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--print-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--report", required=True)
    e.add_argument("--thresholds", type=float, nargs="+")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", default="all", choices=["all", "ops", "encoder", "gate", "refine", "calibrate",
                                                       "losses", "chain", "model"])
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--json", help="also write the report here")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train the guidance ablation rows and compare on val")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--threshold", type=float, default=0.5)
    a.add_argument("--out", help="comparison JSON path (printed when omitted)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ECVTError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
