import dataclasses
import json
import math

import numpy as np
import pytest

import oracles
from ecvt import numerics as nx
from ecvt.encoder import EncoderConfig, VideoFeatures, encode
from ecvt.encoder import init_params as init_encoder
from ecvt.errors import ConfigError, GenerationError, NumericError
from ecvt.harness import cli
from ecvt.harness.ablation import ROWS, row_config
from ecvt.harness.config import (
    DatasetSpec,
    GuidanceToggles,
    OptimizerConfig,
    RunConfig,
    Seeds,
    config_from_json,
    load_config,
)
from ecvt.harness.data import generate_dataset, load_dataset, save_dataset
from ecvt.harness.io import atomic_write_text
from ecvt.harness.model import ECVTModel
from ecvt.harness.train import (
    HISTORY_KEYS,
    AdamW,
    Checkpoint,
    batch_indices,
    lr_at,
    make_checkpoint,
    read_history,
    run_eval,
    train,
    write_history,
)
from ecvt.head_losses import HeadParams, head_forward, loss_cls, loss_reg, predicted_intervals
from ecvt.numerics import Tensor

SPEC = DatasetSpec(num_videos=6, num_classes=3, duration_range=(10, 14), events_per_video=(1, 2), d_in=8, d_p=8,
                   val_fraction=0.34)
CFG = RunConfig(
    encoder=EncoderConfig(depth=1, heads=2, d_v=8, d_ff=16),
    dataset=SPEC,
    optimizer=OptimizerConfig(lr=3e-3, warmup_steps=2, total_steps=8),
    batch_size=2,
)
OFF = GuidanceToggles(gep=False, tsep=False, calibrate=False, advanced_fusion=False)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SPEC, 0)


# ------------------------------------------------------------ schedule


def test_lr_schedule_end_points():
    assert lr_at(0, 1.0, 10, 100) == 0.0
    assert lr_at(10, 1.0, 10, 100) == 1.0
    assert lr_at(100, 1.0, 10, 100) == pytest.approx(0.0, abs=1e-16)
    for t in (3, 10, 40, 77, 100):
        assert lr_at(t, 3e-3, 10, 100) == pytest.approx(oracles.lr_schedule(t, 3e-3, 10, 100), abs=1e-18)


def test_batches_are_pure_functions_of_step():
    assert batch_indices(5, 10, 4, 3).tolist() == batch_indices(5, 10, 4, 3).tolist()
    epoch = np.concatenate([batch_indices(s, 10, 4, 3) for s in range(3)])
    assert sorted(epoch.tolist()) == list(range(10))


# ---------------------------------------------------------------- data


def test_generation_is_deterministic(data):
    again = generate_dataset(SPEC, 0)
    for a, b in zip(data.videos, again.videos):
        assert a.features.tobytes() == b.features.tobytes()
        assert a.script == b.script


def test_noiseless_tokens_equal_templates():
    spec = dataclasses.replace(SPEC, noise=0.0)
    ds = generate_dataset(spec, 1)
    for v in ds.videos:
        classes, _ = v.targets
        np.testing.assert_array_equal(v.features, ds.templates[classes])


def test_generated_scripts_are_valid():
    ds = generate_dataset(DatasetSpec(num_videos=20, num_classes=5), 2)
    assert len(ds.videos) == 20
    for v in ds.videos:
        v.script.validate()
        v.bundle.graph.validate()
        assert 1 <= len(v.script.events) <= 4
        ev = v.script.events
        assert all(a.end <= b.start for a, b in zip(ev, ev[1:]))


def test_infeasible_packing_raises():
    spec = DatasetSpec(num_videos=1, duration_range=(4, 4), events_per_video=(4, 4), event_len_range=(3, 3), max_tries=5)
    with pytest.raises(GenerationError):
        generate_dataset(spec, 0)


def test_dataset_directory_round_trip(tmp_path, data):
    save_dataset(data, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    v0 = manifest["videos"][0]
    raw = (tmp_path / v0["video_id"] / "features.f32").read_bytes()
    assert len(raw) == v0["L"] * v0["D_in"] * 8
    back = load_dataset(tmp_path)
    for a, b in zip(data.videos, back.videos):
        assert a.features.tobytes() == b.features.tobytes()
        assert a.bundle.to_json() == b.bundle.to_json()
        assert a.split == b.split


# -------------------------------------------------------------- config


def test_config_round_trip_and_unknown_keys(tmp_path):
    assert config_from_json(CFG.to_json()) == CFG
    bad = CFG.to_json()
    bad["optimiser"] = {}
    with pytest.raises(ConfigError, match="optimiser"):
        config_from_json(bad)
    nested = CFG.to_json()
    nested["guidance"]["gpe"] = True
    with pytest.raises(ConfigError, match="gpe"):
        config_from_json(nested)
    path = tmp_path / "c.json"
    atomic_write_text(path, CFG.dumps())
    assert load_config(path) == CFG


def test_width_mismatch_rejected():
    with pytest.raises(ConfigError):
        RunConfig(encoder=EncoderConfig(d_v=16), dataset=DatasetSpec(d_in=8))


# ------------------------------------------------------------ training


def test_zero_steps_keeps_initialisation(data):
    cfg = CFG.replace(optimizer=OptimizerConfig(total_steps=0, warmup_steps=0))
    res = train(cfg, data)
    init = ECVTModel(cfg, data.vocab_size, data.d_p).params
    assert res.history == []
    assert all(res.params[k].data.tobytes() == init[k].data.tobytes() for k in init)


def test_training_is_deterministic(tmp_path, data):
    a, b = train(CFG, data), train(CFG, data)
    write_history(tmp_path / "a.jsonl", a.history)
    write_history(tmp_path / "b.jsonl", b.history)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rec = read_history(tmp_path / "a.jsonl")
    assert len(rec) == 8 and set(rec[0]) == set(HISTORY_KEYS)


def test_resume_matches_straight_run(data):
    straight = train(CFG, data)
    first = train(CFG, data, stop_at=3)
    ckpt = Checkpoint.from_bytes(make_checkpoint(first.step, first.model, first.optimizer).to_bytes())
    rest = train(CFG, data, resume=ckpt)
    joined = [r["loss_total"] for r in first.history + rest.history]
    assert joined == [r["loss_total"] for r in straight.history]
    assert all(rest.params[k].data.tobytes() == straight.params[k].data.tobytes() for k in straight.params)


def test_checkpoint_bytes_are_stable(tmp_path, data):
    res = train(CFG, data, stop_at=2)
    ckpt = make_checkpoint(res.step, res.model, res.optimizer)
    ckpt.save(tmp_path / "a.ckpt")
    Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_nan_aborts_with_step_and_term(data, monkeypatch):
    cfg = CFG
    original = ECVTModel.loss_parts

    def poisoned(self, video, fwd, extra=None):
        parts = original(self, video, fwd, extra)
        parts["loss_reg"] = Tensor(float("nan"))
        return parts

    monkeypatch.setattr(ECVTModel, "loss_parts", poisoned)
    with pytest.raises(NumericError) as info:
        train(cfg, data)
    assert info.value.step == 0 and info.value.term == "loss_reg"
    assert "step 0" in str(info.value)


def _reference_baseline_history(cfg, data):
    """Encoder plus head trained with classification and regression only, written out by hand."""
    videos = data.split("train")
    seed = cfg.seeds.model
    params = dict(init_encoder(dataclasses.replace(cfg.encoder, seed=seed)))
    hp = HeadParams.init(cfg.encoder.d_v, data.vocab_size, seed)
    params.update({"head.W_cls": hp.W_cls, "head.b_cls": hp.b_cls, "head.W_reg": hp.W_reg, "head.b_reg": hp.b_reg})
    opt = AdamW(params, cfg.optimizer)
    out = []
    for step in range(cfg.optimizer.total_steps):
        batch = [videos[i] for i in batch_indices(step, len(videos), cfg.batch_size, cfg.seeds.shuffle)]
        opt.zero_grad()
        totals = []
        for v in batch:
            x = encode(VideoFeatures(Tensor(v.features), v.spans), cfg.encoder, params).tokens
            head = head_forward(x, HeadParams(params["head.W_cls"], params["head.b_cls"],
                                              params["head.W_reg"], params["head.b_reg"]))
            classes, owner = v.targets
            pos = np.flatnonzero(owner >= 0)
            s, e = predicted_intervals(head, v.spans)
            gs = [v.script.events[k].start for k in owner[pos]]
            ge = [v.script.events[k].end for k in owner[pos]]
            reg = loss_reg(nx.take_rows(s, pos), nx.take_rows(e, pos), gs, ge)
            t = nx.add(loss_cls(head.class_logits, classes), nx.mul(reg, cfg.loss_weights.lambda_reg))
            t = nx.add(nx.add(t, nx.mul(Tensor(0.0), cfg.loss_weights.lambda_sem)),
                       nx.mul(Tensor(0.0), cfg.loss_weights.lambda_cal))
            totals.append(t)
        loss = totals[0]
        for t in totals[1:]:
            loss = nx.add(loss, t)
        loss = nx.mul(loss, 1.0 / len(batch))
        loss.backward()
        opt.step(lr_at(step + 1, cfg.optimizer.lr, cfg.optimizer.warmup_steps, cfg.optimizer.total_steps))
        out.append(loss.item())
    return out, params


def test_baseline_equals_plain_encoder_and_head(data):
    from ecvt.head_losses import LossWeights

    cfg = CFG.replace(guidance=OFF, loss_weights=LossWeights(lambda_sem=0.0, lambda_cal=0.0))
    res = train(cfg, data)
    ref, ref_params = _reference_baseline_history(cfg, data)
    assert [r["loss_total"] for r in res.history] == ref
    assert sorted(res.params) == sorted(ref_params)
    # with the toggles off the sem / cal weights are irrelevant
    res2 = train(CFG.replace(guidance=OFF), data)
    assert [r["loss_total"] for r in res2.history] == ref


def test_baseline_parameter_count_matches_standalone_build(data):
    m = ECVTModel(CFG.replace(guidance=OFF), data.vocab_size, data.d_p)
    enc = init_encoder(CFG.encoder)
    hp = HeadParams.init(CFG.encoder.d_v, data.vocab_size, 0)
    standalone = sum(t.size for t in enc.values()) + sum(t.size for t in (hp.W_cls, hp.b_cls, hp.W_reg, hp.b_reg))
    assert m.parameter_count() == standalone
    full = ECVTModel(CFG, data.vocab_size, data.d_p)
    assert full.parameter_count() > standalone
    assert {k.split(".")[0] for k in full.params} == {"enc", "head", "gate", "refine", "calib", "sem"}


def test_ablation_rows():
    assert row_config(CFG, "baseline", 3).guidance == dataclasses.replace(CFG.guidance, **ROWS["baseline"])
    assert row_config(CFG, "simple_fusion", 3).guidance.advanced_fusion is False
    assert row_config(CFG, "full", 3).seeds == Seeds(3, 3, 3)


# ---------------------------------------------------------------- eval


def test_untrained_model_on_pure_noise_scores_near_zero():
    spec = DatasetSpec(num_videos=12, num_classes=5, signal=0.0, noise=1.0, d_in=8, d_p=8)
    cfg = CFG.replace(dataset=spec)
    ds = generate_dataset(spec, 4)
    model = ECVTModel(cfg, ds.vocab_size, ds.d_p)
    rep = run_eval(model, ds, "train")
    assert rep.per_threshold_map[0.5] < 0.1


def test_empty_split_report_is_flagged(tmp_path, data):
    model = ECVTModel(CFG, data.vocab_size, data.d_p)
    rep = run_eval(model, [], "val", report_path=tmp_path / "r.json")
    assert rep.undefined
    saved = json.loads((tmp_path / "r.json").read_text())
    assert set(saved) == {"per_threshold_map", "average_map", "per_class_ap", "counts"}
    assert saved["counts"]["map_undefined"] is True


# ----------------------------------------------------------------- cli


def test_cli_end_to_end(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_videos": 4, "num_classes": 3, "d_in": 8, "d_p": 8, "val_fraction": 0.5,
                                "duration_range": [10, 12], "events_per_video": [1, 2]}))
    cfg = CFG.to_json()
    cfg["optimizer"]["total_steps"] = 4
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "d"), "--seed", "1"]) == 0
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "run"), "--checkpoint-every", "2"]) == 0
    assert (tmp_path / "run" / "checkpoint_step000002.ckpt").exists()
    hist = read_history(tmp_path / "run" / "history.jsonl")
    assert [r["step"] for r in hist] == [0, 1, 2, 3]
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.ckpt"), "--data", str(tmp_path / "d"),
                     "--split", "val", "--report", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert list(rep) == ["per_threshold_map", "average_map", "per_class_ap", "counts"]
    # resuming from the mid-run checkpoint reproduces the final checkpoint exactly
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "run2"),
                     "--resume", str(tmp_path / "run" / "checkpoint_step000002.ckpt")]) == 0
    assert (tmp_path / "run" / "checkpoint.ckpt").read_bytes() == (tmp_path / "run2" / "checkpoint.ckpt").read_bytes()


def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"encoder": {"dv": 8}}))
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path), "--out",
                     str(tmp_path / "o")]) == 2
    assert "dv" in capsys.readouterr().err


def test_cli_gradcheck_single_module(capsys):
    assert cli.main(["gradcheck", "--module", "losses", "--seeds", "3"]) == 0
    assert "loss_sem" in capsys.readouterr().out


def test_atomic_write_leaves_no_temp_files(tmp_path):
    for i in range(3):
        atomic_write_text(tmp_path / "f.txt", str(i))
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]
    assert (tmp_path / "f.txt").read_text() == "2"


def test_history_has_every_term(data):
    res = train(CFG.replace(optimizer=OptimizerConfig(total_steps=2, warmup_steps=1)), data)
    for rec in res.history:
        assert set(HISTORY_KEYS) <= set(rec)
        assert all(math.isfinite(rec[k]) for k in HISTORY_KEYS)


def test_ablation_runner_writes_comparison(tmp_path):
    from ecvt.harness.ablation import run_ablation

    with pytest.raises(ConfigError):
        run_ablation(CFG.replace(dataset=dataclasses.replace(SPEC, val_fraction=0.0)), seeds=(0,))
    cfg = CFG.replace(optimizer=OptimizerConfig(total_steps=2, warmup_steps=1))
    res = run_ablation(cfg, seeds=(0, 1), rows=("baseline", "+gep", "+tsep", "simple_fusion", "full"),
                       out_path=tmp_path / "abl.json")
    saved = json.loads((tmp_path / "abl.json").read_text())
    assert set(saved["rows"]) == set(ROWS)
    assert all(len(r["per_seed"]) == 2 for r in saved["rows"].values())
    assert set(saved["orderings"]) == set(res.checks())
    assert "baseline" in res.table()
